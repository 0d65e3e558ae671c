"""Declarative architecture rows, their expansion into layer plans, and the
builders for every network variant and head type.

A network is a list of rows (op, t, c, n, s). The planner expands rows into
leaf descriptors with exact shapes; the same plan drives model building,
parameter/MAdds accounting and receptive-field analysis, so the structural
and materialized views can never drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .layers import (
    BatchNorm2d,
    Conv2d,
    DepthwiseConv2d,
    FCHead,
    GDConv,
    GlobalAvgPool,
    Model,
    PReLU,
    ReLU,
    Residual,
)
from .tensor import Rng, ShapeError

ROW_OPS = ("conv3x3", "dwconv3x3", "bottleneck", "conv1x1", "gdconv", "linconv1x1", "gapool", "fc")
VARIANTS = ("primary", "m", "s", "relu", "expand2")
SUPPORTED_RESOLUTIONS = ((112, 112), (112, 96), (96, 96))
GLOBAL_OPS = ("gd", "gapool", "fc")


@dataclass(frozen=True)
class BottleneckSpec:
    """One table row of inverted-residual blocks: expand t, out c, repeat n, stride s."""

    t: int
    c: int
    n: int
    s: int

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"expansion factor must be >= 1, got {self.t}")
        if self.n < 1:
            raise ValueError(f"repetition count must be >= 1, got {self.n}")
        if self.s not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.s}")


@dataclass(frozen=True)
class Row:
    op: str
    t: int | None
    c: int
    n: int
    s: int

    def __post_init__(self):
        if self.op not in ROW_OPS:
            raise ValueError(f"unknown row op {self.op!r}")


# Rows of the primary network's architecture table.
PRIMARY_ROWS = (
    Row("conv3x3", None, 64, 1, 2),
    Row("dwconv3x3", None, 64, 1, 1),
    Row("bottleneck", 2, 64, 5, 2),
    Row("bottleneck", 4, 128, 1, 2),
    Row("bottleneck", 2, 128, 6, 1),
    Row("bottleneck", 4, 128, 1, 2),
    Row("bottleneck", 2, 128, 2, 1),
    Row("conv1x1", None, 512, 1, 1),
    Row("gdconv", None, 512, 1, 1),
    Row("linconv1x1", None, 128, 1, 1),
)


@dataclass(frozen=True)
class ArchSpec:
    input_hw: tuple[int, int]
    rows: tuple[Row, ...]
    nonlinearity: str = "prelu"  # or "relu"
    variant: str = "custom"
    bn_on_linear: bool = True  # BN after the linear gdconv / linconv1x1 rows
    input_channels: int = 3  # overridable for head-only architectures

    def __post_init__(self):
        if self.nonlinearity not in ("prelu", "relu"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if not self.rows:
            raise ValueError("architecture needs at least one row")

    @property
    def embedding_dim(self) -> int:
        return self.rows[-1].c

    @property
    def head(self) -> str:
        for row in self.rows:
            if row.op in ("gdconv", "gapool", "fc"):
                return row.op
        return "none"


@dataclass(frozen=True)
class LeafPlan:
    """Fully resolved single layer: kind, channels, kernel and shapes."""

    name: str
    kind: str  # conv | dw | gd | bn | prelu | relu | gapool | fc
    cin: int
    cout: int
    kernel: tuple[int, int] | None
    stride: tuple[int, int]
    padding: tuple[int, int]
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]


@dataclass(frozen=True)
class SegmentPlan:
    """A run of leaves materialized together; residual segments get a shortcut."""

    name: str
    leaves: tuple[LeafPlan, ...]
    residual: bool
    row_index: int


def _act_kind(nonlinearity: str) -> str:
    return "prelu" if nonlinearity == "prelu" else "relu"


def _conv_leaf(name, kind, cin, cout, k, stride, padding, in_hw):
    out_hw = ops.conv_out_hw(in_hw[0], in_hw[1], k[0], k[1], stride, padding)
    return LeafPlan(name, kind, cin, cout, k, stride, padding, in_hw, out_hw)


def _pointwise(name, cin, cout, in_hw):
    return _conv_leaf(name, "conv", cin, cout, (1, 1), (1, 1), (0, 0), in_hw)


def _same_shape_leaf(name, kind, c, hw):
    return LeafPlan(name, kind, c, c, None, (1, 1), (0, 0), hw, hw)


def expand_bottleneck(
    spec: BottleneckSpec,
    in_channels: int,
    in_hw: tuple[int, int],
    nonlinearity: str = "prelu",
    name: str = "bneck",
    row_index: int = 0,
) -> list[SegmentPlan]:
    """Expand one bottleneck row into n inverted-residual segments.

    Each repetition runs expand 1x1 -> BN -> act -> depthwise 3x3 -> BN ->
    act -> project 1x1 -> BN; the first repetition takes the row stride and
    an identity shortcut appears exactly when stride == 1 and the channel
    count is preserved.
    """
    act = _act_kind(nonlinearity)
    segments = []
    c_in, hw = in_channels, in_hw
    for rep in range(spec.n):
        stride = spec.s if rep == 0 else 1
        hidden = spec.t * c_in
        base = f"{name}.{rep}"
        leaves = [_pointwise(f"{base}.expand", c_in, hidden, hw)]
        leaves.append(_same_shape_leaf(f"{base}.expand_bn", "bn", hidden, hw))
        leaves.append(_same_shape_leaf(f"{base}.expand_act", act, hidden, hw))
        dw = _conv_leaf(f"{base}.dw", "dw", hidden, hidden, (3, 3), (stride, stride), (1, 1), hw)
        leaves.append(dw)
        leaves.append(_same_shape_leaf(f"{base}.dw_bn", "bn", hidden, dw.out_hw))
        leaves.append(_same_shape_leaf(f"{base}.dw_act", act, hidden, dw.out_hw))
        leaves.append(_pointwise(f"{base}.project", hidden, spec.c, dw.out_hw))
        leaves.append(_same_shape_leaf(f"{base}.project_bn", "bn", spec.c, dw.out_hw))
        shortcut = stride == 1 and c_in == spec.c
        segments.append(SegmentPlan(base, tuple(leaves), shortcut, row_index))
        c_in, hw = spec.c, dw.out_hw
    return segments


def plan(arch: ArchSpec) -> list[SegmentPlan]:
    """Expand every row into segments with exact shapes, validating the chain."""
    act = _act_kind(arch.nonlinearity)
    segments: list[SegmentPlan] = []
    c, hw = arch.input_channels, arch.input_hw
    seen: dict[str, int] = {}
    bneck_no = 0
    for idx, row in enumerate(arch.rows):
        if row.op == "bottleneck":
            bneck_no += 1
            label = f"bneck{bneck_no}"
            spec = BottleneckSpec(row.t, row.c, row.n, row.s)
            segs = expand_bottleneck(spec, c, hw, arch.nonlinearity, label, idx)
            segments.extend(segs)
            c, hw = row.c, segs[-1].leaves[-1].out_hw
            continue
        seen[row.op] = seen.get(row.op, 0) + 1
        label = row.op if seen[row.op] == 1 else f"{row.op}_{seen[row.op]}"
        leaves: list[LeafPlan] = []
        if row.op == "conv3x3":
            conv = _conv_leaf(label, "conv", c, row.c, (3, 3), (row.s, row.s), (1, 1), hw)
            leaves = [
                conv,
                _same_shape_leaf(f"{label}_bn", "bn", row.c, conv.out_hw),
                _same_shape_leaf(f"{label}_act", act, row.c, conv.out_hw),
            ]
        elif row.op == "dwconv3x3":
            conv = _conv_leaf(label, "dw", c, c, (3, 3), (row.s, row.s), (1, 1), hw)
            if row.c != c:
                raise ShapeError(f"{label}: depthwise row cannot change channels {c} -> {row.c}")
            leaves = [
                conv,
                _same_shape_leaf(f"{label}_bn", "bn", c, conv.out_hw),
                _same_shape_leaf(f"{label}_act", act, c, conv.out_hw),
            ]
        elif row.op == "conv1x1":
            conv = _pointwise(label, c, row.c, hw)
            leaves = [
                conv,
                _same_shape_leaf(f"{label}_bn", "bn", row.c, hw),
                _same_shape_leaf(f"{label}_act", act, row.c, hw),
            ]
        elif row.op == "gdconv":
            if row.c != c:
                raise ShapeError(f"{label}: gdconv keeps channels, got {c} -> {row.c}")
            conv = _conv_leaf(label, "gd", c, c, hw, (1, 1), (0, 0), hw)
            leaves = [conv]
            if arch.bn_on_linear:
                leaves.append(_same_shape_leaf(f"{label}_bn", "bn", c, conv.out_hw))
        elif row.op == "linconv1x1":
            conv = _pointwise(label, c, row.c, hw)
            leaves = [conv]
            if arch.bn_on_linear:
                leaves.append(_same_shape_leaf(f"{label}_bn", "bn", row.c, hw))
        elif row.op == "gapool":
            leaves = [LeafPlan(label, "gapool", c, c, None, (1, 1), (0, 0), hw, (1, 1))]
            if row.c != c:
                raise ShapeError(f"{label}: gapool keeps channels, got {c} -> {row.c}")
        elif row.op == "fc":
            leaves = [LeafPlan(label, "fc", c * hw[0] * hw[1], row.c, None, (1, 1), (0, 0), hw, (1, 1))]
        segments.append(SegmentPlan(label, tuple(leaves), False, idx))
        c, hw = leaves[-1].cout, leaves[-1].out_hw
    return segments


def shape_propagate(arch: ArchSpec):
    """Per-row input shapes plus the final output, as (label, channels, h, w).

    The sequence of input shapes mirrors the architecture table's Input
    column; the trailing entry is the network output.
    """
    segments = plan(arch)
    rows = []
    last_row = -1
    c, hw = arch.input_channels, arch.input_hw
    for seg in segments:
        if seg.row_index != last_row:
            label = arch.rows[seg.row_index].op
            rows.append((label, c, hw[0], hw[1]))
            last_row = seg.row_index
        c, hw = seg.leaves[-1].cout, seg.leaves[-1].out_hw
    rows.append(("output", c, hw[0], hw[1]))
    return rows


# ---------------------------------------------------------------------------
# variant construction


def _scale_rows(rows, width_divisor: int):
    if width_divisor < 1:
        raise ValueError(f"width divisor must be >= 1, got {width_divisor}")
    if width_divisor == 1:
        return rows
    out = []
    for row in rows:
        if row.c % width_divisor:
            raise ValueError(f"channel count {row.c} not divisible by {width_divisor}")
        out.append(replace(row, c=row.c // width_divisor))
    return tuple(out)


def make_arch(
    variant: str,
    input_hw: tuple[int, int] = (112, 112),
    bn_on_linear: bool = True,
    width_divisor: int = 1,
) -> ArchSpec:
    """Architecture for a named variant at one of the supported resolutions."""
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if tuple(input_hw) not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"unsupported input resolution {input_hw}, expected one of {SUPPORTED_RESOLUTIONS}")
    rows = list(PRIMARY_ROWS)
    nonlinearity = "prelu"
    if variant == "m":
        rows = rows[:-1]  # drop the final linear 1x1; embedding becomes 512
    elif variant == "s":
        rows = [r for r in rows if r.op not in ("conv1x1", "linconv1x1")]
    elif variant == "relu":
        nonlinearity = "relu"
    elif variant == "expand2":
        rows = [replace(r, t=r.t * 2) if r.op == "bottleneck" else r for r in rows]
    # channel-preserving rows inherit whatever now flows into them
    fixed, prev_c = [], 3
    for r in rows:
        if r.op in ("dwconv3x3", "gdconv", "gapool"):
            r = replace(r, c=prev_c)
        fixed.append(r)
        prev_c = r.c
    rows = fixed
    return ArchSpec(
        input_hw=tuple(input_hw),
        rows=_scale_rows(tuple(rows), width_divisor),
        nonlinearity=nonlinearity,
        variant=variant,
        bn_on_linear=bn_on_linear,
    )


def _he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def _materialize_leaf(leaf: LeafPlan, rng: Rng, dtype):
    if leaf.kind == "conv":
        kh, kw = leaf.kernel
        w = rng.normal((leaf.cout, leaf.cin, kh, kw), 0.0, _he_std(leaf.cin * kh * kw), dtype)
        return Conv2d(ops.ConvParams(w, None, leaf.stride, leaf.padding), leaf.name)
    if leaf.kind == "dw":
        kh, kw = leaf.kernel
        w = rng.normal((leaf.cout, 1, kh, kw), 0.0, _he_std(kh * kw), dtype)
        return DepthwiseConv2d(ops.DepthwiseConvParams(w, None, leaf.stride, leaf.padding), leaf.name)
    if leaf.kind == "gd":
        kh, kw = leaf.kernel
        w = rng.normal((leaf.cout, 1, kh, kw), 0.0, _he_std(kh * kw), dtype)
        return GDConv(ops.GDConvParams(w), leaf.name)
    if leaf.kind == "bn":
        c = leaf.cout
        return BatchNorm2d(
            ops.BatchNormParams(
                gamma=np.ones(c, dtype=dtype),
                beta=np.zeros(c, dtype=dtype),
                running_mean=np.zeros(c, dtype=dtype),
                running_var=np.ones(c, dtype=dtype),
            ),
            leaf.name,
        )
    if leaf.kind == "prelu":
        return PReLU(ops.PReLUParams(np.full(leaf.cout, 0.25, dtype=dtype)), leaf.name)
    if leaf.kind == "relu":
        return ReLU(leaf.name)
    if leaf.kind == "gapool":
        return GlobalAvgPool(leaf.name)
    if leaf.kind == "fc":
        w = rng.normal((leaf.cout, leaf.cin), 0.0, _he_std(leaf.cin), dtype)
        return FCHead(w, leaf.name)
    raise ValueError(f"unknown leaf kind {leaf.kind!r}")


def build_model(arch: ArchSpec, rng: Rng | int, dtype=np.float32) -> Model:
    """Materialize an architecture with seeded He-normal initialization."""
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    layers = []
    global_op_index = -1
    for seg in plan(arch):
        materialized = [_materialize_leaf(leaf, rng, dtype) for leaf in seg.leaves]
        if seg.residual:
            block = Residual(materialized, seg.name)
            layers.append(block)
        else:
            for leaf, layer in zip(seg.leaves, materialized):
                if leaf.kind in GLOBAL_OPS and global_op_index < 0:
                    global_op_index = len(layers)
                layers.append(layer)
    return Model(layers, arch, global_op_index)


def build_mobilefacenet(
    variant: str,
    input_hw: tuple[int, int] = (112, 112),
    seed: int | Rng = 0,
    bn_on_linear: bool = True,
    width_divisor: int = 1,
    dtype=np.float32,
) -> Model:
    arch = make_arch(variant, input_hw, bn_on_linear, width_divisor)
    return build_model(arch, seed, dtype)


def build_head_variant(head: str, fmap_chw: tuple[int, int, int], embedding_dim: int, rng: Rng | int, dtype=np.float32):
    """Bare global-operator head over a feature map of shape (c, h, w).

    gdconv and gapool emit one value per channel; fc flattens the map and
    projects it to embedding_dim without a bias.
    """
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    c, h, w = fmap_chw
    if head == "gdconv":
        weight = rng.normal((c, 1, h, w), 0.0, _he_std(h * w), dtype)
        return [GDConv(ops.GDConvParams(weight), "gdconv")]
    if head == "gapool":
        return [GlobalAvgPool("gapool")]
    if head == "fc":
        weight = rng.normal((embedding_dim, c * h * w), 0.0, _he_std(c * h * w), dtype)
        return [FCHead(weight, "fc")]
    raise ValueError(f"unknown head {head!r}, expected gdconv|gapool|fc")


# ---------------------------------------------------------------------------
# descriptor text format


def format_descriptor(arch: ArchSpec, folded: bool = False) -> str:
    """One-line-per-row text form used inside model files and by the CLI."""
    lines = [
        f"input={arch.input_hw[0]}x{arch.input_hw[1]}",
        f"channels={arch.input_channels}",
        f"variant={arch.variant}",
        f"nonlinearity={arch.nonlinearity}",
        f"bn_on_linear={int(arch.bn_on_linear)}",
        f"form={'folded' if folded else 'train'}",
    ]
    for row in arch.rows:
        t = "-" if row.t is None else str(row.t)
        lines.append(f"{row.op},{t},{row.c},{row.n},{row.s}")
    return "\n".join(lines) + "\n"


def parse_descriptor(text: str) -> tuple[ArchSpec, bool]:
    headers: dict[str, str] = {}
    rows: list[Row] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line and "," not in line:
            key, _, value = line.partition("=")
            headers[key.strip()] = value.strip()
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise ValueError(f"descriptor line {lineno}: expected op,t,c,n,s, got {line!r}")
        op, t, c, n, s = parts
        rows.append(Row(op, None if t == "-" else int(t), int(c), int(n), int(s)))
    for key in ("input", "variant", "nonlinearity"):
        if key not in headers:
            raise ValueError(f"descriptor missing {key}= header")
    h, _, w = headers["input"].partition("x")
    arch = ArchSpec(
        input_hw=(int(h), int(w)),
        rows=tuple(rows),
        nonlinearity=headers["nonlinearity"],
        variant=headers["variant"],
        bn_on_linear=bool(int(headers.get("bn_on_linear", "1"))),
        input_channels=int(headers.get("channels", "3")),
    )
    folded = headers.get("form", "train") == "folded"
    return arch, folded
