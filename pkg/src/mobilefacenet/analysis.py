"""Static and empirical network analyses: parameter and multiply-add
accounting, theoretical receptive-field geometry, empirical receptive-field
maps via backprop, and the spatial-importance map of a global depthwise
kernel.

Parameter counting supports two documented forms:

* ``train``: every learnable tensor of the training-time network (conv and
  fc weights, BN gamma/beta, activation slopes, global kernels); BN running
  statistics are never counted.
* ``deploy``: the network after BN folding, i.e. conv weights plus the
  per-channel biases the folds leave behind. This is the form whose float
  count times four bytes gives the shipped model size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .arch import ArchSpec, LeafPlan, plan
from .layers import GDConv, Model
from .tensor import Rng, ShapeError, rand_normal

PARAM_FORMS = ("train", "deploy")


@dataclass
class CostRow:
    name: str
    params: int
    madds: int


@dataclass
class CostReport:
    rows: list[CostRow]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_madds(self) -> int:
        return sum(r.madds for r in self.rows)

    def to_csv(self) -> str:
        lines = ["layer,params,madds"]
        lines += [f"{r.name},{r.params},{r.madds}" for r in self.rows]
        lines.append(f"total,{self.total_params},{self.total_madds}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'madds':>14}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>12}  {r.madds:>14}")
        lines.append(
            f"{'total':<{width}}  {self.total_params:>12}  {self.total_madds:>14}"
            f"  ({self.total_params / 1e6:.2f}M params, {self.total_madds / 1e6:.1f}M MAdds)"
        )
        return "\n".join(lines) + "\n"


def _leaf_params(leaf: LeafPlan, form: str) -> int:
    if leaf.kind == "conv":
        return leaf.cin * leaf.cout * leaf.kernel[0] * leaf.kernel[1]
    if leaf.kind in ("dw", "gd"):
        return leaf.cout * leaf.kernel[0] * leaf.kernel[1]
    if leaf.kind == "fc":
        return leaf.cin * leaf.cout
    if leaf.kind == "bn":
        return 2 * leaf.cout if form == "train" else leaf.cout
    if leaf.kind == "prelu":
        return leaf.cout
    return 0


def _leaf_madds(leaf: LeafPlan) -> int:
    oh, ow = leaf.out_hw
    if leaf.kind == "conv":
        return leaf.kernel[0] * leaf.kernel[1] * leaf.cin * leaf.cout * oh * ow
    if leaf.kind in ("dw", "gd"):
        return leaf.kernel[0] * leaf.kernel[1] * leaf.cout * oh * ow
    if leaf.kind == "fc":
        return leaf.cin * leaf.cout
    return 0  # BN folds away at deploy; activations and residual adds excluded


def _structural_rows(arch: ArchSpec, form: str) -> list[CostRow]:
    rows: list[CostRow] = []
    for seg in plan(arch):
        for leaf in seg.leaves:
            n = _leaf_params(leaf, form)
            m = _leaf_madds(leaf)
            if form == "deploy" and leaf.kind == "bn":
                # the fold leaves one bias on the preceding linear layer
                prev = rows[-1]
                rows[-1] = CostRow(prev.name, prev.params + leaf.cout, prev.madds)
                continue
            if n or m:
                rows.append(CostRow(leaf.name, n, m))
    return rows


def cost_report(target: ArchSpec | Model, form: str = "deploy") -> CostReport:
    """Combined per-layer parameter and MAdds accounting."""
    if form not in PARAM_FORMS:
        raise ValueError(f"form must be one of {PARAM_FORMS}")
    arch = target.arch if isinstance(target, Model) else target
    return CostReport(_structural_rows(arch, form))


def count_params(target: ArchSpec | Model, form: str = "train") -> CostReport:
    """Per-layer and total learnable-parameter counts.

    For an ArchSpec the count is structural in the requested form. For a
    Model the tensors that actually exist are enumerated (a folded model is
    already in deploy form); running statistics are never included.
    """
    if form not in PARAM_FORMS:
        raise ValueError(f"form must be one of {PARAM_FORMS}")
    if isinstance(target, Model):
        rows = []
        for lname, layer in target.leaves():
            n = sum(arr.size for _, arr in layer.named_params())
            if n:
                rows.append(CostRow(lname, int(n), 0))
        return CostReport(rows)
    rows = [CostRow(r.name, r.params, 0) for r in _structural_rows(target, form) if r.params]
    return CostReport(rows)


def count_madds(target: ArchSpec | Model) -> CostReport:
    """Multiply-accumulate counts per layer; one MAdd per multiply-add.

    Standard conv kh*kw*cin*cout*out_h*out_w, depthwise kh*kw*c*out_h*out_w,
    global depthwise W*H*M, fully connected in*out. BN, activations and
    residual adds are excluded by convention. The input resolution comes
    from the architecture itself.
    """
    arch = target.arch if isinstance(target, Model) else target
    rows = [r for r in _structural_rows(arch, "train") if r.madds]
    return CostReport(rows)


# ---------------------------------------------------------------------------
# receptive fields


@dataclass
class RFEntry:
    name: str
    kind: str
    rf: tuple[int, int]  # receptive-field extent (h, w) in input pixels
    jump: tuple[int, int]  # input pixels per unit step
    offset: tuple[float, float]  # input-space center of unit (0, 0)

    def unit_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.offset[0] + i * self.jump[0], self.offset[1] + j * self.jump[1])


@dataclass
class RFReport:
    entries: list[RFEntry]

    @property
    def fmap_end(self) -> RFEntry:
        """Entry for the last non-global layer (the map the global op reads)."""
        for i, e in enumerate(self.entries):
            if e.kind in ("gd", "gapool", "fc"):
                return self.entries[i - 1]
        return self.entries[-1]

    def to_csv(self) -> str:
        lines = ["layer,rf_h,rf_w,jump_h,jump_w,offset_h,offset_w"]
        for e in self.entries:
            lines.append(
                f"{e.name},{e.rf[0]},{e.rf[1]},{e.jump[0]},{e.jump[1]},{e.offset[0]},{e.offset[1]}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max(len(e.name) for e in self.entries)
        lines = [f"{'layer':<{width}}  {'rf':>9}  {'jump':>7}  {'offset':>12}"]
        for e in self.entries:
            lines.append(
                f"{e.name:<{width}}  {e.rf[0]:>4}x{e.rf[1]:<4}  {e.jump[0]:>3}x{e.jump[1]:<3}"
                f"  {e.offset[0]:>5.1f},{e.offset[1]:>5.1f}"
            )
        return "\n".join(lines) + "\n"


def receptive_field(arch: ArchSpec) -> RFReport:
    """Theoretical receptive-field geometry via the standard recurrence.

    rf' = rf + (k - 1) * jump, jump' = jump * stride,
    offset' = offset + ((k - 1) / 2 - pad) * jump, tracked per axis.
    Pointwise layers (BN, activations, 1x1 strides-1 convs) change nothing
    but 1x1 convs are still listed; the global operator enters as a
    full-size kernel, so the entry before it describes the final feature map.
    """
    rf = [1, 1]
    jump = [1, 1]
    offset = [0.0, 0.0]
    entries = []
    for seg in plan(arch):
        for leaf in seg.leaves:
            if leaf.kind in ("bn", "prelu", "relu"):
                continue
            if leaf.kind in ("gapool", "fc"):
                k = leaf.in_hw
                stride, pad = (1, 1), (0, 0)
            else:
                k = leaf.kernel
                stride, pad = leaf.stride, leaf.padding
            for ax in range(2):
                rf[ax] = rf[ax] + (k[ax] - 1) * jump[ax]
                offset[ax] = offset[ax] + ((k[ax] - 1) / 2.0 - pad[ax]) * jump[ax]
                jump[ax] = jump[ax] * stride[ax]
            entries.append(
                RFEntry(leaf.name, leaf.kind, (rf[0], rf[1]), (jump[0], jump[1]), (offset[0], offset[1]))
            )
    return RFReport(entries)


# ---------------------------------------------------------------------------
# empirical analyses


def erf_map(
    model: Model,
    unit: tuple[int, int, int],
    x: np.ndarray | None = None,
    rng: Rng | None = None,
    n_inputs: int = 1,
) -> np.ndarray:
    """Empirical receptive field of one final-feature-map unit.

    Backpropagates a one-hot upstream gradient at unit (channel, i, j) of
    the map feeding the global operator and returns the absolute input
    gradient summed over input channels, optionally averaged over several
    seeded random inputs.
    """
    if model.global_op_index < 0:
        raise ValueError("model has no global operator")
    gidx = model.global_op_index
    h, w = model.arch.input_hw
    if x is None and rng is None:
        raise ValueError("provide an input tensor or an rng")
    acc = np.zeros((h, w), dtype=np.float64)
    runs = 1 if x is not None else n_inputs
    for k in range(runs):
        xk = x if x is not None else rand_normal((1, 3, h, w), 0.0, 1.0, rng.spawn(k))
        fmap = model.forward_prefix(xk, gidx)
        c, i, j = unit
        if not (0 <= c < fmap.shape[1] and 0 <= i < fmap.shape[2] and 0 <= j < fmap.shape[3]):
            raise ShapeError(f"unit {unit} out of range for feature map {fmap.shape[1:]}")
        onehot = np.zeros_like(fmap)
        onehot[0, c, i, j] = 1.0
        dx = model.backward_prefix(onehot, gidx)
        acc += np.abs(dx[0]).sum(axis=0)
    return acc / runs


def importance_map(source) -> np.ndarray:
    """Spatial importance of a global depthwise kernel.

    value(i, j) is the Euclidean norm across channels of the kernel entries
    at spatial position (i, j).
    """
    if isinstance(source, Model):
        gd = [l for _, l in source.leaves() if isinstance(l, GDConv)]
        if not gd:
            raise ValueError("model has no global depthwise layer")
        kernel = gd[0].p.weight
    elif isinstance(source, GDConv):
        kernel = source.p.weight
    elif isinstance(source, ops.GDConvParams):
        kernel = source.weight
    else:
        kernel = np.asarray(source)
    k = kernel[:, 0] if kernel.ndim == 4 else kernel
    return np.sqrt((k.astype(np.float64) ** 2).sum(axis=0))


def map_to_csv(grid: np.ndarray) -> str:
    lines = ["i,j,value"]
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            lines.append(f"{i},{j},{float(grid[i, j])!r}")
    return "\n".join(lines) + "\n"
