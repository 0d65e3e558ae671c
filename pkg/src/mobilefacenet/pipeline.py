"""Deployment path: preprocessing, BN folding, model files, embeddings,
similarity and the verification metrics.

Model file layout (all integers little-endian):

    magic "MFN1" | u32 version | u32 desc_len | descriptor text |
    u32 tensor_count | per tensor: u16 name_len, name, u8 dtype (0 = f32),
    u8 rank, u32 dims[rank], raw little-endian float data

The descriptor is the architecture text format plus a ``form=`` header
recording whether the stored tensors are the training network or its
BN-folded deployment form.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchSpec, build_model, format_descriptor, parse_descriptor
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

MAGIC = b"MFN1"
FORMAT_VERSION = 1
RAW_MAGIC = b"MFT1"


class ModelFormatError(ValueError):
    """Model or image container violates its file format."""


class BadMagicError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


# ---------------------------------------------------------------------------
# preprocessing


def normalize_pixels(x: np.ndarray) -> np.ndarray:
    """Map 8-bit pixel values to the network input range: (v - 127.5) / 128."""
    return ((np.asarray(x, dtype=np.float32) - np.float32(127.5)) / np.float32(128.0)).astype(
        np.float32
    )


def preprocess(image: np.ndarray, expected_hw: tuple[int, int] | None = None) -> np.ndarray:
    """(H, W, 3) pixels in [0, 255] to a normalized 1x3xHxW tensor.

    Inputs are assumed already face-aligned at the model resolution; a
    mismatched size is an error, never an implicit resize.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got {image.shape}")
    if expected_hw is not None and tuple(image.shape[:2]) != tuple(expected_hw):
        raise ShapeError(f"image is {image.shape[:2]}, model expects {tuple(expected_hw)}")
    return normalize_pixels(image).transpose(2, 0, 1)[None]


# ---------------------------------------------------------------------------
# batch-norm folding


def _fold_into(layer, bn: BatchNorm2d):
    p = bn.p
    scale = (p.gamma / np.sqrt(p.running_var + p.eps)).astype(layer.p.weight.dtype)
    weight = layer.p.weight * scale[:, None, None, None]
    bias = p.beta - p.running_mean * scale
    if layer.p.bias is not None:
        bias = bias + scale * layer.p.bias
    bias = bias.astype(layer.p.weight.dtype)
    new_p = dataclasses.replace(layer.p, weight=weight, bias=bias)
    return type(layer)(new_p, layer.name)


def _copy_layer(layer):
    if isinstance(layer, (Conv2d, DepthwiseConv2d, GDConv)):
        p = dataclasses.replace(
            layer.p,
            weight=layer.p.weight.copy(),
            bias=None if layer.p.bias is None else layer.p.bias.copy(),
        )
        return type(layer)(p, layer.name)
    if isinstance(layer, PReLU):
        return PReLU(dataclasses.replace(layer.p, slope=layer.p.slope.copy()), layer.name)
    if isinstance(layer, ReLU):
        return ReLU(layer.name)
    if isinstance(layer, GlobalAvgPool):
        return GlobalAvgPool(layer.name)
    if isinstance(layer, FCHead):
        return FCHead(layer.weight.copy(), layer.name)
    raise ValueError(f"cannot copy layer of type {type(layer).__name__}")


def _fold_sequence(layers):
    out = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if isinstance(layer, Residual):
            out.append(Residual(_fold_sequence(layer.body), layer.name))
            i += 1
        elif isinstance(layer, (Conv2d, DepthwiseConv2d, GDConv)) and isinstance(nxt, BatchNorm2d):
            out.append(_fold_into(layer, nxt))
            i += 2
        elif isinstance(layer, BatchNorm2d):
            raise ValueError(f"{layer.name}: batch norm does not follow a foldable linear layer")
        else:
            out.append(_copy_layer(layer))
            i += 1
    return out


def fold_batchnorm(model: Model) -> Model:
    """Absorb every (conv, BN) pair into a single biased conv.

    Returns a new inference-only model; the input model is untouched. The
    folded weights are W * gamma / sqrt(var + eps) per output channel with
    bias beta - gamma * mean / sqrt(var + eps), plus any pre-existing bias
    scaled the same way.
    """
    layers = _fold_sequence(model.layers)
    gidx = -1
    for k, layer in enumerate(layers):
        if isinstance(layer, (GDConv, GlobalAvgPool, FCHead)):
            gidx = k
            break
    return Model(layers, model.arch, gidx, folded=True)


def calibrate_batchnorm(model: Model, x: np.ndarray):
    """Set every BN's running statistics to the batch statistics of x.

    Freshly initialized running stats rarely match real activations, which
    makes eval-mode magnitudes drift layer by layer; one calibration batch
    puts the model in the regime a trained network deploys in.
    """
    bns = [layer for _, layer in model.leaves() if isinstance(layer, BatchNorm2d)]
    saved = [bn.p.momentum for bn in bns]
    for bn in bns:
        bn.p.momentum = 0.0
    try:
        model.forward(x, train=True)
    finally:
        for bn, mom in zip(bns, saved):
            bn.p.momentum = mom


# ---------------------------------------------------------------------------
# serialization


def _all_tensors(model: Model):
    return model.named_params() + model.named_buffers()


def save_model(model: Model, path: str):
    """Write the model file; parameters round-trip bit-exactly."""
    tensors = _all_tensors(model)
    for name, arr in tensors:
        if arr.dtype != np.float32:
            raise ValueError(f"only float32 models serialize, {name} is {arr.dtype}")
    desc = format_descriptor(model.arch, folded=model.folded).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", 0, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str, what: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]


def load_model(path: str) -> Model:
    """Read a model file back into a Model with identical parameters."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a model file (bad magic)")
    version = r.u("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    desc_len = r.u("<I", "descriptor length")
    arch, folded = parse_descriptor(r.take(desc_len, "descriptor").decode())
    count = r.u("<I", "tensor count")
    stored: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode()
        dtype_code = r.u("<B", "dtype code")
        if dtype_code != 0:
            raise ModelFormatError(f"{path}: unknown dtype code {dtype_code}")
        rank = r.u("<B", "rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n, f"tensor data for {name}")
        stored[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)

    model = build_model(arch, Rng(0))
    if folded:
        model = fold_batchnorm(model)
    expected = _all_tensors(model)
    missing = [n for n, _ in expected if n not in stored]
    extra = set(stored) - {n for n, _ in expected}
    if missing or extra:
        raise ModelFormatError(f"{path}: tensor set mismatch (missing {missing}, extra {sorted(extra)})")
    for name, arr in expected:
        if stored[name].shape != arr.shape:
            raise ModelFormatError(
                f"{path}: tensor {name} has shape {stored[name].shape}, expected {arr.shape}"
            )
        arr[...] = stored[name]
    return model


# ---------------------------------------------------------------------------
# embeddings and similarity


def l2_normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero-norm embedding")
    return (v / n).astype(v.dtype)


def embed(model: Model, image: np.ndarray, normalize: bool = False) -> np.ndarray:
    """Preprocess, run the network and return the flat feature vector."""
    x = preprocess(image, expected_hw=model.arch.input_hw)
    vec = model.embed_forward(x)[0]
    return l2_normalize(vec) if normalize else vec


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# verification metrics


@dataclass
class PairList:
    """Ordered (path_a, path_b, same_identity) records, text form one per line."""

    pairs: list[tuple[str, str, bool]] = field(default_factory=list)

    @staticmethod
    def parse(text: str) -> "PairList":
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"pair line {lineno}: expected 'pathA pathB 0|1', got {line!r}")
            pairs.append((parts[0], parts[1], parts[2] == "1"))
        return PairList(pairs)

    def format(self) -> str:
        return "".join(f"{a} {b} {int(s)}\n" for a, b, s in self.pairs)


@dataclass
class EvalReport:
    fold_thresholds: list[float]
    fold_accuracies: list[float]
    mean_accuracy: float
    tars: dict[float, tuple[float, float]] = field(default_factory=dict)  # far -> (tar, thr)

    def to_csv(self) -> str:
        lines = ["fold,threshold,accuracy"]
        for i, (t, a) in enumerate(zip(self.fold_thresholds, self.fold_accuracies)):
            lines.append(f"{i},{t!r},{a!r}")
        lines.append(f"mean,,{self.mean_accuracy!r}")
        for far, (tar, thr) in sorted(self.tars.items()):
            lines.append(f"tar@far={far:g},{thr!r},{tar!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = ["fold  threshold  accuracy"]
        for i, (t, a) in enumerate(zip(self.fold_thresholds, self.fold_accuracies)):
            lines.append(f"{i:>4}  {t:>9.4f}  {a:>8.4f}")
        lines.append(f"mean accuracy: {self.mean_accuracy:.4f}")
        for far, (tar, thr) in sorted(self.tars.items()):
            lines.append(f"TAR@FAR={far:g}: {tar:.4f} (threshold {thr:.4f})")
        return "\n".join(lines) + "\n"


def _fold_slices(n: int, k: int):
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if n % k:
        raise ValueError(f"{n} pairs do not split into {k} equal folds")
    step = n // k
    return [slice(i * step, (i + 1) * step) for i in range(k)]


def _best_threshold(scores: np.ndarray, same: np.ndarray) -> float:
    """Accuracy-maximizing accept-at-or-above threshold; ties pick the lowest.

    Candidates are the observed scores plus +inf (accept nothing), which is
    exhaustive: accuracy is piecewise constant between observed scores.
    """
    cand = np.unique(scores)
    cand = np.append(cand, np.inf)
    acc = ((scores[:, None] >= cand[None, :]) == same[:, None]).mean(axis=0)
    return float(cand[int(np.argmax(acc))])


def evaluate_kfold(scores, same, num_folds: int = 10) -> EvalReport:
    """Protocol accuracy: per held-out fold, apply the threshold tuned on the
    remaining folds; report per-fold and mean accuracy."""
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if scores.shape != same.shape or scores.ndim != 1:
        raise ShapeError("scores and labels must be equal-length vectors")
    slices = _fold_slices(len(scores), num_folds)
    mask = np.zeros(len(scores), dtype=bool)
    thresholds, accs = [], []
    for sl in slices:
        fold_same = same[sl]
        if not (fold_same.any() and (~fold_same).any()):
            raise ValueError("every fold needs both genuine and impostor pairs")
    for sl in slices:
        mask[:] = True
        mask[sl] = False
        t = _best_threshold(scores[mask], same[mask])
        acc = float(((scores[sl] >= t) == same[sl]).mean())
        thresholds.append(t)
        accs.append(acc)
    return EvalReport(thresholds, accs, float(np.mean(accs)))


def tar_at_far(genuine, impostor, far: float) -> tuple[float, float]:
    """True-accept rate at the lowest threshold keeping the false-accept
    rate at or below ``far``.

    The threshold is the minimum over observed scores (union of both sets,
    plus +inf) satisfying fraction(impostor >= t) <= far. Below 1/|impostor|
    the threshold must clear the highest impostor score, accepting no
    impostors at all.
    """
    genuine = np.asarray(genuine, dtype=np.float64).ravel()
    impostor = np.asarray(impostor, dtype=np.float64).ravel()
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("both score sets must be non-empty")
    if not 0.0 < far <= 1.0:
        raise ValueError(f"far must be in (0, 1], got {far}")
    cand = np.unique(np.concatenate([genuine, impostor]))
    cand = np.append(cand, np.inf)
    imp_sorted = np.sort(impostor)
    frac_imp = (impostor.size - np.searchsorted(imp_sorted, cand, side="left")) / impostor.size
    frac_imp[-1] = 0.0
    feasible = np.nonzero(frac_imp <= far)[0]
    thr = float(cand[feasible[0]])
    tar = float((genuine >= thr).mean()) if np.isfinite(thr) else 0.0
    return tar, thr


# ---------------------------------------------------------------------------
# image containers


def read_ppm(path: str) -> np.ndarray:
    """Binary (P6) portable pixmap to an (H, W, 3) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise ModelFormatError(f"{path}: truncated ppm header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise BadMagicError(f"{path}: not a binary ppm (P6)")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ModelFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    raw = data[pos : pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise TruncatedError(f"{path}: truncated ppm pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path: str, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.clip(np.round(image), 0, 255).astype(np.uint8).tobytes())


def write_raw_tensor(path: str, arr: np.ndarray):
    """Minimal raw container: magic, u8 rank, u32 dims, little-endian f32."""
    arr = np.asarray(arr, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_raw_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4, "magic") != RAW_MAGIC:
        raise BadMagicError(f"{path}: not a raw tensor container")
    rank = r.u("<B", "rank")
    dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
    n = int(np.prod(dims))
    raw = r.take(4 * n, "tensor data")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def read_image(path: str) -> np.ndarray:
    """Load a ppm or raw-tensor image as (H, W, 3) float32 pixels in [0, 255]."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head[:2] == b"P6":
        return read_ppm(path).astype(np.float32)
    if head == RAW_MAGIC:
        arr = read_raw_tensor(path)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"{path}: expected an HxWx3 raw image, got {arr.shape}")
        return arr
    raise BadMagicError(f"{path}: unrecognized image container")
