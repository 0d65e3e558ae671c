"""Margin-softmax training at toy scale: the angular-margin head, momentum
SGD with split weight decay, the published LR staircase, synthetic identity
data, and the finite-difference gradient harness.

The published schedule (batch 512, lr 0.1 dropped at 36K/52K/58K of 60K
iterations, decay 4e-5 generally and 4e-4 on the layers after the global
operator) is the config default; desk_config() compresses it to a run that
finishes on a laptop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Model, walk_leaves
from .pipeline import normalize_pixels
from .tensor import Rng, ShapeError


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    momentum: float = 0.9
    base_lr: float = 0.1
    lr_drop_iters: tuple[int, ...] = (36000, 52000, 58000)
    total_iters: int = 60000
    weight_decay_general: float = 4e-5
    weight_decay_post_global: float = 4e-4
    # The stronger decay covers layers strictly after the global operator;
    # flip this to include the global kernel itself in that group.
    decay_global_op_as_post: bool = False
    arcface_scale: float = 64.0
    arcface_margin: float = 0.5
    seed: int = 0

    def __post_init__(self):
        drops = tuple(self.lr_drop_iters)
        if list(drops) != sorted(set(drops)) or (drops and drops[-1] >= self.total_iters):
            raise ValueError("lr drops must be strictly increasing and below total_iters")


def desk_config(seed: int = 7) -> TrainConfig:
    """The 60K-iteration schedule compressed 30x for desk-scale runs."""
    return TrainConfig(
        batch_size=16,
        lr_drop_iters=(1200, 1733, 1933),
        total_iters=2000,
        seed=seed,
    )


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Piecewise-constant staircase: base_lr divided by 10 at each drop."""
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    lr = cfg.base_lr
    for drop in cfg.lr_drop_iters:
        if iteration >= drop:
            lr /= 10.0
    return lr


# ---------------------------------------------------------------------------
# angular-margin head

COS_CLAMP = 1e-7


class ArcFaceHead:
    """Class-weight matrix compared against embeddings on the unit sphere."""

    def __init__(
        self,
        num_classes: int,
        embedding_dim: int,
        scale: float = 64.0,
        margin: float = 0.5,
        rng: Rng | int = 0,
        dtype=np.float32,
    ):
        if not isinstance(rng, Rng):
            rng = Rng(rng)
        std = float(np.sqrt(2.0 / embedding_dim))
        self.weight = rng.normal((num_classes, embedding_dim), 0.0, std, dtype)
        self.scale = float(scale)
        self.margin = float(margin)
        self.dweight = None

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


def arcface_loss(embeddings: np.ndarray, labels: np.ndarray, head: ArcFaceHead):
    """Additive angular-margin cross entropy.

    Logits are scale * cos(theta) against L2-normalized class weights, with
    the target logit replaced by scale * cos(theta + margin). The target
    cosine is clamped away from +-1 before the angle shift because its
    derivative is singular there. Returns (loss, d_embeddings, d_weight);
    d_weight is also stored on the head.
    """
    labels = np.asarray(labels)
    b, dim = embeddings.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != batch ({b},)")
    if labels.min() < 0 or labels.max() >= head.num_classes:
        raise ValueError(f"label out of range [0, {head.num_classes})")
    if not np.isfinite(embeddings).all():
        raise ValueError("non-finite embedding")

    s, m = head.scale, head.margin
    rx = np.linalg.norm(embeddings, axis=1, keepdims=True)
    if (rx == 0).any():
        raise ValueError("zero-norm embedding")
    e = embeddings / rx
    rw = np.linalg.norm(head.weight, axis=1, keepdims=True)
    if (rw == 0).any():
        raise ValueError("zero-norm class weight")
    wn = head.weight / rw

    cos = e @ wn.T
    rows = np.arange(b)
    cos_y_raw = cos[rows, labels]
    cos_y = np.clip(cos_y_raw, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    sin_y = np.sqrt(1.0 - cos_y * cos_y)
    phi = cos_y * np.cos(m) - sin_y * np.sin(m)

    logits = s * cos
    logits[rows, labels] = s * phi
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    prob = expz / expz.sum(axis=1, keepdims=True)
    loss = float(-np.mean(shifted[rows, labels] - np.log(expz.sum(axis=1))))

    dlogits = prob.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= b
    dcos = s * dlogits
    inside = np.abs(cos_y_raw) < 1.0 - COS_CLAMP
    dphi_dcos = np.cos(m) + np.sin(m) * cos_y / sin_y
    dcos[rows, labels] = s * dlogits[rows, labels] * dphi_dcos * inside

    de = dcos @ wn
    dwn = dcos.T @ e
    demb = (de - e * (de * e).sum(axis=1, keepdims=True)) / rx
    dweight = (dwn - wn * (dwn * wn).sum(axis=1, keepdims=True)) / rw
    head.dweight = dweight.astype(head.weight.dtype)
    return loss, demb.astype(embeddings.dtype), head.dweight


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float, weight_decay: float):
    """One in-place momentum update: v = mu*v + g + wd*p; p -= lr*v."""
    if grad.shape != param.shape or velocity.shape != param.shape:
        raise ShapeError(f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


class SGD:
    def __init__(self, params: list[np.ndarray], weight_decays: list[float], momentum: float = 0.9):
        if len(params) != len(weight_decays):
            raise ValueError("one weight decay per parameter required")
        self.params = params
        self.weight_decays = list(weight_decays)
        self.momentum = momentum
        self.velocities = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], lr: float):
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        for p, g, v, wd in zip(self.params, grads, self.velocities, self.weight_decays):
            sgd_step(p, g, v, lr, self.momentum, wd)


def decay_groups(model: Model, head: ArcFaceHead, cfg: TrainConfig):
    """Assign each parameter its decay from position.

    Layers strictly after the global-operator row (plus the margin head) get
    the post-global decay; the global kernel and its own BN keep the general
    decay unless decay_global_op_as_post pulls that row into the group too.
    """
    from .layers import BatchNorm2d

    gidx = model.global_op_index
    boundary = gidx
    if 0 <= gidx and gidx + 1 < len(model.layers) and isinstance(model.layers[gidx + 1], BatchNorm2d):
        boundary = gidx + 1  # the global op's own BN belongs to its row
    names, params, decays = [], [], []
    for idx, layer in enumerate(model.layers):
        post = idx > boundary or (gidx <= idx <= boundary and cfg.decay_global_op_as_post)
        wd = cfg.weight_decay_post_global if post else cfg.weight_decay_general
        for lname, leaf in walk_leaves([layer]):
            for pname, arr in leaf.named_params():
                names.append(f"{lname}.{pname}")
                params.append(arr)
                decays.append(wd)
    names.append("head.weight")
    params.append(head.weight)
    decays.append(cfg.weight_decay_post_global)
    return names, params, decays


# ---------------------------------------------------------------------------
# synthetic identities


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, 3, H, W) raw pixel values in [0, 255]
    labels: np.ndarray  # (N,) class indices
    num_classes: int


def gen_toy_dataset(
    num_ids: int,
    samples_per_id: int,
    hw: tuple[int, int] = (96, 96),
    noise_std: float = 8.0,
    rng: Rng | int = 0,
) -> ToyDataset:
    """Deterministic synthetic identities: each class is a seeded
    low-frequency wave pattern, each sample that template plus pixel noise."""
    if num_ids < 2:
        raise ValueError("need at least 2 identities")
    if samples_per_id < 2:
        raise ValueError("verification pairs need at least 2 samples per identity")
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    h, w = hw
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    images = np.empty((num_ids * samples_per_id, 3, h, w), dtype=np.float32)
    labels = np.empty(num_ids * samples_per_id, dtype=np.int64)
    for k in range(num_ids):
        tmpl_rng = rng.spawn(k)
        template = np.empty((3, h, w), dtype=np.float32)
        for c in range(3):
            amp = tmpl_rng.uniform((4,), 15.0, 40.0, np.float64)
            fy = tmpl_rng.uniform((4,), 0.5, 3.5, np.float64)
            fx = tmpl_rng.uniform((4,), 0.5, 3.5, np.float64)
            phase = tmpl_rng.uniform((4,), 0.0, 2 * np.pi, np.float64)
            chan = 127.5 + sum(
                amp[i] * np.cos(2 * np.pi * (fy[i] * yy + fx[i] * xx) + phase[i]) for i in range(4)
            )
            template[c] = chan.astype(np.float32)
        noise_rng = rng.spawn(100000 + k)
        for j in range(samples_per_id):
            idx = k * samples_per_id + j
            noise = noise_rng.normal((3, h, w), 0.0, noise_std) if noise_std > 0 else 0.0
            images[idx] = np.clip(template + noise, 0.0, 255.0)
            labels[idx] = k
    return ToyDataset(images, labels, num_ids)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    entries: list[tuple[int, float, float]] = field(default_factory=list)  # iter, lr, loss

    def losses(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries])

    def smoothed_loss(self, iteration: int, window: int = 100) -> float:
        losses = self.losses()
        lo = max(0, iteration - window + 1)
        return float(losses[lo : iteration + 1].mean())

    def to_csv(self) -> str:
        lines = ["iter,lr,loss"]
        lines += [f"{i},{lr!r},{loss!r}" for i, lr, loss in self.entries]
        return "\n".join(lines) + "\n"


def train_loop(model: Model, head: ArcFaceHead, dataset: ToyDataset, cfg: TrainConfig, progress=None) -> TrainLog:
    """Run the schedule: preprocess, forward, margin loss, backward, SGD.

    Batches are sequential slices of a freshly seeded shuffle each epoch,
    so two runs from the same seed produce bit-identical logs and weights.
    Aborts with a diagnostic if the loss goes non-finite.
    """
    if dataset.num_classes != head.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, head {head.num_classes}")
    if model.folded:
        raise ValueError("folded models are inference-only")
    names, params, decays = decay_groups(model, head, cfg)
    opt = SGD(params, decays, cfg.momentum)
    shuffle_rng = Rng(cfg.seed).spawn(1)
    n = len(dataset.labels)
    order = shuffle_rng.permutation(n)
    cursor = 0
    log = TrainLog()
    for it in range(cfg.total_iters):
        if cursor + cfg.batch_size > n:
            order = shuffle_rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size

        x = normalize_pixels(dataset.images[idx])
        out = model.forward(x, train=True)
        emb = out.reshape(out.shape[0], -1)
        loss, demb, _ = arcface_loss(emb, dataset.labels[idx], head)
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged: loss {loss} at iteration {it}")
        model.backward(demb.reshape(out.shape))

        grads = [g for _, g in model.param_grads()]
        grads.append(head.dweight)
        lr = lr_at(it, cfg)
        opt.step(grads, lr)
        log.entries.append((it, lr, loss))
        if progress is not None:
            progress(it, lr, loss)
    return log


def classification_accuracy(model: Model, head: ArcFaceHead, dataset: ToyDataset, batch_size: int = 64) -> float:
    """Fraction of samples whose nearest class weight (by cosine) is their label."""
    wn = head.weight / np.linalg.norm(head.weight, axis=1, keepdims=True)
    hits = 0
    for start in range(0, len(dataset.labels), batch_size):
        x = normalize_pixels(dataset.images[start : start + batch_size])
        emb = model.embed_forward(x)
        e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        pred = (e @ wn.T).argmax(axis=1)
        hits += int((pred == dataset.labels[start : start + batch_size]).sum())
    return hits / len(dataset.labels)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    tolerance: float
    num_checked: int
    max_rel_err: float
    worst_param: str
    per_tensor: dict[str, float]

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err) and self.max_rel_err < self.tolerance

    def to_text(self) -> str:
        lines = [
            f"checked {self.num_checked} parameters, tolerance {self.tolerance:g}",
            f"max relative error {self.max_rel_err:.3e} at {self.worst_param}",
            f"result: {'PASS' if self.passed else 'FAIL'}",
        ]
        return "\n".join(lines) + "\n"


def grad_check_model(
    model: Model,
    head: ArcFaceHead,
    images: np.ndarray,
    labels: np.ndarray,
    tolerance: float = 1e-4,
    num_samples: int = 200,
    rng: Rng | int = 0,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic loss gradients against central finite differences.

    Samples entries from every parameter tensor (so every layer kind is
    covered). A deep piecewise-linear net's loss has dense derivative kinks
    whose finite-difference noise shrinks with the step, while roundoff
    grows as the step shrinks, so each sample is accepted at the best of
    the steps h, h/10, h/100, h/1000; a wrong backward stays wrong at every
    step. Magnitudes below 1e-4 are compared absolutely. Model and head
    must be float64.
    """
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    named = model.named_params() + [("head.weight", head.weight)]
    for name, arr in named:
        if arr.dtype != np.float64:
            raise ValueError(f"gradient checks need a float64 model, {name} is {arr.dtype}")
    x = normalize_pixels(images).astype(np.float64)

    def loss_of() -> float:
        out = model.forward(x, train=True)
        loss, _, _ = arcface_loss(out.reshape(out.shape[0], -1), labels, head)
        return loss

    out = model.forward(x, train=True)
    loss, demb, dhead = arcface_loss(out.reshape(out.shape[0], -1), labels, head)
    model.backward(demb.reshape(out.shape))
    grads = dict(model.param_grads())
    grads["head.weight"] = dhead

    def rel_at(flat, i, analytic, step) -> float:
        orig = flat[i]
        flat[i] = orig + step
        lp = loss_of()
        flat[i] = orig - step
        lm = loss_of()
        flat[i] = orig
        numeric = (lp - lm) / (2 * step)
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)

    per_tensor: dict[str, float] = {}
    worst = (0.0, "none")
    checked = 0
    k_each = -(-num_samples // len(named))  # ceil: sampling spans every tensor
    for name, arr in named:
        gflat = grads[name].reshape(-1)
        flat = arr.reshape(-1)
        picks = rng.spawn(checked).integers(0, flat.size, size=min(k_each, flat.size))
        tensor_worst = 0.0
        for i in np.unique(picks):
            rel = rel_at(flat, i, gflat[i], h)
            step = h
            while rel >= tolerance and step > h / 1000:
                step /= 10
                rel = min(rel, rel_at(flat, i, gflat[i], step))
            tensor_worst = max(tensor_worst, rel)
            checked += 1
        per_tensor[name] = tensor_worst
        if tensor_worst > worst[0]:
            worst = (tensor_worst, name)
    return GradCheckReport(tolerance, checked, worst[0], worst[1], per_tensor)


# ---------------------------------------------------------------------------
# flat key=value config files


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
