"""Acceptance criteria for the engine, one test per criterion (split per
variant where a criterion enumerates variants). Each test prints a
``[acceptance] criterion N ...: PASS|FAIL`` line.

Three parameter sub-criteria (m, relu, expand2) and their all-five summary
fail by design: no documented counting configuration rounds to the published
values for those variants (deploy-form counts truncated, not rounded, match
them; doubling every expansion factor cannot reach 1.1M at all). The
README's "Parameter accounting" section carries the full analysis.
"""

import time

import numpy as np
import pytest

from mobilefacenet import ops
from mobilefacenet.analysis import cost_report, count_params, erf_map, receptive_field
from mobilefacenet.arch import build_head_variant, build_mobilefacenet, make_arch, shape_propagate
from mobilefacenet.pipeline import (
    calibrate_batchnorm,
    evaluate_kfold,
    fold_batchnorm,
    save_model,
    tar_at_far,
)
from mobilefacenet.tensor import Rng
from mobilefacenet.training import (
    ArcFaceHead,
    arcface_loss,
    classification_accuracy,
    desk_config,
    gen_toy_dataset,
    grad_check_model,
    train_loop,
)

VARIANTS = ("primary", "m", "s", "relu", "expand2")
# published parameter counts and their rounding precision
PARAM_TARGETS = {
    "primary": (0.99, 0.01),
    "m": (0.92, 0.01),
    "s": (0.84, 0.01),
    "relu": (0.98, 0.01),
    "expand2": (1.1, 0.1),
}
# documented analyzer configurations: counting form x BN-on-linear-layers
CONFIGS = [("deploy", True), ("deploy", False), ("train", True), ("train", False)]


def report(label, ok, detail=""):
    print(f"[acceptance] {label}: {'PASS' if ok else 'FAIL'}{' - ' + detail if detail else ''}")
    return ok


def _rounded(total, prec):
    return round(round(total / 1e6 / prec) * prec, 10)


def _config_totals(variant):
    out = {}
    for form, bol in CONFIGS:
        arch = make_arch(variant, (112, 112), bn_on_linear=bol)
        out[(form, bol)] = count_params(arch, form=form).total_params
    return out


# ---------------------------------------------------------------------------
# criterion 1: parameter counts reproduce the published table


@pytest.mark.parametrize("variant", VARIANTS)
def test_c1_params_round_to_published(variant):
    t0 = time.time()
    target, prec = PARAM_TARGETS[variant]
    totals = _config_totals(variant)
    rounded = {cfg: _rounded(n, prec) for cfg, n in totals.items()}
    ok = any(r == target for r in rounded.values())
    elapsed = time.time() - t0
    detail = f"target {target}M, per-config {[(c, totals[c], rounded[c]) for c in totals]}, {elapsed:.2f}s"
    report(f"criterion 1 [{variant} params]", ok, detail)
    assert elapsed < 1.0
    assert ok, (
        f"{variant}: no documented configuration rounds to {target}M; totals {totals} "
        f"(deploy counts truncate to the published value for primary/m/s/relu; see README)"
    )


def test_c1_one_configuration_hits_all_five():
    hits = {}
    for form, bol in CONFIGS:
        hits[(form, bol)] = all(
            _rounded(
                count_params(make_arch(v, (112, 112), bn_on_linear=bol), form=form).total_params,
                PARAM_TARGETS[v][1],
            )
            == PARAM_TARGETS[v][0]
            for v in VARIANTS
        )
    ok = any(hits.values())
    report("criterion 1 [one configuration hits all five]", ok, str(hits))
    assert ok, (
        "no (form, bn_on_linear) configuration rounds to all five published values; "
        "best match is deploy-form counting, which truncates (not rounds) to "
        "0.99/0.92/0.84/0.98 and cannot reach 1.1M for doubled expansion factors (README)"
    )


# ---------------------------------------------------------------------------
# criterion 2: multiply-adds


def test_c2_madds():
    t0 = time.time()
    primary = cost_report(make_arch("primary", (112, 112)), "train").total_madds
    ok = abs(primary - 221_000_000) <= 0.05 * 221_000_000

    gd = build_head_variant("gdconv", (1280, 7, 7), 1280, Rng(0))[0]
    gd_params = sum(a.size for _, a in gd.named_params())
    ok &= gd_params == 62_720
    # one multiply-add per kernel entry: W*H*M
    ok &= 7 * 7 * 1280 == 62_720

    fc = build_head_variant("fc", (1280, 7, 7), 128, Rng(0))[0]
    ok &= fc.weight.size == 8_028_160
    elapsed = time.time() - t0
    report("criterion 2 [madds]", ok, f"primary {primary:,} vs 221,000,000; {elapsed:.2f}s")
    assert ok and elapsed < 1.0
    assert primary == 220_965_376  # frozen exact value


# ---------------------------------------------------------------------------
# criterion 3: shape fidelity


def test_c3_shapes():
    table = [
        ("conv3x3", 3, 112, 112),
        ("dwconv3x3", 64, 56, 56),
        ("bottleneck", 64, 56, 56),
        ("bottleneck", 64, 28, 28),
        ("bottleneck", 128, 14, 14),
        ("bottleneck", 128, 14, 14),
        ("bottleneck", 128, 7, 7),
        ("conv1x1", 128, 7, 7),
        ("gdconv", 512, 7, 7),
        ("linconv1x1", 512, 1, 1),
        ("output", 128, 1, 1),
    ]
    ok = shape_propagate(make_arch("primary", (112, 112))) == table
    dims = {v: make_arch(v, (112, 112)).embedding_dim for v in ("primary", "m", "s")}
    ok &= dims == {"primary": 128, "m": 512, "s": 128}
    model96 = build_mobilefacenet("primary", (96, 96), seed=0)
    gd = model96.layers[model96.global_op_index]
    ok &= gd.p.weight.shape[2:] == (6, 6)
    report("criterion 3 [shapes]", ok, f"embedding dims {dims}, 96x96 kernel {gd.p.weight.shape[2:]}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 4: global depthwise semantics


def test_c4_gdconv_oracle():
    rng = Rng(44)
    exact = 0
    for case in range(100):
        c = int(rng.integers(1, 6))
        h = int(rng.integers(1, 9))
        w = int(rng.integers(1, 9))
        n = int(rng.integers(1, 3))
        x = rng.normal((n, c, h, w), dtype=np.float64)
        k = rng.normal((c, 1, h, w), dtype=np.float64)
        got = ops.gdconv_forward(x, ops.GDConvParams(k))
        want = np.zeros((n, c, 1, 1))
        for b in range(n):
            for ch in range(c):
                acc = 0.0
                for i in range(h):
                    for j in range(w):
                        acc += k[ch, 0, i, j] * x[b, ch, i, j]
                want[b, ch, 0, 0] = acc
        exact += int(np.array_equal(got, want))
    uniform_ok = True
    for case in range(10):
        x = rng.normal((2, 4, 7, 7))
        k = np.full((4, 1, 7, 7), 1.0 / 49.0, dtype=np.float32)
        diff = np.abs(ops.gdconv_forward(x, ops.GDConvParams(k)) - ops.gapool_forward(x)).max()
        uniform_ok &= diff < 1e-6
    ok = exact == 100 and uniform_ok
    report("criterion 4 [gdconv semantics]", ok, f"{exact}/100 bit-exact, uniform-kernel ok={uniform_ok}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 5: gradient suite


def _op_fd_sweep():
    """One random 64-bit instance per op kind against central differences."""
    rng = Rng(55)
    worst = 0.0

    def fd(loss_fn, arrays, grads, h=1e-5):
        nonlocal worst
        for arr, g in zip(arrays, grads):
            flat, gf = arr.reshape(-1), g.reshape(-1)
            for i in np.unique(rng.integers(0, flat.size, size=4)):
                o = flat[i]
                flat[i] = o + h
                lp = loss_fn()
                flat[i] = o - h
                lm = loss_fn()
                flat[i] = o
                num = (lp - lm) / (2 * h)
                worst = max(worst, abs(gf[i] - num) / max(abs(gf[i]), abs(num), 1e-4))

    x = rng.normal((2, 3, 6, 6), dtype=np.float64)
    p = ops.ConvParams(rng.normal((4, 3, 3, 3), dtype=np.float64), None, (2, 2), (1, 1))
    up = rng.normal(ops.conv2d_forward(x, p).shape, dtype=np.float64)
    dx, dw, _ = ops.conv2d_backward(x, p, up)
    fd(lambda: float((ops.conv2d_forward(x, p) * up).sum()), [x, p.weight], [dx, dw])

    pd = ops.DepthwiseConvParams(rng.normal((3, 1, 3, 3), dtype=np.float64), None, (1, 1), (1, 1))
    upd = rng.normal(x.shape, dtype=np.float64)
    dxd, dwd, _ = ops.depthwise_conv2d_backward(x, pd, upd)
    fd(lambda: float((ops.depthwise_conv2d_forward(x, pd) * upd).sum()), [x, pd.weight], [dxd, dwd])

    pg = ops.GDConvParams(rng.normal((3, 1, 6, 6), dtype=np.float64))
    upg = rng.normal((2, 3, 1, 1), dtype=np.float64)
    dxg, dwg, _ = ops.gdconv_backward(x, pg, upg)
    fd(lambda: float((ops.gdconv_forward(x, pg) * upg).sum()), [x, pg.weight], [dxg, dwg])

    pb = ops.BatchNormParams(
        rng.uniform((3,), 0.5, 1.5, np.float64),
        rng.normal((3,), 0.0, 0.3, np.float64),
        rng.normal((3,), 0.0, 0.5, np.float64),
        rng.uniform((3,), 0.5, 2.0, np.float64),
    )
    upb = rng.normal(x.shape, dtype=np.float64)
    for train in (True, False):
        _, cache = ops.batchnorm_forward(x, pb, train)
        dxb, dg, db = ops.batchnorm_backward(pb, cache, upb)
        fd(
            lambda: float((ops.batchnorm_forward(x, pb, train)[0] * upb).sum()),
            [x, pb.gamma, pb.beta],
            [dxb, dg, db],
        )

    pp = ops.PReLUParams(rng.uniform((3,), 0.1, 0.4, np.float64))
    dxp, ds = ops.prelu_backward(x, pp, upb)
    fd(lambda: float((ops.prelu_forward(x, pp) * upb).sum()), [x, pp.slope], [dxp, ds])

    wfc = rng.normal((5, 108), dtype=np.float64)
    upf = rng.normal((2, 5, 1, 1), dtype=np.float64)
    dxf, dwf = ops.fc_backward(x, wfc, upf)
    fd(lambda: float((ops.fc_forward(x, wfc) * upf).sum()), [x, wfc], [dxf, dwf])

    upgap = rng.normal((2, 3, 1, 1), dtype=np.float64)
    dxgap = ops.gapool_backward(x.shape, upgap)
    fd(lambda: float((ops.gapool_forward(x) * upgap).sum()), [x], [dxgap])

    head = ArcFaceHead(4, 6, rng=rng.spawn(1), dtype=np.float64)
    emb = rng.normal((5, 6), 0.0, 1.5, np.float64)
    labels = rng.integers(0, 4, size=5)
    _, demb, dwh = arcface_loss(emb, labels, head)
    fd(lambda: arcface_loss(emb, labels, head)[0], [emb, head.weight], [demb, dwh])
    return worst


def test_c5_gradient_suite():
    t0 = time.time()
    op_worst = _op_fd_sweep()
    rng = Rng(56)
    model = build_mobilefacenet("primary", (96, 96), seed=rng.spawn(1), width_divisor=4, dtype=np.float64)
    ds = gen_toy_dataset(4, 2, (96, 96), 8.0, rng.spawn(2))
    head = ArcFaceHead(4, model.arch.embedding_dim, rng=rng.spawn(3), dtype=np.float64)
    rep = grad_check_model(
        model, head, ds.images[:2], ds.labels[:2], tolerance=1e-4, num_samples=200, rng=rng.spawn(4)
    )
    elapsed = time.time() - t0
    ok = op_worst < 1e-4 and rep.passed and rep.num_checked >= 200 and elapsed < 120
    report(
        "criterion 5 [gradients]",
        ok,
        f"ops worst {op_worst:.2e}; model worst {rep.max_rel_err:.2e} over "
        f"{rep.num_checked} params; {elapsed:.1f}s",
    )
    assert ok, rep.to_text()


# ---------------------------------------------------------------------------
# criterion 6: batch-norm folding


@pytest.mark.parametrize("variant", VARIANTS)
def test_c6_fold_equivalence(variant):
    rng = Rng(66)
    model = build_mobilefacenet(variant, (96, 96), seed=rng.spawn(0))
    calibrate_batchnorm(model, rng.normal((8, 3, 96, 96)))
    folded = fold_batchnorm(model)
    worst = 0.0
    for chunk in range(5):  # 100 random inputs, chunked
        x = rng.normal((20, 3, 96, 96))
        worst = max(worst, float(np.abs(model.forward(x) - folded.forward(x)).max()))
    ok = worst < 1e-4
    report(f"criterion 6 [fold {variant}]", ok, f"max abs diff {worst:.2e} over 100 inputs")
    assert ok


def test_c6_folded_model_file_size(tmp_path):
    model = build_mobilefacenet("primary", (112, 112), seed=0)
    folded = fold_batchnorm(model)
    path = tmp_path / "primary_folded.mfn"
    save_model(folded, path)
    mb = path.stat().st_size / 1e6
    ok = 3.5 <= mb <= 4.5
    report("criterion 6 [file size]", ok, f"{mb:.3f} MB (published 4.0MB)")
    assert ok


# ---------------------------------------------------------------------------
# criterion 7: toy training


def _fresh_training(cfg):
    rng = Rng(cfg.seed)
    ds = gen_toy_dataset(50, 20, (96, 96), 8.0, rng.spawn(20))
    model = build_mobilefacenet("primary", (96, 96), seed=rng.spawn(10), width_divisor=4)
    head = ArcFaceHead(
        50, model.arch.embedding_dim, scale=cfg.arcface_scale, margin=cfg.arcface_margin,
        rng=rng.spawn(30),
    )
    log = train_loop(model, head, ds, cfg)
    return model, head, ds, log


def test_c7_toy_training():
    cfg = desk_config(seed=7)
    t0 = time.time()
    model, head, ds, log = _fresh_training(cfg)
    acc = classification_accuracy(model, head, ds)
    early = log.smoothed_loss(100)
    late = log.smoothed_loss(cfg.total_iters - 1)
    run1 = time.time() - t0

    model2, head2, _, log2 = _fresh_training(cfg)  # full second run: determinism
    identical = log.entries == log2.entries and all(
        np.array_equal(a, b) for (_, a), (_, b) in zip(model.named_params(), model2.named_params())
    ) and np.array_equal(head.weight, head2.weight)
    elapsed = time.time() - t0

    ok = acc > 0.95 and late < early and identical and elapsed < 900
    report(
        "criterion 7 [toy training]",
        ok,
        f"accuracy {acc:.4f}, smoothed loss {early:.3f}@100 -> {late:.4f}@{cfg.total_iters - 1}, "
        f"bit-identical reruns: {identical}, {elapsed / 60:.1f} min (first run {run1 / 60:.1f})",
    )
    assert ok


# ---------------------------------------------------------------------------
# criterion 8: metric oracles


def _tar_oracle(genuine, impostor, far):
    cands = sorted(set(list(genuine) + list(impostor))) + [float("inf")]
    for t in cands:
        if sum(s >= t for s in impostor) / len(impostor) <= far:
            return sum(s >= t for s in genuine) / len(genuine), t
    raise AssertionError


def _kfold_oracle(scores, same, k):
    n = len(scores)
    step = n // k
    thrs, accs = [], []
    for f in range(k):
        test_idx = set(range(f * step, (f + 1) * step))
        train_idx = [i for i in range(n) if i not in test_idx]
        cands = sorted({scores[i] for i in train_idx}) + [float("inf")]
        best = max(
            ((sum((scores[i] >= t) == same[i] for i in train_idx) / len(train_idx), -t), t)
            for t in cands
        )[1]
        thrs.append(best)
        accs.append(sum((scores[i] >= best) == same[i] for i in sorted(test_idx)) / step)
    return thrs, accs


def test_c8_metric_oracles():
    rng = Rng(88)
    genuine = rng.normal((500,), 0.5, 0.25, np.float64)
    impostor = rng.normal((500,), 0.0, 0.25, np.float64)
    tar_ok = True
    fars = (1.0, 0.3, 0.05, 0.01, 0.002, 1e-3)
    for far in fars:
        tar_ok &= tar_at_far(genuine, impostor, far) == _tar_oracle(genuine, impostor, far)
    tars = [tar_at_far(genuine, impostor, far)[0] for far in sorted(fars)]
    mono_ok = all(a <= b for a, b in zip(tars, tars[1:]))

    scores = rng.normal((1000,), 0.2, 0.4, np.float64)
    same = rng.uniform((1000,)) < 0.5
    for f in range(10):  # ensure both kinds per fold
        sl = slice(f * 100, (f + 1) * 100)
        if same[sl].all() or not same[sl].any():
            same[f * 100] = not same[f * 100]
    repo = evaluate_kfold(scores, same, num_folds=10)
    thrs, accs = _kfold_oracle(scores, same, 10)
    kfold_ok = repo.fold_thresholds == thrs and repo.fold_accuracies == accs
    ok = tar_ok and mono_ok and kfold_ok
    report(
        "criterion 8 [metric oracles]",
        ok,
        f"tar exact {tar_ok}, tar monotone {mono_ok}, kfold exact {kfold_ok}",
    )
    assert ok


# ---------------------------------------------------------------------------
# criterion 9: receptive fields


def test_c9_receptive_fields():
    rep = receptive_field(make_arch("primary", (112, 112)))
    end = rep.fmap_end
    # every final-map unit reports the same theoretical size; centers differ
    # by jump-scaled offsets
    rf_ok = end.rf == (227, 227) and end.jump == (16, 16)
    c00, c33 = end.unit_center(0, 0), end.unit_center(3, 3)
    off_ok = (c33[0] - c00[0], c33[1] - c00[1]) == (48.0, 48.0)

    model = build_mobilefacenet("primary", (112, 112), seed=0)
    x = Rng(11).normal((1, 3, 112, 112))
    center = erf_map(model, (0, 3, 3), x=x)
    corner = erf_map(model, (0, 0, 0), x=x)

    def centroid(g):
        ii, jj = np.meshgrid(np.arange(112), np.arange(112), indexing="ij")
        return float((g * ii).sum() / g.sum()), float((g * jj).sum() / g.sum())

    ci, cj = centroid(center)
    ki, kj = centroid(corner)
    erf_ok = 28 < ci < 84 and 28 < cj < 84 and np.hypot(ki, kj) < np.hypot(ci, cj)
    ok = rf_ok and off_ok and erf_ok
    report(
        "criterion 9 [receptive fields]",
        ok,
        f"rf {end.rf} jump {end.jump}; centroids center ({ci:.1f},{cj:.1f}) corner ({ki:.1f},{kj:.1f})",
    )
    assert ok


# ---------------------------------------------------------------------------
# criterion 10: desk-scale limits stated


def test_c10_scope_limits_documented():
    import pathlib

    readme = (pathlib.Path(__file__).parent.parent / "README.md").read_text()
    needed = ["99.55", "96.07", "92.59", "NOT reproducible at desk scale"]
    missing = [s for s in needed if s not in readme]
    ok = not missing
    report("criterion 10 [scope limits documented]", ok, f"missing: {missing}" if missing else "")
    assert ok, f"README must state the published results are out of desk-scale reach: {missing}"
