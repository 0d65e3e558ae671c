"""Command-line surface: build, analyze, rf, erf, importance, train, fold,
embed, verify, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data or IO error, 3 check failure.
All numeric work lives in the library modules; this file only parses flags,
moves bytes and prints reports.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analysis, pipeline, training
from .arch import SUPPORTED_RESOLUTIONS, VARIANTS, build_mobilefacenet, make_arch
from .pipeline import ModelFormatError, PairList, load_model, read_image, save_model
from .tensor import Rng, ShapeError

RESOLUTION_NAMES = {f"{h}x{w}": (h, w) for h, w in SUPPORTED_RESOLUTIONS}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _resolution(value: str) -> tuple[int, int]:
    if value not in RESOLUTION_NAMES:
        raise argparse.ArgumentTypeError(f"unsupported resolution {value!r}, expected one of {sorted(RESOLUTION_NAMES)}")
    return RESOLUTION_NAMES[value]


def _unit(value: str) -> tuple[int, int, int]:
    parts = value.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"unit must be c,i,j, got {value!r}")
    return tuple(int(p) for p in parts)


def build_parser() -> _Parser:
    parser = _Parser(prog="mfn", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--threads", type=int, default=1, help="parallelism bound (default 1, deterministic)")
        return p

    p = add("build", "build a network variant and write a model file")
    p.add_argument("--variant", choices=VARIANTS, default="primary")
    p.add_argument("--input", type=_resolution, default=(112, 112), metavar="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width-divisor", type=int, default=1)
    p.add_argument("--no-bn-linear", action="store_true", help="omit BN after the linear output layers")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_build)

    p = add("analyze", "print per-layer parameter and MAdds accounting")
    p.add_argument("model")
    p.add_argument("--form", choices=analysis.PARAM_FORMS, default="deploy")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_analyze)

    p = add("rf", "print theoretical receptive-field geometry")
    p.add_argument("--variant", choices=VARIANTS, default="primary")
    p.add_argument("--input", type=_resolution, default=(112, 112), metavar="HxW")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_rf)

    p = add("erf", "empirical receptive field of one final-map unit")
    p.add_argument("model")
    p.add_argument("--unit", type=_unit, required=True, metavar="c,i,j")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--avg", type=int, default=1, help="average over this many seeded inputs")
    p.add_argument("-o", "--output", help="write csv here instead of stdout")
    p.set_defaults(func=cmd_erf)

    p = add("importance", "spatial-importance map of the global depthwise kernel")
    p.add_argument("model")
    p.add_argument("-o", "--output", help="write csv here instead of stdout")
    p.set_defaults(func=cmd_importance)

    p = add("train", "train on a synthetic identity set per a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("-o", "--output", help="write the trained model here")
    p.add_argument("--log", help="write the iter,lr,loss csv here")
    p.set_defaults(func=cmd_train)

    p = add("fold", "fold batch norms into convolutions for deployment")
    p.add_argument("model")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_fold)

    p = add("embed", "print the embedding of one image")
    p.add_argument("model")
    p.add_argument("image")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_embed)

    p = add("verify", "compare two images against a similarity threshold")
    p.add_argument("model")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--threshold", type=float, required=True)
    p.set_defaults(func=cmd_verify)

    p = add("eval", "k-fold verification accuracy and TAR@FAR over a pair list")
    p.add_argument("model")
    p.add_argument("pairs")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--far", type=float, action="append", default=None, help="repeatable")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_eval)

    p = add("gradcheck", "finite-difference check of the full training gradient")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--input", type=_resolution, default=(96, 96), metavar="HxW")
    p.add_argument("--width-divisor", type=int, default=4)
    p.add_argument("--ids", type=int, default=4)
    p.add_argument("--batch", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    return parser


# ---------------------------------------------------------------------------
# handlers


def cmd_build(args) -> int:
    model = build_mobilefacenet(
        args.variant,
        args.input,
        seed=args.seed,
        bn_on_linear=not args.no_bn_linear,
        width_divisor=args.width_divisor,
    )
    save_model(model, args.output)
    report = analysis.cost_report(model.arch, form="deploy")
    print(
        f"built {args.variant} at {args.input[0]}x{args.input[1]}: "
        f"{model.arch.embedding_dim}-d embedding, {report.total_params} deploy params -> {args.output}"
    )
    return 0


def cmd_analyze(args) -> int:
    model = load_model(args.model)
    report = analysis.cost_report(model.arch, form=args.form)
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_text())
    return 0


def cmd_rf(args) -> int:
    arch = make_arch(args.variant, args.input)
    report = analysis.receptive_field(arch)
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_text())
    return 0


def cmd_erf(args) -> int:
    model = load_model(args.model)
    grid = analysis.erf_map(model, args.unit, rng=Rng(args.seed), n_inputs=args.avg)
    text = analysis.map_to_csv(grid)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_importance(args) -> int:
    model = load_model(args.model)
    grid = analysis.importance_map(model)
    text = analysis.map_to_csv(grid)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _config_get(kv, key, cast, default):
    return cast(kv[key]) if key in kv else default


def cmd_train(args) -> int:
    with open(args.config) as f:
        kv = training.parse_kv(f.read())
    h, _, w = kv.get("input", "96x96").partition("x")
    input_hw = (int(h), int(w))
    seed = _config_get(kv, "seed", int, 7)
    drops = tuple(int(x) for x in kv.get("lr_drop_iters", "1200,1733,1933").split(","))
    cfg = training.TrainConfig(
        batch_size=_config_get(kv, "batch_size", int, 32),
        momentum=_config_get(kv, "momentum", float, 0.9),
        base_lr=_config_get(kv, "base_lr", float, 0.1),
        lr_drop_iters=drops,
        total_iters=_config_get(kv, "total_iters", int, 2000),
        weight_decay_general=_config_get(kv, "weight_decay_general", float, 4e-5),
        weight_decay_post_global=_config_get(kv, "weight_decay_post_global", float, 4e-4),
        decay_global_op_as_post=bool(_config_get(kv, "decay_global_op_as_post", int, 0)),
        arcface_scale=_config_get(kv, "arcface_scale", float, 64.0),
        arcface_margin=_config_get(kv, "arcface_margin", float, 0.5),
        seed=seed,
    )
    model = build_mobilefacenet(
        kv.get("variant", "primary"),
        input_hw,
        seed=Rng(seed).spawn(10),
        width_divisor=_config_get(kv, "width_divisor", int, 1),
    )
    dataset = training.gen_toy_dataset(
        num_ids=_config_get(kv, "num_ids", int, 50),
        samples_per_id=_config_get(kv, "samples_per_id", int, 20),
        hw=input_hw,
        noise_std=_config_get(kv, "noise_std", float, 8.0),
        rng=Rng(seed).spawn(20),
    )
    head = training.ArcFaceHead(
        dataset.num_classes,
        model.arch.embedding_dim,
        scale=cfg.arcface_scale,
        margin=cfg.arcface_margin,
        rng=Rng(seed).spawn(30),
    )
    every = max(1, cfg.total_iters // 20)

    def progress(it, lr, loss):
        if it % every == 0 or it == cfg.total_iters - 1:
            print(f"iter {it:>6}  lr {lr:.5f}  loss {loss:.4f}", file=sys.stderr)

    log = training.train_loop(model, head, dataset, cfg, progress=progress)
    acc = training.classification_accuracy(model, head, dataset)
    print(f"final training classification accuracy: {acc:.4f}")
    if args.log:
        with open(args.log, "w") as f:
            f.write(log.to_csv())
    if args.output:
        save_model(model, args.output)
        print(f"saved trained model -> {args.output}")
    return 0


def cmd_fold(args) -> int:
    model = load_model(args.model)
    if model.folded:
        print(f"error (fold): {args.model} is already folded", file=sys.stderr)
        return 2
    folded = pipeline.fold_batchnorm(model)
    save_model(folded, args.output)
    print(f"folded model -> {args.output}")
    return 0


def cmd_embed(args) -> int:
    model = load_model(args.model)
    vec = pipeline.embed(model, read_image(args.image), normalize=args.normalize)
    if args.format == "csv":
        print("dim,value")
        for i, v in enumerate(vec):
            print(f"{i},{v!r}")
    else:
        print(" ".join(f"{v:.6g}" for v in vec))
    return 0


def cmd_verify(args) -> int:
    model = load_model(args.model)
    ea = pipeline.embed(model, read_image(args.image_a))
    eb = pipeline.embed(model, read_image(args.image_b))
    sim = pipeline.cosine_similarity(ea, eb)
    verdict = "MATCH" if sim >= args.threshold else "MISMATCH"
    print(f"{verdict} similarity={sim:.6f} threshold={args.threshold:g}")
    return 0 if verdict == "MATCH" else 3


def cmd_eval(args) -> int:
    model = load_model(args.model)
    pairs = PairList.parse(open(args.pairs).read())
    if not pairs.pairs:
        print("error (eval): empty pair list", file=sys.stderr)
        return 2
    paths = sorted({p for a, b, _ in pairs.pairs for p in (a, b)})

    def embed_path(path):
        return path, pipeline.embed(model, read_image(path), normalize=True)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            cache = dict(pool.map(embed_path, paths))
    else:
        cache = dict(map(embed_path, paths))
    scores = np.array([pipeline.cosine_similarity(cache[a], cache[b]) for a, b, _ in pairs.pairs])
    same = np.array([s for _, _, s in pairs.pairs], dtype=bool)
    report = pipeline.evaluate_kfold(scores, same, num_folds=args.folds)
    for far in args.far or []:
        report.tars[far] = pipeline.tar_at_far(scores[same], scores[~same], far)
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_text())
    return 0


def cmd_gradcheck(args) -> int:
    rng = Rng(args.seed)
    model = build_mobilefacenet(
        "primary", args.input, seed=rng.spawn(1), width_divisor=args.width_divisor, dtype=np.float64
    )
    dataset = training.gen_toy_dataset(args.ids, 2, hw=args.input, noise_std=8.0, rng=rng.spawn(2))
    head = training.ArcFaceHead(
        dataset.num_classes, model.arch.embedding_dim, rng=rng.spawn(3), dtype=np.float64
    )
    pick = rng.spawn(4).permutation(len(dataset.labels))[: args.batch]
    report = training.grad_check_model(
        model,
        head,
        dataset.images[pick],
        dataset.labels[pick],
        tolerance=args.tol,
        num_samples=args.samples,
        rng=rng.spawn(5),
    )
    sys.stdout.write(report.to_text())
    return 0 if report.passed else 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as e:
        print(f"error ({args.cmd} io): {e}", file=sys.stderr)
        return 2
    except (ModelFormatError, ShapeError) as e:
        print(f"error ({args.cmd} data): {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as e:
        print(f"error ({args.cmd}): {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
