"""Command-line entry point: synth, train, refine-train, eval, bench.

Every command exits 0 on success. Usage errors exit 2 (argparse) and
runtime failures print a one-line ``error:`` diagnostic and exit 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import engine, metrics, netzoo, refine
from .data import DatasetError, load_dataset
from .pipeline import Samples, load_model, predict_norm, prepare_samples, save_model, train_pose_net
from .preprocess import DEFAULT_CUBE_SIDE, DEFAULT_PATCH_SIZE, DEFAULT_Z_BAND, CubeSpec, Intrinsics, crop_rect
from .synth import SynthConfig, synth_generate

logger = logging.getLogger("handprior")


class CliError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _image_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        w, h = (int(parts[0]), int(parts[-1]))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT or a single integer, got {text!r}") from None
    if w < 8 or h < 8:
        raise argparse.ArgumentTypeError("image must be at least 8x8")
    return w, h


def _add_optim(p: argparse.ArgumentParser) -> None:
    d = engine.OptimConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--huber-delta", type=float, default=d.huber_delta)


def _add_preprocess(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cube-side", type=float, default=DEFAULT_CUBE_SIDE, help="hand cube side, mm")
    p.add_argument("--z-band", type=float, default=DEFAULT_Z_BAND, help="hand depth band, mm")
    p.add_argument("--lenient", action="store_true", help="skip bad records instead of failing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="handprior", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="JSON file with default flag values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=8, help="latent pose dimensionality")
    p.add_argument("--size", type=_image_size, default=(160, 120), help="image size WIDTHxHEIGHT")
    p.add_argument("--holes", type=float, default=0.0, help="hole probability along depth edges")
    p.add_argument("--label-noise", type=float, default=0.0, help="annotation noise sigma, mm")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a first-stage pose net")
    p.add_argument("--arch", choices=netzoo.KINDS, default="deep")
    p.add_argument("--prior-dim", type=int, default=0, help="bottleneck width, 0 = direct regression")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--loss-csv", type=Path, help="per-epoch loss (default: OUT with .loss.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    p.add_argument("--freeze-recon", action="store_true", help="keep the PCA reconstruction layer fixed")
    _add_optim(p)
    _add_preprocess(p)

    p = sub.add_parser("refine-train", help="train per-joint refiners on first-stage residuals")
    p.add_argument("--model", type=Path, required=True, help="first-stage checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="directory for joint_KK.dpck files")
    p.add_argument("--joint", type=int, action="append", help="joint index (repeatable; default all)")
    p.add_argument("--kind", choices=refine.KINDS, default="orref")
    p.add_argument("--patch-sizes", type=_int_list, default=[64, 32, 16])
    p.add_argument("--pools", type=_int_list, default=[4, 2, 1])
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--sigma", type=float, help="perturbation std (normalized units); "
                                               "default: first-stage per-joint RMSE")
    p.add_argument("--copies", type=int, default=1, help="perturbed copies per frame")
    p.add_argument("--seed", type=int, default=0)
    _add_optim(p)
    _add_preprocess(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="directory for curve.csv and joints.csv")
    p.add_argument("--refine", type=Path, help="directory of per-joint refiner checkpoints")
    p.add_argument("--iterations", type=int, help="refinement iterations (default: from refiners)")
    p.add_argument("--max-threshold", type=float, default=80.0)
    _add_preprocess(p)

    p = sub.add_parser("bench", help="single-frame forward latency")
    p.add_argument("--model", type=Path, required=True, nargs="+")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--with-refine", type=Path, help="also run this refiner directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", type=Path, help="also write the report here")
    return parser


def _config_tokens(sub: argparse.ArgumentParser, config: dict, argv: list[str]) -> list[str]:
    """Flags for every config entry the command knows and the user did not set."""
    tokens = []
    given = {t.split("=", 1)[0] for t in argv if t.startswith("--")}
    by_flag = {opt: a for a in sub._actions for opt in a.option_strings}
    for key, value in config.items():
        flag = "--" + key.replace("_", "-")
        action = by_flag.get(flag)
        if action is None or flag in given:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                tokens.append(flag)
            continue
        values = value if isinstance(value, list) and action.nargs in ("+", "*") else [value]
        if action.type is _int_list and isinstance(value, list):
            values = [",".join(str(v) for v in value)]
        tokens += [flag] + [str(v) for v in values]
    return tokens


def _parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    if "--config" in argv:
        # the optional JSON config only supplies defaults; explicit flags win
        i = argv.index("--config")
        if i + 1 >= len(argv):
            parser.error("--config needs a path")
        path = Path(argv[i + 1])
        try:
            config = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {path}: {exc}")
        if not isinstance(config, dict):
            parser.error(f"config {path} must hold a JSON object")
        subs = parser._subparsers._group_actions[0].choices
        pos = next((k for k, t in enumerate(argv) if t in subs), None)
        if pos is not None:
            argv = argv[:pos + 1] + _config_tokens(subs[argv[pos]], config, argv[pos + 1:]) + argv[pos + 1:]
    return parser.parse_args(argv)


def _optim(args) -> engine.OptimConfig:
    try:
        return engine.OptimConfig(learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                                  batch_size=args.batch_size, epochs=args.epochs, huber_delta=args.huber_delta,
                                  seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _samples(data: Path, size: int, args) -> tuple[Samples, list[str]]:
    if not data.is_dir():
        raise CliError(f"data directory {data} does not exist")
    index = load_dataset(data, strict=not args.lenient)
    samples = prepare_samples(index.frames(strict=not args.lenient), size, args.cube_side, args.z_band,
                              strict=not args.lenient)
    return samples, index.joint_names


def cmd_synth(args) -> int:
    w, h = args.size
    cfg = SynthConfig(n_samples=args.n, seed=args.seed, width=w, height=h,
                      intrinsics=Intrinsics(w, w, w / 2.0, h / 2.0), latent_dim=args.k,
                      hole_prob=args.holes, label_noise=args.label_noise)
    synth_generate(cfg, args.out)
    print(f"wrote {args.n} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    optim = _optim(args)
    samples, _ = _samples(args.data, args.patch_size, args)
    try:
        spec = netzoo.ArchSpec(kind=args.arch, input_size=args.patch_size,
                               num_joints=samples.poses_mm.shape[1], prior_dim=args.prior_dim)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    graph, trace = train_pose_net(spec, samples, optim, seed=args.seed, freeze_recon=args.freeze_recon)
    graph.meta["preprocess"] = {"cube_side": args.cube_side, "z_band": args.z_band,
                                "patch_size": args.patch_size}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(graph, args.out)
    loss_csv = args.loss_csv or args.out.with_suffix(".loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, f"{v:.8g}"])
    print(f"trained {spec.kind} (prior_dim={spec.prior_dim}) on {len(samples)} frames; "
          f"final loss {trace[-1]:.6g}; wrote {args.out}")
    return 0


def _pose_model(path: Path) -> engine.Graph:
    graph = load_model(path)
    if graph.meta.get("role") != "pose":
        raise CliError(f"{path} is not a first-stage pose model")
    return graph


def _preprocess_of(graph, args) -> None:
    # the model's own preprocessing constants win unless flags override them
    pp = graph.meta.get("preprocess", {})
    if args.cube_side == DEFAULT_CUBE_SIDE and "cube_side" in pp:
        args.cube_side = pp["cube_side"]
    if args.z_band == DEFAULT_Z_BAND and "z_band" in pp:
        args.z_band = pp["z_band"]


def cmd_refine_train(args) -> int:
    optim = _optim(args)
    stage1 = _pose_model(args.model)
    _preprocess_of(stage1, args)
    arch = netzoo.arch_of(stage1)
    samples, _ = _samples(args.data, arch.input_size, args)
    num_joints = samples.poses_mm.shape[1]
    if num_joints != arch.num_joints:
        raise CliError(f"data has {num_joints} joints, model predicts {arch.num_joints}")
    joints = args.joint if args.joint else list(range(num_joints))
    bad = [j for j in joints if not 0 <= j < num_joints]
    if bad:
        raise CliError(f"joint index {bad[0]} out of range [0, {num_joints})")
    truth = samples.poses_norm
    resid = predict_norm(stage1, samples) - truth
    rmse = np.sqrt(np.mean(resid ** 2, axis=(0, 2)))
    args.out.mkdir(parents=True, exist_ok=True)
    for j in joints:
        try:
            spec = refine.RefineSpec(patch_sizes=args.patch_sizes, pools=args.pools, iterations=args.iterations,
                                     joint_index=j, kind=args.kind)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        sigma = args.sigma if args.sigma is not None else float(rmse[j])
        graph, trace = refine.train_refiner(spec, samples.values, samples.centers, samples.cube_side,
                                            samples.crops, samples.intrinsics, truth, sigma, optim,
                                            seed=args.seed + j, copies=args.copies)
        graph.meta["sigma"] = sigma
        save_model(graph, args.out / f"joint_{j:02d}.dpck")
        print(f"joint {j}: sigma {sigma:.4g}, final loss {trace[-1]:.6g}")
    return 0


def load_refiners(directory: Path, num_joints: int) -> list:
    """Per-joint refiners from ``joint_KK.dpck`` files; absent joints stay ``None``."""
    if not directory.is_dir():
        raise CliError(f"refiner directory {directory} does not exist")
    out: list = [None] * num_joints
    for path in sorted(directory.glob("joint_*.dpck")):
        g = load_model(path)
        if g.meta.get("role") != "refiner":
            raise CliError(f"{path} is not a refiner checkpoint")
        j = refine.spec_of(g).joint_index
        if not 0 <= j < num_joints:
            raise CliError(f"{path} refines joint {j}, model has {num_joints} joints")
        out[j] = g
    return out


def cmd_eval(args) -> int:
    graph = _pose_model(args.model)
    _preprocess_of(graph, args)
    arch = netzoo.arch_of(graph)
    samples, names = _samples(args.data, arch.input_size, args)
    if samples.poses_mm.shape[1] != arch.num_joints:
        raise CliError(f"data has {samples.poses_mm.shape[1]} joints, model predicts {arch.num_joints}")
    pred = predict_norm(graph, samples)
    if args.refine is not None:
        refiners = load_refiners(args.refine, arch.num_joints)
        pred = refine.refine_batch(refiners, samples.values, samples.centers, samples.cube_side,
                                   samples.crops, samples.intrinsics, pred, args.iterations)
    thresholds = np.arange(0.0, args.max_threshold + 0.5, 1.0)
    report = metrics.evaluate(samples.to_mm(pred), samples.poses_mm, thresholds, names or None)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_curve_csv(args.out / "curve.csv")
    report.write_joint_csv(args.out / "joints.csv")
    print(f"{report.frames} frames: mean joint error {report.overall:.3f} mm")
    return 0


def bench_models(graphs: list, runs: int = 1000, warmup: int = 50, seed: int = 0, refiners=None) -> list[dict]:
    """Median and mean single-frame latency per model, single-threaded.

    Runs are interleaved across models so slow drifts of the machine hit
    every model alike. Timing covers the whole ``predict`` call.
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    patches, frames = {}, {}
    for g in graphs:
        s = netzoo.arch_of(g).input_size
        if s not in patches:
            patches[s] = rng.uniform(-1.0, 1.0, (s, s)).astype(np.float32)
            # a camera for which the cube projects exactly onto the patch
            cube = CubeSpec((0.0, 0.0, 500.0), DEFAULT_CUBE_SIDE)
            f = s * cube.center[2] / cube.side
            intr = Intrinsics(f, f, s / 2.0, s / 2.0)
            frames[s] = (np.array([cube.center]), np.array([crop_rect(cube, intr)]), intr)
    times: list[list[float]] = [[] for _ in graphs]
    with threadpool_limits(limits=1):
        for i in range(warmup + runs):
            for k, g in enumerate(graphs):
                patch = patches[netzoo.arch_of(g).input_size]
                t = time.perf_counter()
                pose = netzoo.predict(g, patch)
                if refiners is not None:
                    c, crop, intr = frames[patch.shape[0]]
                    refine.refine_batch(refiners, patch[None], c, DEFAULT_CUBE_SIDE, crop, [intr],
                                        pose[None].astype(np.float64))
                if i >= warmup:
                    times[k].append(time.perf_counter() - t)
    out = []
    for g, ts in zip(graphs, times):
        t = np.asarray(ts) * 1e3
        arch = netzoo.arch_of(g)
        out.append({"arch": arch.kind, "prior_dim": arch.prior_dim, "input_size": arch.input_size,
                    "refine": refiners is not None, "runs": runs,
                    "median_ms": float(np.median(t)), "mean_ms": float(np.mean(t))})
    return out


def cmd_bench(args) -> int:
    if args.runs < 1 or args.warmup < 0:
        raise CliError("--runs must be >= 1 and --warmup >= 0")
    graphs = [_pose_model(p) for p in args.model]
    refiners = None
    if args.with_refine is not None:
        refiners = load_refiners(args.with_refine, netzoo.arch_of(graphs[0]).num_joints)
    report = bench_models(graphs, args.runs, args.warmup, args.seed, refiners)
    for path, r in zip(args.model, report):
        r["model"] = str(path)
        print(f"{path}: {r['arch']} prior_dim={r['prior_dim']} median {r['median_ms']:.3f} ms "
              f"mean {r['mean_ms']:.3f} ms over {r['runs']} runs")
    if args.json:
        args.json.write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "refine-train": cmd_refine_train,
            "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _parse(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, DatasetError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
