"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .engine import ContractError, NumericError
from .geometry import AugmentConfig, DegenerateInputError, PointCloud, sample_mesh
from .io import RunConfig, apply_overrides
from .network import EvaConfig
from .shapes import SHAPE_NAMES, make_shape
from .losses import LossConfig
from .training import DESK_LOSS, DESK_MODEL, EvalItem, TrainSample, evaluate, generate_dataset, make_eval_input, train, upsample_cloud

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PRESETS = {"full": ({}, {}), "desk": (DESK_MODEL, DESK_LOSS)}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pueva", description="Point-cloud upsampling with edge-vector attention.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize the procedural training/evaluation set")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--shapes", type=int, default=len(SHAPE_NAMES), help="use the first N built-in shapes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--patches", type=int, default=24, help="patches per training shape")
    g.add_argument("--gt-points", type=int, default=1024)
    g.add_argument("--rate", type=int, default=4)
    g.add_argument("--eval-points", type=int, default=8192, help="dense gt size of each evaluation shape")
    g.add_argument("--holdout", default="ellipsoid", help="shape kept out of training ('none' to train on all)")

    t = sub.add_parser("train", help="train a model on a gen-data directory")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--config", type=Path, help="key = value run configuration file")
    t.add_argument("--preset", choices=sorted(PRESETS), default="full", help="network width and loss weight preset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--r-train", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    for name in ("alpha", "beta", "gamma", "delta"):
        t.add_argument(f"--{name}", type=float)
    t.add_argument("--resume", type=Path, help="continue from a checkpoint")
    t.add_argument("--history", type=Path, help="per-epoch CSV (default: <out>.history.csv)")

    u = sub.add_parser("upsample", help="upsample an .xyz point cloud")
    u.add_argument("--model", required=True, type=Path)
    u.add_argument("--input", required=True, type=Path)
    u.add_argument("--rate", required=True, type=int)
    u.add_argument("--out", required=True, type=Path)
    u.add_argument("--patch-size", type=int, default=256)
    u.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="score a model on the evaluation shapes of a data directory")
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path)
    e.add_argument("--rate", type=int)
    e.add_argument("--patch-size", type=int, default=256)
    e.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("validate-taylor", help="second-order approximation sweep")
    v.add_argument("--out", required=True, type=Path)
    v.add_argument("--trials", type=int, default=2000)
    v.add_argument("--seed", type=int, default=0)
    return p


# ------------------------------------------------------------------ commands


def _read_manifest(data: Path) -> dict[str, str]:
    path = data / "manifest.cfg"
    if not path.exists():
        raise DataError(f"{data}: no manifest.cfg; is this a gen-data directory?")
    items = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            items[k] = v
    return items


def cmd_gen_data(args) -> int:
    if not 1 <= args.shapes <= len(SHAPE_NAMES):
        raise UsageError(f"--shapes must be between 1 and {len(SHAPE_NAMES)}")
    names = list(SHAPE_NAMES[:args.shapes])
    holdout = [] if args.holdout == "none" else [args.holdout]
    if holdout and holdout[0] not in names:
        raise UsageError(f"--holdout {args.holdout!r} is not among the selected shapes {names}")
    train_names = [n for n in names if n not in holdout] or names
    out = args.out
    for sub in ("meshes", "patches", "eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    train_seed, eval_seed = (int(s) for s in rng.integers(2**31, size=2))
    samples = generate_dataset(train_names, args.patches, args.gt_points, args.rate, train_seed)
    counters: dict[str, int] = {}
    for s in samples:
        i = counters[s.source] = counters.get(s.source, -1) + 1
        io.write_xyz(out / "patches" / f"{s.source}_{i:03d}.xyz", s.gt)
    ev_rng = np.random.default_rng(eval_seed)
    for name in names:
        mesh = make_shape(name)
        io.write_off(out / "meshes" / f"{name}.off", mesh)
        gt = sample_mesh(mesh, args.eval_points, ev_rng.integers(2**63))
        io.write_xyz(out / "eval" / f"{name}_gt.xyz", gt)
        io.write_xyz(out / "eval" / f"{name}_input.xyz", make_eval_input(gt, args.rate, ev_rng.integers(2**63)))
    manifest = {"shapes": ",".join(names), "train_shapes": ",".join(train_names), "holdout": ",".join(holdout),
                "seed": args.seed, "patches": args.patches, "gt_points": args.gt_points, "rate": args.rate,
                "eval_points": args.eval_points}
    (out / "manifest.cfg").write_text("".join(f"{k} = {v}\n" for k, v in manifest.items()), encoding="utf-8")
    print(f"wrote {len(samples)} training patches and {len(names)} evaluation shapes to {out}")
    return EXIT_OK


def _load_samples(data: Path, r_train: int) -> list[TrainSample]:
    files = sorted((data / "patches").glob("*.xyz"))
    if not files:
        raise DataError(f"{data}/patches: no training patches")
    samples = []
    rng = np.random.default_rng(0)
    for f in files:
        gt = io.read_xyz(f)
        if len(gt) % r_train:
            raise DataError(f"{f}: {len(gt)} points is not divisible by r-train {r_train}")
        pick = rng.choice(len(gt), len(gt) // r_train, replace=False)
        samples.append(TrainSample(PointCloud(gt.points[pick]), gt, f.stem.rsplit("_", 1)[0], 0))
    return samples


def _run_config(args, manifest) -> RunConfig:
    model, loss = PRESETS[args.preset]
    run = RunConfig(model=EvaConfig(**{**model, "R_train": int(manifest.get("rate", 4))}), loss=LossConfig(**loss))
    if args.config is not None:
        run = io.read_run_config(args.config, run)
    flags = {"epochs": args.epochs, "batch": args.batch, "K": args.k, "R_train": args.r_train, "seed": args.seed,
             "lr": args.lr, "alpha": args.alpha, "beta": args.beta, "gamma": args.gamma, "delta": args.delta}
    try:
        return apply_overrides(run, {k: str(v) for k, v in flags.items() if v is not None})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    manifest = _read_manifest(args.data)
    run = _run_config(args, manifest)
    samples = _load_samples(args.data, run.model.R_train)
    if len(samples[0].input) <= run.model.K:
        raise DataError(f"training inputs of {len(samples[0].input)} points need more than K={run.model.K}")
    state = io.load_checkpoint(args.resume) if args.resume else None
    history = args.history or args.out.with_name(args.out.name + ".history.csv")
    try:
        state = train(samples, run.model, run.loss, run.epochs, run.batch, run.seed, lr=run.lr,
                      augment=AugmentConfig() if run.augment else None, state=state,
                      dump_path=args.out.with_name(args.out.name + ".failed"))
    finally:
        if state is not None:
            io.write_history_csv(history, state.history)
    io.save_checkpoint(args.out, state)
    last = state.history[-1] if state.history else None
    print(f"trained {state.epoch} epochs" + (f"; final loss {last.loss:.6g}, cd {last.cd:.6g}" if last else ""))
    return EXIT_OK


def _check_rate(rate: int, config: EvaConfig) -> None:
    if rate < 1:
        raise UsageError("--rate must be >= 1")
    if rate > config.K:
        raise UsageError(f"--rate {rate} exceeds the model's neighbourhood size K={config.K}; "
                         f"each generated point is a combination of K neighbours, so R must satisfy R <= K")


def cmd_upsample(args) -> int:
    state = io.load_checkpoint(args.model)
    _check_rate(args.rate, state.config)
    cloud = io.read_xyz(args.input)
    if len(cloud) <= state.config.K:
        raise DataError(f"{args.input}: {len(cloud)} points; need more than K={state.config.K}")
    out = upsample_cloud(cloud, state, args.rate, args.patch_size, args.seed)
    io.write_xyz(args.out, out)
    print(f"{len(cloud)} -> {len(out)} points written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = io.load_checkpoint(args.model)
    manifest = _read_manifest(args.data)
    rate = args.rate or int(manifest.get("rate", 4))
    _check_rate(rate, state.config)
    items = []
    for name in manifest["shapes"].split(","):
        mesh_path = args.data / "meshes" / f"{name}.off"
        mesh = io.read_off(mesh_path) if mesh_path.exists() else None
        items.append(EvalItem(name, io.read_xyz(args.data / "eval" / f"{name}_input.xyz"),
                              io.read_xyz(args.data / "eval" / f"{name}_gt.xyz"), mesh))
    report = evaluate(state, items, rate, args.patch_size, rng_seed=args.seed)
    io.write_report_csv(args.report, report)
    print(f"mean cd {report.mean('cd'):.6g}, hd {report.mean('hd'):.6g}; report written to {args.report}")
    return EXIT_OK


def cmd_validate_taylor(args) -> int:
    from .validator import SURFACES, taylor_sweep

    rows = []
    for name, make in SURFACES.items():
        r = taylor_sweep(make(), trials=args.trials, rng_seed=args.seed)
        for h, mean, mx in zip(r.radii, r.mean_abs_error, r.max_abs_error):
            rows.append([name, repr(float(h)), repr(float(mean)), repr(float(mx)), repr(r.loglog_slope)])
        print(f"{name}: slope {r.loglog_slope:.4f}" + (" (all errors zero)" if r.zero_error else ""))
    io.write_rows_csv(args.out, ["surface", "h", "mean_err", "max_err", "slope"], rows)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "upsample": cmd_upsample, "eval": cmd_eval,
            "validate-taylor": cmd_validate_taylor}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, io.ParseError, io.UnsupportedFormatError, io.CheckpointError, DegenerateInputError,
            ContractError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
