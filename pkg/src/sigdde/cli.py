"""Command-line front end: ``python -m sigdde <subcommand>`` or ``sigdde <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench
from .dde import SYSTEMS
from .data import DatasetError, add_noise, dataset_hash, generate_dataset, load_dataset, save_dataset
from .models import Checkpoint
from .training import TrainingError, evaluate_rmse, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # shared by the top-level parser and every subcommand, so flags work on either side
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(0), help="dataset / base seed (default 0)")
    p.add_argument("--out", type=Path, default=d(None), help="output directory")
    p.add_argument("--profile", choices=sorted(bench.PROFILES), default=d("desk"))
    p.add_argument("--threads", type=int, default=d(1), help="worker threads for experiment cells")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sigdde", parents=[_global_flags(True)],
                     description="Signature encoders for delay-differential dynamics.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    g = [_global_flags(False)]

    p = sub.add_parser("generate", parents=g, help="simulate a dataset directory")
    p.add_argument("--system", required=True)
    p.add_argument("--n-traj", type=int, default=None)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.0, help="std of a corrupted copy stored alongside")
    p.add_argument("--coupling", type=float, default=None, help="Fitzhugh-Nagumo coupling factor")

    p = sub.add_parser("train", parents=g, help="train one encoder/decoder/seed cell")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--encoder", default="sig", choices=sorted(bench.ENCODERS))
    p.add_argument("--decoder", default="flow", choices=bench.DECODERS)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--window", type=int, default=40)
    p.add_argument("--no-phi", action="store_true", help="drop the learned lift channels")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seq-len", type=int, default=None, help="thin the encoding part to this many points")

    p = sub.add_parser("evaluate", parents=g, help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--part", choices=("train", "val", "test"), default="test")
    p.add_argument("--denormalize", action="store_true", help="report RMSE in raw units")

    p = sub.add_parser("ablate", parents=g, help="sweep one study over seeds")
    p.add_argument("--study", required=True, choices=bench.STUDIES)
    p.add_argument("--system", default=None)
    p.add_argument("--values", default=None, help="comma-separated sweep values")
    p.add_argument("--off", action="store_true", help="phi study: run only the lift-off variant")
    p.add_argument("--encoders", default=None, help="comma-separated; default sig (gru,sig for noise)")
    p.add_argument("--decoder", default="flow", choices=bench.DECODERS)
    p.add_argument("--seeds", default=None, help="comma-separated run seeds (default 0..4)")
    p.add_argument("--n-seeds", type=int, default=None, help="use seeds 0..n-1 (default 5)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-traj", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--timing", action="store_true", help="fill the epoch_seconds column")
    p.add_argument("--data-seed", type=int, default=None,
                   help="fix one dataset split for every seed (default: split seed = run seed)")

    p = sub.add_parser("bench-timing", parents=g, help="mean epoch duration per encoder")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--encoders", default="sig,gru")
    p.add_argument("--decoder", default="flow", choices=bench.DECODERS)
    p.add_argument("--epochs", type=int, default=20, help="measured epochs (>= 5)")
    p.add_argument("--warmup", type=int, default=3)

    p = sub.add_parser("plot", parents=g, help="loss curves or trajectory overlays as SVG")
    p.add_argument("kind", choices=("loss", "trajectory"))
    p.add_argument("--group", action="append", default=[], metavar="LABEL=RUN.csv[,RUN.csv...]",
                   help="loss: one labelled group of per-epoch run CSVs (repeatable)")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--index", type=int, default=0, help="trajectory index within the test part")
    return parser


# -- subcommands ---------------------------------------------------------------

def _need_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out)


def cmd_generate(args) -> int:
    if args.system not in SYSTEMS:
        raise UsageError(f"unknown system {args.system!r}; valid: {', '.join(SYSTEMS)}")
    out = _need_out(args)
    n = args.n_traj or bench.PROFILES[args.profile].n_traj
    overrides = {"gamma": args.coupling} if args.coupling is not None else None
    ds = generate_dataset(args.system, n, args.points, args.seed, overrides)
    if args.noise > 0:
        add_noise(ds, args.noise, args.seed)
    save_dataset(ds, out)
    print(f"{ds.system}: {len(ds)} trajectories x {ds.n_points} points x {ds.dim} channels -> {out}")
    print(f"split train/val/test = {len(ds.train)}/{len(ds.val)}/{len(ds.test)}, "
          f"t in [{ds.times[0]:.4g}, {ds.times[-1]:.4g}]")
    if ds.noisy is not None:
        print(f"noisy copy: std {ds.noise_std}, seed {ds.noise_seed}")
    print(f"content hash {dataset_hash(out)}")
    return EXIT_OK


def _load_checked(path: Path):
    before = dataset_hash(path)
    ds = load_dataset(path)
    return ds, before


def _verify_unchanged(path: Path, before: str):
    if dataset_hash(path) != before:
        raise DatasetError(f"dataset {path} changed during the run")


def cmd_train(args) -> int:
    out = _need_out(args)
    prof = bench.PROFILES[args.profile]
    ds, h = _load_checked(args.data)
    cell = bench.Cell(ds.system, args.encoder, args.decoder, args.seed, depth=args.depth,
                      window=args.window, phi=not args.no_phi, noise=ds.noise_std,
                      seq_len=args.seq_len, n_traj=len(ds), points=ds.n_points,
                      epochs=prof.epochs if args.epochs is None else args.epochs,
                      lr=args.lr or prof.lr, batch_size=args.batch_size, data_seed=ds.seed)
    if args.epochs is not None and args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    model = cell.build_model(ds.dim)

    def log(epoch, loss, val):
        if epoch == 1 or epoch % 50 == 0 or epoch == cell.epochs:
            print(f"epoch {epoch:5d}  train {loss:.6g}  val rmse {val:.6g}", flush=True)

    ckpt, record = train(model, ds, cell.train_config(), log=log)
    ckpt.metadata["config_hash"] = cell.config_hash()
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "checkpoint")
    record.to_csv(out / "run.csv")
    summary = {**record.summary(), "cell": asdict(cell), "config_hash": cell.config_hash()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    bench.results_csv([bench.CellResult(cell, record)], out / "results.csv")
    _verify_unchanged(args.data, h)
    print(f"test rmse {record.test_rmse:.6g} (best epoch {summary['best_epoch']}) -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds, h = _load_checked(args.data)
    ckpt = Checkpoint.load(args.checkpoint)
    rmse = evaluate_rmse(ckpt, ds, args.part, denormalize=args.denormalize)
    print(f"{args.part} rmse {rmse!r}")
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "evaluation.json").write_text(json.dumps(
            {"part": args.part, "rmse": rmse, "denormalized": args.denormalize}, indent=2))
    _verify_unchanged(args.data, h)
    return EXIT_OK


def _seeds(args, default_n=5) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return list(range(args.n_seeds or default_n))


def cmd_ablate(args) -> int:
    out = _need_out(args)
    study = args.study
    system = args.system or ("fitzhugh_nagumo_dde" if study == "coupling" else "rossler_dde")
    if system not in SYSTEMS:
        raise UsageError(f"unknown system {system!r}; valid: {', '.join(SYSTEMS)}")
    try:
        values = [False] if study == "phi" and args.off else bench.parse_values(study, args.values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    default_enc = "sig,gru" if study in ("noise", "seq_len") else "sig"
    encoders = (args.encoders or default_enc).split(",")
    for e in encoders:
        if e not in bench.ENCODERS:
            raise UsageError(f"unknown encoder {e!r}; valid: {', '.join(sorted(bench.ENCODERS))}")
    if study in ("depth", "phi") and any(bench.canonical_encoder(e) != "signature" for e in encoders):
        raise UsageError(f"the {study} study only applies to the signature encoder")
    plan = bench.ExperimentPlan(system, [(e, args.decoder) for e in encoders], _seeds(args),
                                {study: values}, bench.PROFILES[args.profile], out,
                                data_seed=args.data_seed, epochs=args.epochs, lr=args.lr, n_traj=args.n_traj)
    cells = plan.cells()
    print(f"{study} study on {system}: {len(cells)} cells", flush=True)

    def log(res):
        status = res.error or f"test rmse {res.record.test_rmse:.5g}"
        c = res.cell
        print(f"  {c.encoder}/{c.decoder} {study}={getattr(c, study)} seed {c.seed}: {status}", flush=True)

    results = bench.run_plan(cells, threads=args.threads, log=log)
    out.mkdir(parents=True, exist_ok=True)
    bench.results_csv(results, out / "results.csv", timing=args.timing)
    rows = bench.read_results(out / "results.csv")
    by = ("system", "encoder", "decoder", study)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        summary = bench.summarize(rows, by)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    bench.write_rows(summary, list(by) + ["n", "failed", "mean", "std", "median"], out / "summary.csv")
    print(bench.format_summary(summary, by))
    failed = sum(1 for r in results if r.error)
    if failed:
        print(f"{failed} of {len(results)} cells failed; see the error column", file=sys.stderr)
    return EXIT_OK if failed < len(results) else EXIT_RUNTIME


def cmd_bench_timing(args) -> int:
    if args.epochs < 5:
        raise UsageError(f"--epochs must be >= 5 measured epochs, got {args.epochs}")
    ds, h = _load_checked(args.data)
    encoders = [bench.canonical_encoder(e) for e in args.encoders.split(",")]
    rows = bench.bench_timing(ds, encoders, args.decoder, args.epochs, args.warmup, args.seed,
                              lr=bench.PROFILES[args.profile].lr)
    text = bench.write_rows(rows, bench.TIMING_FIELDS)
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "timing.csv").write_text(text)
    print(text, end="")
    _verify_unchanged(args.data, h)
    return EXIT_OK


def _read_losses(path: Path) -> list[float]:
    import csv

    with open(path, newline="") as fh:
        return [float(r["train_loss"]) for r in csv.DictReader(fh)]


def cmd_plot(args) -> int:
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "loss":
        if not args.group:
            raise UsageError("plot loss needs at least one --group LABEL=RUN.csv,...")
        groups, missing = {}, []
        for spec in args.group:
            label, sep, files = spec.partition("=")
            if not sep:
                raise UsageError(f"--group {spec!r} is not LABEL=FILES")
            paths = [Path(f) for f in files.split(",") if f]
            missing += [str(p) for p in paths if not p.exists()]
            groups[label] = paths
        if missing:
            raise FileNotFoundError("missing run files: " + ", ".join(missing))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            path = bench.plot_loss_curves({k: [_read_losses(p) for p in v] for k, v in groups.items()},
                                          out / "loss.svg")
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    else:
        missing = [str(p) for p in (args.checkpoint, args.data) if p is None or not Path(p).exists()]
        if missing:
            raise FileNotFoundError("missing inputs: " + ", ".join(missing or ["--checkpoint/--data"]))
        ds, _ = _load_checked(args.data)
        ckpt = Checkpoint.load(args.checkpoint)
        times, truth, qt, pred = bench.trajectory_prediction(ckpt, ds, args.index)
        path = bench.plot_trajectory(times, truth, qt, pred, out / f"trajectory_{args.index}.svg")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "bench-timing": cmd_bench_timing, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, TrainingError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        np.seterr(all="warn")


if __name__ == "__main__":
    sys.exit(main())
