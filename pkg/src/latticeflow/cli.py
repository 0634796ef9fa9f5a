"""Command line interface: generate, train, rollout, eval, bench.

Exit codes: 0 success, 1 user error (bad flags, files, shapes), 2 numeric
failure (solver instability, non-finite tensors, diverged training).

Heavy imports happen inside the subcommands so that --threads (or the
LATTICEFLOW_THREADS environment variable) can pin the BLAS worker count
before numpy loads; pinning is what makes timed runs and training
reproducible on a given machine.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

from .errors import NumericFailure, UserError

THREADS_ENV = "LATTICEFLOW_THREADS"


@dataclass
class BenchRow:
    """One benchmark measurement; mlups is recomputable from the other fields."""

    kind: str  # solver | surrogate | injected
    nx: int
    ny: int
    cells: int
    steps: int
    steps_equivalent: int
    reps: int
    median_seconds: float
    mlups: float


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def _pin_threads(n: int) -> None:
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latticeflow", description=__doc__)
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"pin BLAS worker count (default: ${THREADS_ENV} if set)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run the solver over random scenes into a dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--size", type=int, default=None, help="square grid shorthand for --nx/--ny")
    p.add_argument("--nx", type=int, default=64)
    p.add_argument("--ny", type=int, default=64)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--size-min", type=float, default=6.0)
    p.add_argument("--size-max", type=float, default=20.0)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--interval", type=int, default=120)
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--inlet-velocity", type=float, default=0.04)

    p = sub.add_parser("train", help="train the surrogate on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for checkpoints and history.csv")
    p.add_argument("--config", default=None, help="key=value file; flags override it")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--down-blocks", type=int, default=None)
    p.add_argument("--base-filters", type=int, default=None)
    p.add_argument("--comp-blocks", type=int, default=None)
    p.add_argument("--unroll-steps", type=int, default=None)
    p.add_argument("--lambda-gdl", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-interval", type=int, default=None)

    p = sub.add_parser("rollout", help="iterate a trained surrogate, writing frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", default=None, help="boundary mask .lblt file")
    p.add_argument("--scene-seed", type=int, default=None, help="generate the mask instead")
    p.add_argument("--nx", type=int, default=64)
    p.add_argument("--ny", type=int, default=64)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--size-min", type=float, default=6.0)
    p.add_argument("--size-max", type=float, default=20.0)
    p.add_argument("--inlet-velocity", type=float, default=0.04)
    p.add_argument(
        "--patch",
        default=None,
        metavar="X0,Y0,X1,Y1",
        help="decode only this half-open region via partial decoding",
    )

    p = sub.add_parser("eval", help="compare surrogate rollouts against dataset truth")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--self", dest="self_check", action="store_true",
                   help="score the truth against itself (no checkpoint needed)")

    p = sub.add_parser("bench", help="time solver steps and surrogate latent steps")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--steps", type=int, default=20, help="timed iterations per repetition")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup-reps", type=int, default=2)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--steps-equivalent", type=int, default=120,
                   help="solver steps one latent step stands in for")
    p.add_argument("--down-blocks", type=int, default=2)
    p.add_argument("--base-filters", type=int, default=16)
    p.add_argument("--comp-blocks", type=int, default=3)
    p.add_argument("--out", default=None, help="optional CSV path")
    p.add_argument("--inject-cells", type=int, default=None)
    p.add_argument("--inject-steps", type=int, default=None)
    p.add_argument("--inject-seconds", type=float, default=None)
    return parser


# --- generate -----------------------------------------------------------------


def cmd_generate(args) -> int:
    import numpy as np  # noqa: F401  (thread pinning happened in main)

    from .lbm import SolverConfig
    from .scenes import generate_dataset, save_dataset

    out = Path(args.out)
    if out.exists():
        raise UserError(f"output directory {out} already exists")
    nx = args.size if args.size is not None else args.nx
    ny = args.size if args.size is not None else args.ny
    cfg = SolverConfig(tau=args.tau, inlet_velocity=args.inlet_velocity)
    stats: dict = {}
    records = generate_dataset(
        n_runs=args.runs,
        dims=(nx, ny),
        cfg=cfg,
        object_count=args.objects,
        size_range=(args.size_min, args.size_max),
        warmup_steps=args.warmup,
        frames_per_run=args.frames,
        interval=args.interval,
        seed=args.seed,
        stats=stats,
    )
    partial = Path(str(out) + ".partial")
    save_dataset(records, partial, seed=args.seed)
    partial.replace(out)
    if not records:
        print(f"warning: empty dataset (runs=0) written to {out}")
    print(
        f"generated runs={len(records)} frames={args.frames} "
        f"discarded={stats.get('discarded', 0)} dir={out}"
    )
    return 0


# --- train ----------------------------------------------------------------------


def _read_config_file(path: Path) -> dict[str, str]:
    if not path.exists():
        raise UserError(f"config file {path} not found")
    kv: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UserError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    return kv


def _merge_train_config(args) -> tuple["object", dict]:
    """Defaults < config file < explicit flags, for train and model fields."""
    from .surrogate import ModelConfig
    from .training import TrainConfig

    train_kv: dict = {}
    model_kv: dict = {}
    if args.config:
        file_kv = _read_config_file(Path(args.config))
        train_names = {f.name for f in dataclass_fields(TrainConfig)}
        model_names = {f.name for f in dataclass_fields(ModelConfig)}
        for key, value in file_kv.items():
            if key in train_names:
                train_kv[key] = value
            elif key in model_names:
                model_kv[key] = value
            else:
                raise UserError(f"unknown config key {key!r} in {args.config}")
    flag_map = {
        "unroll_steps": args.unroll_steps,
        "lambda_gdl": args.lambda_gdl,
        "lr": args.lr,
        "beta1": args.beta1,
        "beta2": args.beta2,
        "eps": args.eps,
        "batch_size": args.batch_size,
        "max_steps": args.max_steps,
        "seed": args.seed,
        "eval_interval": args.eval_interval,
    }
    for key, value in flag_map.items():
        if value is not None:
            train_kv[key] = value
    for key, value in (
        ("down_blocks", args.down_blocks),
        ("base_filters", args.base_filters),
        ("comp_blocks", args.comp_blocks),
    ):
        if value is not None:
            model_kv[key] = value
    field_types = {f.name: f.type for f in dataclass_fields(TrainConfig)}
    coerced = {}
    for key, value in train_kv.items():
        caster = int if field_types[key] == "int" else float
        coerced[key] = caster(value)
    train_cfg = TrainConfig(**coerced)
    model_cfg = ModelConfig(**{k: int(v) for k, v in model_kv.items()})
    return train_cfg, model_cfg


def cmd_train(args) -> int:
    from .checkpoint import load_model, save_checkpoint
    from .scenes import load_dataset
    from .surrogate import Surrogate
    from .training import train

    records = load_dataset(args.data)
    train_cfg, model_cfg = _merge_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model, start_step = load_model(args.resume)
    else:
        model, start_step = Surrogate(model_cfg, seed=train_cfg.seed), 0

    def write_ckpt(step: int, name: str | None = None) -> None:
        save_checkpoint(out / (name or f"ckpt_{step:06d}.lnck"), model, train_step=step)

    history = train(
        records,
        train_cfg,
        model,
        start_step=start_step,
        checkpoint_cb=write_ckpt,
    )
    write_ckpt(start_step + train_cfg.max_steps, "ckpt_final.lnck")
    history_path = out / "history.csv"
    new_file = not history_path.exists()
    with history_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["step", "total_loss", "mse", "gdl", "wall_seconds"])
        for rec in history:
            writer.writerow(
                [rec.step, repr(rec.total), repr(rec.mse), repr(rec.gdl), f"{rec.wall_seconds:.6f}"]
            )
    if history:
        print(
            f"trained steps {history[0].step}..{history[-1].step}, "
            f"final loss {history[-1].total:.6g}, checkpoints in {out}"
        )
    else:
        print(f"no optimizer steps requested; initial checkpoint written to {out}")
    return 0


# --- rollout --------------------------------------------------------------------


def _parse_patch(text: str) -> tuple[int, int, int, int]:
    try:
        x0, y0, x1, y1 = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UserError(f"--patch expects X0,Y0,X1,Y1 integers, got {text!r}") from exc
    return x0, y0, x1, y1


def cmd_rollout(args) -> int:
    import numpy as np

    from .checkpoint import load_model
    from .lbm import uniform_state
    from .scenes import random_scene, rasterize
    from .snapshot import load_mask, save_mask, save_snapshot

    model, _ = load_model(args.checkpoint)
    if (args.mask is None) == (args.scene_seed is None):
        raise UserError("provide exactly one of --mask or --scene-seed")
    if args.mask:
        mask = load_mask(args.mask)
    else:
        scene = random_scene(
            (args.nx, args.ny), args.objects, (args.size_min, args.size_max), args.scene_seed
        )
        mask = rasterize(scene)
    f0 = uniform_state(mask, rho=1.0, u=(args.inlet_velocity, 0.0)).f.astype(np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mask(out / "mask.lblt", mask)
    if args.patch:
        region = _parse_patch(args.patch)
        result = model.rollout(f0, mask.solid, args.steps, decode_frames=False)
        for t, g in enumerate(result.latents):
            save_snapshot(out / f"patch_{t:04d}.lblt", model.decode_patch(g, region))
        print(f"wrote {len(result.latents)} patch files for region {region} to {out}")
    else:
        result = model.rollout(f0, mask.solid, args.steps, decode_frames=True)
        for t, frame in enumerate(result.frames):
            save_snapshot(out / f"frame_{t:04d}.lblt", frame)
        print(f"wrote {len(result.frames)} frames to {out}")
    return 0


# --- eval ----------------------------------------------------------------------


def write_report_csvs(report, out_dir: Path) -> None:
    """per_step.csv: one row per run per step; aggregate.csv: cross-run mean/std."""
    vector_series = {"drag_generated", "drag_true", "flux_generated", "flux_true"}
    with (out_dir / "per_step.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["run", "step", "mse", "div_generated", "div_true"]
        for name in sorted(vector_series):
            header += [f"{name}_x", f"{name}_y"]
        writer.writerow(header)
        runs = report.mse.shape[0]
        for r in range(runs):
            for t in range(report.horizon):
                row = [
                    r,
                    t + 1,
                    repr(float(report.mse[r, t])),
                    repr(float(report.div_generated[r, t])),
                    repr(float(report.div_true[r, t])),
                ]
                for name in sorted(vector_series):
                    series = getattr(report, name)
                    row += [repr(float(series[r, t, 0])), repr(float(series[r, t, 1]))]
                writer.writerow(row)
    with (out_dir / "aggregate.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["step"]
        columns = []
        for name in report.SERIES:
            mean, std = report.aggregate(name)
            if name in vector_series:
                for axis, label in enumerate(("x", "y")):
                    header += [f"{name}_{label}_mean", f"{name}_{label}_std"]
                    columns.append(mean[:, axis])
                    columns.append(std[:, axis])
            else:
                header += [f"{name}_mean", f"{name}_std"]
                columns.append(mean)
                columns.append(std)
        writer.writerow(header)
        for t in range(report.horizon):
            writer.writerow([t + 1] + [repr(float(col[t])) for col in columns])


def cmd_eval(args) -> int:
    from .checkpoint import load_model
    from .scenes import load_dataset
    from .training import evaluate

    records = load_dataset(args.data)
    if args.self_check:
        model = None
    elif args.checkpoint:
        model, _ = load_model(args.checkpoint)
    else:
        raise UserError("provide --checkpoint, or --self for a truth-vs-truth report")
    available = min(len(r.frames) for r in records) - 1 if records else 0
    horizon = args.horizon if args.horizon is not None else available
    report = evaluate(model, records, horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csvs(report, out)
    failures = [(r, s) for r, s in enumerate(report.failure_steps) if s is not None]
    print(f"evaluated {len(records)} runs over horizon {horizon}; reports in {out}")
    if failures:
        for r, s in failures:
            print(f"run {r} diverged at latent step {s}", file=sys.stderr)
        raise NumericFailure(f"{len(failures)} of {len(records)} rollouts diverged")
    return 0


# --- bench ----------------------------------------------------------------------


def bench_solver(size: int, steps: int, reps: int, warmup_reps: int, tau: float) -> BenchRow:
    import time

    import numpy as np

    from .lbm import BoundaryMask, SolverConfig, mlups, step, uniform_state

    mask = BoundaryMask.empty(size, size)
    cfg = SolverConfig(tau=tau)
    state = uniform_state(mask, rho=1.0, u=(cfg.inlet_velocity, 0.0))
    times = []
    for rep in range(warmup_reps + reps):
        t0 = time.perf_counter()
        for _ in range(steps):
            state = step(state, mask, cfg)
        elapsed = time.perf_counter() - t0
        if rep >= warmup_reps:
            times.append(elapsed)
    median = float(np.median(times))
    return BenchRow(
        kind="solver",
        nx=size,
        ny=size,
        cells=size * size,
        steps=steps,
        steps_equivalent=1,
        reps=reps,
        median_seconds=median,
        mlups=mlups(size * size, steps, median),
    )


def bench_surrogate(
    size: int,
    steps: int,
    reps: int,
    warmup_reps: int,
    steps_equivalent: int,
    model_cfg,
) -> BenchRow:
    import time

    import numpy as np

    from .autodiff import no_grad
    from .lbm import mlups
    from .surrogate import Surrogate

    model = Surrogate(model_cfg, seed=0)
    rng = np.random.Generator(np.random.PCG64(0))
    f0 = rng.uniform(0.0, 0.5, size=(size, size, model_cfg.input_channels)).astype(np.float32)
    mask = np.zeros((size, size, 1), dtype=np.float32)
    with no_grad():
        g = model.encode_flow(f0)
        gates = model.encode_boundary(mask)
        times = []
        for rep in range(warmup_reps + reps):
            t0 = time.perf_counter()
            h = g
            for _ in range(steps):
                h = model.compress_step(h, gates)
            elapsed = time.perf_counter() - t0
            if rep >= warmup_reps:
                times.append(elapsed)
    median = float(np.median(times))
    return BenchRow(
        kind="surrogate",
        nx=size,
        ny=size,
        cells=size * size,
        steps=steps,
        steps_equivalent=steps_equivalent,
        reps=reps,
        median_seconds=median,
        mlups=mlups(size * size, steps * steps_equivalent, median),
    )


def _write_bench_csv(rows: list[BenchRow], path: Path | None) -> None:
    header = [
        "kind",
        "nx",
        "ny",
        "cells",
        "steps",
        "steps_equivalent",
        "reps",
        "median_seconds",
        "mlups",
    ]
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            f"{row.kind},{row.nx},{row.ny},{row.cells},{row.steps},"
            f"{row.steps_equivalent},{row.reps},{row.median_seconds!r},{row.mlups!r}"
        )
    text = "\n".join(lines)
    print(text)
    if path is not None:
        path.write_text(text + "\n")


def cmd_bench(args) -> int:
    from .lbm import mlups
    from .surrogate import ModelConfig

    inject = (args.inject_cells, args.inject_steps, args.inject_seconds)
    rows: list[BenchRow] = []
    if any(v is not None for v in inject):
        if any(v is None for v in inject):
            raise UserError("--inject-cells, --inject-steps, --inject-seconds go together")
        rows.append(
            BenchRow(
                kind="injected",
                nx=0,
                ny=0,
                cells=args.inject_cells,
                steps=args.inject_steps,
                steps_equivalent=1,
                reps=0,
                median_seconds=args.inject_seconds,
                mlups=mlups(args.inject_cells, args.inject_steps, args.inject_seconds),
            )
        )
    else:
        model_cfg = ModelConfig(
            down_blocks=args.down_blocks,
            base_filters=args.base_filters,
            comp_blocks=args.comp_blocks,
        )
        rows.append(bench_solver(args.size, args.steps, args.reps, args.warmup_reps, args.tau))
        rows.append(
            bench_surrogate(
                args.size, args.steps, args.reps, args.warmup_reps,
                args.steps_equivalent, model_cfg,
            )
        )
    _write_bench_csv(rows, Path(args.out) if args.out else None)
    return 0


# --- entry ----------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = args.threads
        if threads is None and os.environ.get(THREADS_ENV):
            threads = int(os.environ[THREADS_ENV])
        if threads is not None:
            _pin_threads(threads)
        handler = {
            "generate": cmd_generate,
            "train": cmd_train,
            "rollout": cmd_rollout,
            "eval": cmd_eval,
            "bench": cmd_bench,
        }[args.command]
        return handler(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
