"""Command-line entry point.

Five subcommands: `project` (per-GPU step time, spill bandwidth, lifespan),
`simulate` (run the offload engine on a synthetic workload), `rok`
(strategy/batch grid), `validate` (activation estimates against the built-in
references), and `scaling` (fitted growth exponents). Every run writes CSV
artifacts plus one manifest.json describing the resolved configuration, and
identical config + seed reproduce CSV outputs byte for byte.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 validation
deviation beyond tolerance.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import fields as dataclass_fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .activations import ActivationProfile, activations_per_step
from .config import (
    HardwareConfig,
    ModelConfig,
    ParallelismConfig,
    RunConfig,
    config_as_dict,
    load_config_file,
)
from .errors import ActspillError, InvalidConfig
from .harness import (
    DEFAULT_SHRINK,
    build_workload,
    plan_offload_budget,
    peak_memory,
    run_training,
)
from .perf import (
    CANONICAL_VALIDATION_POINTS,
    activation_scaling_sweep,
    build_projection,
    canonical_validation_config,
    checkpointed_scaling_sweep,
    large_model_projections,
    others_scaling_sweep,
    scaling_exponent_fit,
)
from .rok import rok_curve
from .storage import ThrottleSpec

STORAGE_ROOT_ENV = "ACTSPILL_STORAGE_ROOT"
GIB = 2 ** 30

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VALIDATION = 3


def _default_run_config() -> RunConfig:
    model, par = canonical_validation_config(12288, 3)
    return RunConfig(model=model, parallelism=par, hardware=HardwareConfig())


def _load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return _default_run_config()
    return load_config_file(path)


def _profile(run: RunConfig) -> ActivationProfile:
    return ActivationProfile.from_dict(run.activation_profile)


def _throttle(run: RunConfig) -> ThrottleSpec:
    return ThrottleSpec(**run.storage)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


class _Manifest:
    """One per run, written next to the outputs."""

    def __init__(self, subcommand: str, run: RunConfig, out_dir: Path,
                 args: argparse.Namespace):
        self.started = time.monotonic()
        self.data = {
            "subcommand": subcommand,
            "tool_version": __version__,
            "config": config_as_dict(run),
            "flags": {
                "config": getattr(args, "config", None),
                "seed": getattr(args, "seed", None),
                "shrink": getattr(args, "shrink", None),
                "clock": getattr(args, "clock", None),
            },
            "outputs": [],
        }
        self.out_dir = out_dir

    def add_output(self, path: Path, columns: Sequence[str]) -> None:
        self.data["outputs"].append(
            {"path": path.name, "columns": list(columns)}
        )

    def write(self) -> Path:
        self.data["wall_time_s"] = time.monotonic() - self.started
        path = self.out_dir / "manifest.json"
        with path.open("w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _emit(manifest: _Manifest, name: str, columns: Sequence[str],
          rows: Sequence[Sequence]) -> Path:
    path = manifest.out_dir / name
    _write_csv(path, columns, rows)
    manifest.add_output(path, columns)
    return path


# -- subcommands --------------------------------------------------------------

def _cmd_project(args: argparse.Namespace) -> int:
    run = _load_run_config(args.config)
    manifest = _Manifest("project", run, Path(args.out), args)
    if args.config is None:
        projections = large_model_projections()
    else:
        projections = [
            build_projection(run.model, run.parallelism, run.hardware,
                             _profile(run), name="config")
        ]
    columns = (
        "name", "gpus", "tp", "pp", "dp", "zero_stage", "step_time_s",
        "forward_time_s", "act_bytes_per_gpu", "required_write_bw_gbs",
        "lifespan_years", "max_act_bytes",
    )
    rows = []
    for p in projections:
        par = p.parallelism
        rows.append((
            p.name, par.gpus(), par.tp_degree, par.pp_degree, par.dp_degree,
            par.zero_stage, repr(p.step_time_s), repr(p.forward_time_s),
            repr(p.activations_per_gpu), repr(p.required_write_bw / 1e9),
            repr(p.lifespan_years), repr(p.max_activations),
        ))
    _emit(manifest, "projections.csv", columns, rows)
    manifest.write()
    for p in projections:
        print(
            f"{p.name}: step {p.step_time_s:.2f} s, "
            f"{p.activations_per_gpu / 1e9:.1f} GB activations/GPU/step, "
            f"write {p.required_write_bw / 1e9:.2f} GB/s, "
            f"lifespan {p.lifespan_years:.2f} years"
        )
    return EXIT_OK


def _cmd_simulate(args: argparse.Namespace) -> int:
    run = _load_run_config(args.config)
    manifest = _Manifest("simulate", run, Path(args.out), args)
    prof = _profile(run)
    throttle = _throttle(run)
    workload = build_workload(
        run.model, run.parallelism, prof, run.hardware, shrink=args.shrink
    )
    plan = plan_offload_budget(
        workload, throttle.write_bw,
        microbatches=run.parallelism.num_microbatches, shrink=args.shrink,
    )
    storage_root = None
    if args.clock == "real":
        storage_root = os.environ.get(STORAGE_ROOT_ENV) or str(
            Path(args.out) / "storage"
        )
    metrics, trace = run_training(
        workload, plan, args.clock, run.parallelism.num_microbatches,
        steps=args.steps, throttle=throttle, storage_root=storage_root,
        seed=args.seed,
    )
    trace_path = manifest.out_dir / "trace.csv"
    trace.to_csv(trace_path)
    manifest.add_output(trace_path, ("time_s", "event", "subject", "bytes"))
    columns = (
        "step", "step_time_s", "peak_activation_bytes", "offloaded_bytes",
        "forwarded", "backend_reads", "backend_writes",
    )
    rows = [
        (i + 1, repr(s.step_time), s.peak_activation_bytes,
         repr(s.offloaded_bytes), s.forwarded_count, s.backend_reads,
         s.backend_writes)
        for i, s in enumerate(metrics)
    ]
    _emit(manifest, "metrics.csv", columns, rows)
    manifest.write()
    replayed = peak_memory(trace)
    for i, s in enumerate(metrics):
        print(
            f"step {i + 1}: {s.step_time:.4f} s, peak "
            f"{s.peak_activation_bytes:,} B, offloaded {s.offloaded_bytes:,.0f} B, "
            f"{s.backend_writes} writes / {s.backend_reads} reads, "
            f"{s.forwarded_count} forwarded"
        )
    print(f"trace replay peak: {replayed:,} B")
    return EXIT_OK


def _cmd_rok(args: argparse.Namespace) -> int:
    run = _load_run_config(args.config)
    manifest = _Manifest("rok", run, Path(args.out), args)
    try:
        batches = [int(b) for b in args.batches.split(",") if b.strip()]
    except ValueError:
        raise InvalidConfig([f"--batches: cannot parse {args.batches!r}"]) from None
    if not batches or any(b < 1 for b in batches):
        raise InvalidConfig([f"--batches: need positive integers, got {args.batches!r}"])
    notes: list[str] = []
    points = rok_curve(
        run.model, run.parallelism, _profile(run), run.hardware,
        batches, notes=notes,
    )
    columns = ("strategy", "batch", "peak_gib", "throughput_tflops", "step_time_s")
    rows = [
        (p.strategy.kind, p.batch_size, repr(p.peak_bytes / GIB),
         repr(p.model_throughput / 1e12), repr(p.step_time))
        for p in points
    ]
    _emit(manifest, "rok.csv", columns, rows)
    manifest.write()
    for p in points:
        print(
            f"{p.strategy.kind:>20s} @ batch {p.batch_size:>3d}: "
            f"peak {p.peak_bytes / GIB:6.2f} GiB, "
            f"{p.model_throughput / 1e12:7.2f} TFLOP/s, "
            f"step {p.step_time:.3f} s"
        )
    for note in notes:
        print(f"skipped: {note}")
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    run = _load_run_config(args.config)
    manifest = _Manifest("validate", run, Path(args.out), args)
    prof = _profile(run)
    columns = ("name", "hidden_dim", "layers", "estimate_gib",
               "reference_gib", "deviation_pct")
    rows = []
    worst = 0.0
    lines = []
    for name, hidden, layers, reference in CANONICAL_VALIDATION_POINTS:
        model, par = canonical_validation_config(hidden, layers)
        estimate = activations_per_step(model, par, prof) / GIB
        deviation = (estimate - reference) / reference * 100.0
        worst = max(worst, abs(deviation))
        rows.append((name, hidden, layers, repr(estimate), repr(reference),
                     repr(deviation)))
        lines.append(
            f"{name:>16s}: estimate {estimate:6.2f} GiB, "
            f"reference {reference:6.2f} GiB, deviation {deviation:+.1f}%"
        )
    _emit(manifest, "validation.csv", columns, rows)
    manifest.write()
    for line in lines:
        print(line)
    if worst > 10.0:
        print(f"FAIL: worst deviation {worst:.1f}% exceeds 10%")
        return EXIT_VALIDATION
    print(f"OK: worst deviation {worst:.1f}% within 10%")
    return EXIT_OK


def _cmd_scaling(args: argparse.Namespace) -> int:
    run = _load_run_config(args.config)
    manifest = _Manifest("scaling", run, Path(args.out), args)
    sweeps = (
        ("activations", activation_scaling_sweep()),
        ("weights_gradients_optimizer", others_scaling_sweep()),
        ("checkpointed_activations", checkpointed_scaling_sweep()),
    )
    columns = ("sweep", "exponent")
    rows = []
    for name, points in sweeps:
        exponent = scaling_exponent_fit(points)
        rows.append((name, repr(exponent)))
        print(f"{name}: size grows as C^{exponent:.4f}")
    _emit(manifest, "scaling.csv", columns, rows)
    manifest.write()
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file (defaults built in)")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=0, help="payload RNG seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actspill",
        description="Activation offload modeling and simulation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("project", help="step time, bandwidth, and lifespan per config")
    _add_common(p)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("simulate", help="run the offload engine on a synthetic workload")
    _add_common(p)
    p.add_argument("--shrink", type=float, default=DEFAULT_SHRINK,
                   help="divide sizes and times by this factor")
    p.add_argument("--clock", choices=("virtual", "real"), default="virtual")
    p.add_argument("--steps", type=int, default=2, help="training steps to run")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("rok", help="recompute/offload/keep strategy grid")
    _add_common(p)
    p.add_argument("--batches", default="8,16,32",
                   help="comma-separated micro-batch sizes")
    p.set_defaults(func=_cmd_rok)

    p = sub.add_parser("validate", help="activation estimates vs built-in references")
    _add_common(p)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("scaling", help="fitted growth exponents")
    _add_common(p)
    p.set_defaults(func=_cmd_scaling)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except InvalidConfig as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ActspillError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
