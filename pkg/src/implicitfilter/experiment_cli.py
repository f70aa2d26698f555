"""Command-line harness: named experiments, CSV artifacts, and run manifests."""

from __future__ import annotations

import argparse
import inspect
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from implicitfilter import __version__
from implicitfilter.config import RunConfig, workers_from_env
from implicitfilter.constants import (
    DEFAULT_OUTPUT_DIR,
    FAST_REPEATS,
    LOG_FILE_NAME,
    MANIFEST_FILE_NAME,
)
from implicitfilter.errors import ConfigError, ImplicitFilterError
from implicitfilter.tables import EXPERIMENTS, Table
from implicitfilter.utils.csv_io import git_describe, write_manifest
from implicitfilter.utils.logging_setup import reset_logging, setup_logging

logger = logging.getLogger("implicitfilter")

_STATIC = {"b": float, "sigma": float, "s": float}

# Override keys each experiment accepts, with their types
SCHEMAS: dict[str, dict[str, type]] = {
    "table1": {
        "particles": list,
        "repeats": int,
        "sigma": float,
        "s": float,
        "delta": float,
        "n_steps": int,
    },
    "table2": {**_STATIC, "samples": int, "bins": int},
    "table3": {"particles": int, "repeats": int, "sigma": float, "s": float},
    "table4": {**_STATIC, "samples": int, "bins": int},
    "table5": {"particles": int, "repeats": int, "sigma": float, "s": float},
    "table6": {
        "sigma_star": float,
        "initial_ratio": float,
        "particles": int,
        "n_steps": int,
        "segment_length": int,
        "iterations": int,
        "repeats": int,
        "update": str,
    },
    "figure_data": {**_STATIC, "particles": int, "delta": float},
}


def _check_value(name: str, key: str, value: Any, expected: type) -> Any:
    if expected is list:
        # a list of ints; a bare int is a one-element list
        items = value if isinstance(value, list) else [value]
        return [_check_value(name, key, item, int) for item in items]
    if isinstance(value, bool):
        raise ConfigError(f"{name}: {key} must be {expected.__name__}, got a boolean")
    if expected is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, expected):
        raise ConfigError(
            f"{name}: {key} must be {expected.__name__}, got {type(value).__name__} {value!r}"
        )
    return value


@dataclass
class ExperimentSpec:
    """A named experiment with type-checked parameter overrides."""

    name: str
    overrides: dict[str, Any] = field(default_factory=dict)
    output_dir: Path = DEFAULT_OUTPUT_DIR
    seed: int = 0
    fast: bool = False
    n_workers: int = 1

    def __post_init__(self) -> None:
        if self.name not in SCHEMAS:
            raise ConfigError(f"Unknown experiment {self.name!r}; expected one of {list(SCHEMAS)}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        schema = SCHEMAS[self.name]
        checked = {}
        for key, value in self.overrides.items():
            if key not in schema:
                raise ConfigError(
                    f"{self.name} does not take {key!r}; expected one of {sorted(schema)}"
                )
            checked[key] = _check_value(self.name, key, value, schema[key])
        self.overrides = checked
        self.output_dir = Path(self.output_dir)

    @classmethod
    def from_run_config(cls, cfg: RunConfig, n_workers: int = 1) -> ExperimentSpec:
        return cls(
            name=cfg.experiment,
            overrides=dict(cfg.overrides),
            output_dir=Path(cfg.output_dir),
            seed=cfg.seed,
            fast=cfg.fast,
            n_workers=n_workers,
        )

    def arguments(self) -> dict[str, Any]:
        """Keyword arguments of the experiment function; --fast caps large repeat counts."""
        args = dict(self.overrides)
        if self.fast and "repeats" not in args:
            default = inspect.signature(EXPERIMENTS[self.name]).parameters.get("repeats")
            if default is not None and default.default > FAST_REPEATS:
                args["repeats"] = FAST_REPEATS
        return args


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------
def _compute(spec: ExperimentSpec) -> tuple[list[Path], dict[str, Any]]:
    args = spec.arguments()
    tables: list[Table] = EXPERIMENTS[spec.name](
        seed=spec.seed, n_workers=spec.n_workers, **args
    )
    return [table.write(spec.output_dir) for table in tables], args


def _write_run_manifest(
    spec: ExperimentSpec, args: dict[str, Any], files: list[Path], wall_time: float
) -> Path:
    payload = {
        "experiment": spec.name,
        "seed": spec.seed,
        "parameters": args,
        "fast": spec.fast,
        "n_workers": spec.n_workers,
        "version": __version__,
        "git_describe": git_describe(),
        "wall_time_seconds": round(wall_time, 3),
        "files": [path.name for path in files],
    }
    return write_manifest(spec.output_dir / MANIFEST_FILE_NAME, payload)


def emit_figure_data(spec: ExperimentSpec) -> list[Path]:
    """Write the potential grid, one seeded reconstruction, and the F / F0 grid."""
    if spec.name != "figure_data":
        raise ConfigError(f"emit_figure_data needs the figure_data experiment, got {spec.name!r}")
    files, _ = _compute(spec)
    return files


def run_experiment(spec: ExperimentSpec) -> int:
    """Run ``spec``, write its CSVs and manifest; returns the process exit code."""
    logger.info(
        "Running %s (seed=%d, workers=%d, overrides=%s)",
        spec.name,
        spec.seed,
        spec.n_workers,
        spec.overrides,
    )
    started = time.perf_counter()
    try:
        files, args = _compute(spec)
    except ImplicitFilterError as exc:
        logger.error("Experiment %s failed: %s", spec.name, exc)
        return 1
    wall_time = time.perf_counter() - started
    _write_run_manifest(spec, args, files, wall_time)
    logger.info("Finished %s in %.1fs: %s", spec.name, wall_time, [p.name for p in files])
    return 0


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------
def _parse_assignment(text: str) -> tuple[str, Any]:
    """``KEY=VALUE`` with VALUE read as JSON when possible (so 1.5 is a float)."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ipf", description="Implicit particle filter experiments."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one experiment and write its CSV files")
    run.add_argument("experiment", nargs="?", choices=list(SCHEMAS), help="experiment name")
    run.add_argument("--seed", type=int, help="master seed (default 0)")
    run.add_argument(
        "--particles",
        type=int,
        nargs="+",
        metavar="M",
        help="number of particles; table1 adds one or more sizes to its standard list",
    )
    run.add_argument("--repeats", type=int, help="number of repeats or trials")
    run.add_argument("--fast", action="store_true", help=f"cap repeats at {FAST_REPEATS}")
    run.add_argument("--out", type=Path, help=f"output directory (default {DEFAULT_OUTPUT_DIR})")
    run.add_argument("--config", type=Path, help="JSON run configuration")
    run.add_argument(
        "--set",
        dest="assignments",
        action="append",
        default=[],
        type=_parse_assignment,
        metavar="KEY=VALUE",
        help="any other parameter override, e.g. --set b=1.5",
    )

    commands.add_parser("list", help="list the available experiments")
    return parser


def _spec_from_args(args: argparse.Namespace, parser: argparse.ArgumentParser) -> ExperimentSpec:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.experiment is None and args.config is None:
        parser.error("run needs an experiment name or --config")

    overrides = dict(cfg.overrides)
    overrides.update(dict(args.assignments))
    if args.particles is not None:
        overrides["particles"] = args.particles[0] if len(args.particles) == 1 else args.particles
    if args.repeats is not None:
        overrides["repeats"] = args.repeats

    return ExperimentSpec(
        name=args.experiment or cfg.experiment,
        overrides=overrides,
        output_dir=args.out or Path(cfg.output_dir),
        seed=cfg.seed if args.seed is None else args.seed,
        fast=args.fast or cfg.fast,
        n_workers=workers_from_env(),
    )


def _list_experiments() -> None:
    for name, fn in EXPERIMENTS.items():
        summary = (inspect.getdoc(fn) or "").splitlines()
        keys = ", ".join(SCHEMAS[name])
        print(f"{name:<12} {summary[0] if summary else ''}")
        print(f"{'':<12} parameters: {keys}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list":
        _list_experiments()
        return 0

    try:
        spec = _spec_from_args(args, parser)
    except ConfigError as exc:
        parser.error(str(exc))

    spec.output_dir.mkdir(parents=True, exist_ok=True)
    reset_logging()
    setup_logging(
        level=logging.DEBUG if args.verbose else logging.INFO,
        log_path=spec.output_dir / LOG_FILE_NAME,
    )
    return run_experiment(spec)
