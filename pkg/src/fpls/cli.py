"""Command-line interface: ``fpls {fit,test,confset,simulate,power,nulldist}``.

Settings resolve as command-line flag, then ``--config`` file, then built-in
default. Exit status is 0 on success, 2 for bad input and 3 for numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .cgpls import StoppingConfig, fit_early_stopped, load_config, write_fit
from .fspace import DatasetFormatError, FunctionVec, Grid, read_dataset_csv
from .inference import (
    Method,
    confidence_set,
    prepare_inference,
    write_confidence_set,
    write_test_report,
)
from .simlab import ModelSpec, estimation_campaign, null_distribution_sample, power_curve

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

COMMANDS = ("fit", "test", "confset", "simulate", "power", "nulldist")

_EXTRA_KEYS = {
    "alpha": float,
    "m": int,
    "method": str,
    "n_sims": int,
    "n_boot": int,
    "seed": int,
    "threads": int,
    "model": str,
    "n": int,
    "reps": int,
    "deltas": str,
    "basis_size": int,
    "grid": str,
    "b": str,
}

_DEFAULTS = {
    "alpha": 0.05,
    "m": None,
    "method": "spectrum",
    "n_sims": 50_000,
    "n_boot": 500,
    "seed": None,
    "threads": None,
    "model": "m1",
    "n": 100,
    "reps": 500,
    "deltas": "-1,-0.5,0,0.5,1",
    "basis_size": 5,
    "grid": "0,4.5,20",
    "b": "zero",
}

_STOPPING_KEYS = tuple(f.name for f in fields(StoppingConfig))


class InputError(Exception):
    """Invalid user input; maps to exit status 2."""


@dataclass
class RunConfig:
    command: str
    input_path: Path | None
    output_dir: Path
    stopping: StoppingConfig
    alpha: float
    m: int | None
    method: Method
    n_sims: int
    n_boot: int
    model: str
    n: int
    reps: int
    seed: int
    seed_chosen: bool
    threads: int
    deltas: list = field(default_factory=list)
    basis_size: int = 5
    grid: tuple = (0.0, 4.5, 20)
    b: str = "zero"


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", type=Path, help="dataset CSV with columns y, x_000, ...")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--config", type=Path, help="key=value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker processes (env FPLS_THREADS)")
    common.add_argument("--tau", type=float)
    common.add_argument("--delta", type=float, help="confidence level of the stopping rule")
    common.add_argument("--xi", type=float)
    common.add_argument("--k-max", dest="k_max", type=int)
    common.add_argument("--m-cap", dest="m_cap", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--m", type=int, help="PLS components for inference (default min(70, rank))")
    common.add_argument("--method", choices=[m.value for m in Method])
    common.add_argument("--n-sims", dest="n_sims", type=int)
    common.add_argument("--n-boot", dest="n_boot", type=int)
    common.add_argument("--model", choices=["m1", "m2", "m3"])
    common.add_argument("--n", type=int)
    common.add_argument("--reps", type=int)
    common.add_argument("--deltas", help="comma-separated shifts for the power curve")
    common.add_argument("--b", help="hypothesized slope: CSV path or 'zero'")
    common.add_argument("--basis-size", dest="basis_size", type=int)
    common.add_argument("--grid", help="lo,hi,count per coefficient axis")

    parser = argparse.ArgumentParser(prog="fpls", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fit": "early-stopped PLS estimate",
        "test": "test H0: beta = b",
        "confset": "confidence set over a cosine-coefficient lattice",
        "simulate": "estimation campaign on a simulation model",
        "power": "rejection rates along beta + delta * s",
        "nulldist": "finite-sample null distribution of the statistic",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _positive(name, value, allow_none=False):
    if value is None and allow_none:
        return
    if value is None or value < 1:
        raise InputError(f"--{name.replace('_', '-')} must be a positive integer, got {value}")


def _parse_floats(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--{name} expects comma-separated numbers, got {text!r}")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge flags, config file and defaults, validating every field."""
    file_values = {}
    if args.config is not None:
        try:
            file_values = load_config(args.config, _EXTRA_KEYS)
        except FileNotFoundError:
            raise InputError(f"config file not found: {args.config}")
        except ValueError as exc:
            raise InputError(str(exc))

    def pick(key):
        v = getattr(args, key, None)
        if v is not None:
            return v
        if key in file_values:
            return file_values[key]
        return _DEFAULTS.get(key)

    stop_kw = {k: pick(k) for k in _STOPPING_KEYS if pick(k) is not None}
    try:
        stopping = StoppingConfig(**stop_kw)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc))

    alpha = pick("alpha")
    if not 0 < alpha < 1:
        raise InputError(f"--alpha must lie in (0, 1), got {alpha}")
    try:
        method = Method(pick("method"))
    except ValueError:
        raise InputError(f"unknown method {pick('method')!r}")
    model = pick("model")
    if model not in ("m1", "m2", "m3"):
        raise InputError(f"unknown model {model!r}")
    for key in ("n_sims", "n_boot", "reps", "basis_size"):
        _positive(key, pick(key))
    _positive("m", pick("m"), allow_none=True)
    n = pick("n")
    if n is None or n < 2:
        raise InputError(f"--n must be >= 2, got {n}")

    threads = pick("threads")
    if threads is None:
        env = os.environ.get("FPLS_THREADS")
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise InputError(f"FPLS_THREADS must be an integer, got {env!r}")
    _positive("threads", threads)

    seed = pick("seed")
    chosen = seed is None
    if chosen:
        seed = int(np.random.SeedSequence().entropy % (2**31))

    grid = _parse_floats(pick("grid"), "grid")
    if len(grid) != 3:
        raise InputError("--grid expects lo,hi,count")

    return RunConfig(
        command=args.command,
        input_path=args.input,
        output_dir=args.out,
        stopping=stopping,
        alpha=alpha,
        m=pick("m"),
        method=method,
        n_sims=pick("n_sims"),
        n_boot=pick("n_boot"),
        model=model,
        n=n,
        reps=pick("reps"),
        seed=seed,
        seed_chosen=chosen,
        threads=threads,
        deltas=_parse_floats(pick("deltas"), "deltas"),
        basis_size=pick("basis_size"),
        grid=(grid[0], grid[1], int(grid[2])),
        b=pick("b"),
    )


def _load_input(cfg: RunConfig):
    if cfg.input_path is None:
        raise InputError(f"{cfg.command} needs --input")
    path = Path(cfg.input_path)
    if not path.is_file():
        raise InputError(f"input file not found: {path}")
    return read_dataset_csv(path)


def _load_b(spec: str, grid: Grid) -> FunctionVec:
    if spec == "zero":
        return grid.zeros()
    path = Path(spec)
    if not path.is_file():
        raise InputError(f"b file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty b file")
    header = [h.strip() for h in rows[0]]
    col = next((header.index(c) for c in ("beta", "value", "b") if c in header), None)
    if col is None:
        raise InputError(f"{path}: line 1: need a column named beta, value or b")
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            values.append(float(row[col]))
        except (ValueError, IndexError):
            raise InputError(f"{path}: line {lineno}: bad value")
    if len(values) != grid.t_count:
        raise InputError(f"{path}: b has {len(values)} grid values, data has {grid.t_count}")
    try:
        return FunctionVec(grid, values)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}")


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _seed_info(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "seed_chosen": cfg.seed_chosen}


def cmd_fit(cfg: RunConfig) -> int:
    data = _load_input(cfg)
    fit = fit_early_stopped(data, cfg.stopping)
    write_fit(fit, cfg.output_dir, extra={"n": data.n, **_seed_info(cfg)})
    return EXIT_OK


def cmd_test(cfg: RunConfig) -> int:
    data = _load_input(cfg)
    b = _load_b(cfg.b, data.grid)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        setup = prepare_inference(
            data, cfg.alpha, cfg.m, cfg.method, cfg.seed, cfg.n_sims, cfg.n_boot, cfg.stopping
        )
    outcome = setup.outcome(b)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_test_report(outcome, cfg.output_dir / "test_report.csv")
    _write_json(cfg.output_dir / "test_summary.json", {
        **outcome.as_row(),
        "reject": outcome.reject,
        "fitting_error": setup.fitting_error,
        "variance_dof": setup.variance_dof,
        "warnings": [str(w.message) for w in caught],
        **_seed_info(cfg),
    })
    return EXIT_OK


def cmd_confset(cfg: RunConfig) -> int:
    data = _load_input(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        cs = confidence_set(
            data, cfg.basis_size, cfg.grid, cfg.alpha, cfg.m, cfg.seed,
            cfg.method, cfg.n_sims, cfg.n_boot, cfg.stopping,
        )
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_confidence_set(
        cs, cfg.output_dir / "confset_accepted.csv", cfg.output_dir / "confset_meta.json",
        extra={"method": cfg.method.value, "warnings": [str(w.message) for w in caught],
               **_seed_info(cfg)},
    )
    return EXIT_OK


def _finish_report(report, cfg: RunConfig) -> int:
    report.summary["seed_chosen"] = cfg.seed_chosen
    report.summary["threads"] = cfg.threads
    report.write(cfg.output_dir)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    report = estimation_campaign(
        ModelSpec.make(cfg.model), cfg.n, cfg.reps, cfg.seed, cfg.stopping, cfg.threads
    )
    return _finish_report(report, cfg)


def cmd_power(cfg: RunConfig) -> int:
    report = power_curve(
        ModelSpec.make(cfg.model), cfg.deltas, cfg.n, cfg.reps, cfg.alpha, cfg.m,
        cfg.seed, cfg.method, cfg.n_sims, cfg.n_boot, cfg.threads,
    )
    return _finish_report(report, cfg)


def cmd_nulldist(cfg: RunConfig) -> int:
    kwargs = {} if cfg.m is None else {"m": cfg.m}
    report = null_distribution_sample(
        ModelSpec.make(cfg.model), cfg.n, cfg.reps, seed=cfg.seed,
        n_reference=cfg.n_sims, threads=cfg.threads, **kwargs,
    )
    return _finish_report(report, cfg)


_HANDLERS = {
    "fit": cmd_fit,
    "test": cmd_test,
    "confset": cmd_confset,
    "simulate": cmd_simulate,
    "power": cmd_power,
    "nulldist": cmd_nulldist,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        return _HANDLERS[cfg.command](cfg)
    except (InputError, DatasetFormatError) as exc:
        print(f"fpls {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    # LinAlgError subclasses ValueError, so it must be caught first
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"fpls {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"fpls {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"fpls {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
