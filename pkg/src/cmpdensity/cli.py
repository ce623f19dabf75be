"""Command-line driver: fit, predict, benchmark and simulate.

Usage::

    cmpdensity --mode fit --data counts.csv --config run.json --seed 7 --out results/

Configuration is a JSON file; ``--seed`` overrides its ``seed`` entry. Every
mode writes a ``manifest.json`` holding the resolved configuration, the
seed, the package version and SHA-256 digests of the input and output
files. Passing a manifest back through ``--config`` repeats the run.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure, 5 file-system error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .compoisson import ConvergenceError, SamplerError
from .dpm import Dataset, Hyperparams, PosteriorDraws
from .estimators import ComPoissonDPMRegressor, Standardizer
from .jitter import RankDeficientError
from .simulation import METHODS, SCENARIOS, BenchmarkSettings, Scenario, generate, run_benchmark, write_results

__all__ = [
    "ConfigError",
    "DataError",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DATA",
    "EXIT_NUMERICAL",
    "EXIT_IO",
    "DEFAULT_CONFIG",
    "resolve_config",
    "load_csv",
    "emit_outputs",
    "main",
]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5

MODES = ("fit", "predict", "benchmark", "simulate")
HYPER_KEYS = {f.name for f in fields(Hyperparams)} - {"seed"}

DEFAULT_CONFIG = {
    "seed": 0,
    "response": "count",
    "covariates": None,
    "standardize": True,
    "hyper": {},
    "quantiles": [0.1, 0.5, 0.9],
    "x_grid": {"covariate": None, "size": 50},
    "model": None,
    "benchmark": {
        "scenarios": list(SCENARIOS),
        "sizes": [20, 100, 500],
        "methods": list(METHODS),
        "replications": 1,
        "settings": {},
    },
    "simulate": {"scenario": "binomial", "n": 100},
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed input data."""


# ---------------------------------------------------------------- config


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {path + key!r}")
        if isinstance(base[key], dict) and key not in ("hyper", "settings"):
            if not isinstance(value, dict):
                raise ConfigError(f"{path + key!r} must be an object")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_levels(q):
    if not isinstance(q, list) or not all(isinstance(v, (int, float)) for v in q):
        raise ConfigError("quantiles must be a list of numbers")
    if any(not 0 < v < 1 for v in q) or any(b <= a for a, b in zip(q, q[1:])):
        raise ConfigError("quantiles must lie in (0, 1) and be strictly increasing")


def resolve_config(raw, mode, seed=None, data=None, model=None):
    """Merge a user config (or a manifest) over the defaults and validate it."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if isinstance(raw, dict) and "config" in raw and "manifest_version" in raw:
        raw = {k: v for k, v in raw["config"].items() if k not in ("mode", "data")}
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, raw)
    if seed is not None:
        cfg["seed"] = seed
    if model is not None:
        cfg["model"] = model
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    _check_levels(cfg["quantiles"])
    bad = set(cfg["hyper"]) - HYPER_KEYS
    if bad:
        raise ConfigError(f"unknown hyperparameters: {sorted(bad)}")
    try:
        Hyperparams(**cfg["hyper"], seed=cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid hyperparameters: {exc}") from exc
    grid = cfg["x_grid"]
    if "values" in grid:
        if not isinstance(grid["values"], list) or not grid["values"]:
            raise ConfigError("x_grid.values must be a non-empty list")
    elif not isinstance(grid.get("size"), int) or grid["size"] < 1:
        raise ConfigError("x_grid.size must be a positive integer")
    bench = cfg["benchmark"]
    if any(s not in SCENARIOS for s in bench["scenarios"]):
        raise ConfigError(f"benchmark scenarios must be among {SCENARIOS}")
    if any(m not in METHODS for m in bench["methods"]):
        raise ConfigError(f"benchmark methods must be among {METHODS}")
    try:
        BenchmarkSettings(**bench["settings"])
    except TypeError as exc:
        raise ConfigError(f"invalid benchmark settings: {exc}") from exc
    sim = cfg["simulate"]
    if sim["scenario"] not in SCENARIOS or not isinstance(sim["n"], int) or sim["n"] < 1:
        raise ConfigError("simulate needs a known scenario and a positive integer n")
    if mode == "fit" and data is None:
        raise ConfigError("fit mode needs --data")
    if mode == "predict" and cfg["model"] is None:
        raise ConfigError("predict mode needs --model or a 'model' entry in the config")
    return cfg


# ------------------------------------------------------------------ data


def _parse_count(text, line):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {line}: count {text!r} is not a number") from None
    if not math.isfinite(value) or value != math.floor(value):
        raise DataError(f"row {line}: count {text!r} is not an integer")
    if value < 0:
        raise DataError(f"row {line}: count {text!r} is negative")
    return int(value)


def _parse_real(text, line, name):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {line}: covariate {name!r} value {text!r} is not a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {line}: covariate {name!r} value {text!r} is not finite")
    return value


def read_table(path, config):
    """Parse the CSV into ``(y, raw covariates, covariate names)``.

    Row numbers in error messages are file line numbers (the header is 1).
    """
    response = config["response"]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        if response not in header:
            raise DataError(f"{path}: missing response column {response!r}")
        names = config["covariates"]
        if names is None:
            names = [h for h in header if h != response]
        missing = [c for c in names if c not in header]
        if missing:
            raise DataError(f"{path}: missing covariate column(s) {missing}")
        if not names:
            raise DataError(f"{path}: no covariate columns")
        iy = header.index(response)
        ix = [header.index(c) for c in names]
        y, X = [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {line}: expected {len(header)} fields, found {len(row)}")
            y.append(_parse_count(row[iy].strip(), line))
            X.append([_parse_real(row[k].strip(), line, c) for k, c in zip(ix, names)])
    if not y:
        raise DataError(f"{path}: no data rows")
    return np.array(y, dtype=np.int64), np.array(X, dtype=float), list(names)


def load_csv(path, config):
    """Read counts and covariates into a :class:`Dataset`.

    Covariates are standardized (when ``config["standardize"]``) and an
    intercept column is prepended. Returns ``(dataset, standardizer, names)``;
    the standardizer records the affine map for back-transformation.
    """
    y, X_raw, names = read_table(path, config)
    scaler = Standardizer.fit(X_raw, config["standardize"])
    return Dataset(y, scaler.design(X_raw)), scaler, names


# --------------------------------------------------------------- outputs


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def emit_outputs(out_dir, config, *, draws=None, curves=None, diagnostics=True, extra=(), inputs=()):
    """Write curves, posterior summary and the manifest into ``out_dir``.

    ``curves`` is ``(names, grid_raw, levels, Q)`` with ``grid_raw`` of shape
    (g, n_cov) and ``Q`` of shape (g, n_levels). ``extra`` lists output files
    already written by the caller; they are hashed into the manifest.
    """
    out = Path(out_dir)
    written = list(extra)
    if curves is not None:
        names, grid, levels, Q = curves
        rows = [
            [*grid[g], levels[k], int(Q[g, k])] for g in range(grid.shape[0]) for k in range(len(levels))
        ]
        _write_csv(out / "curves.csv", [*names, "p", "quantile"], rows)
        written.append("curves.csv")
    if draws is not None and diagnostics:
        rows = [["k", it, int(k)] for it, k in enumerate(draws.k_trace)]
        rows += [
            ["allocation_acceptance", "", draws.allocation_rate],
            ["atom_acceptance_mu", "", draws.atom_rate_mu],
            ["atom_acceptance_nu", "", draws.atom_rate_nu],
            ["step_mu", "", draws.step_mu],
            ["step_nu", "", draws.step_nu],
            ["snapshots", "", len(draws)],
        ]
        _write_csv(out / "posterior_summary.csv", ["quantity", "sweep", "value"], rows)
        written.append("posterior_summary.csv")
    manifest = {
        "manifest_version": 1,
        "package_version": __version__,
        "seed": config["seed"],
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {name: _sha256(out / name) for name in sorted(written)},
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


# ----------------------------------------------------------------- modes


def _grid(config, names, X_raw):
    spec = config["x_grid"]
    col = spec.get("covariate") or names[0]
    if col not in names:
        raise ConfigError(f"x_grid.covariate {col!r} is not a covariate")
    j = names.index(col)
    if "values" in spec:
        values = np.asarray(spec["values"], dtype=float)
    else:
        values = np.linspace(X_raw[:, j].min(), X_raw[:, j].max(), spec["size"])
    # other covariates held at their sample means
    grid = np.tile(X_raw.mean(axis=0), (values.size, 1))
    grid[:, j] = values
    return grid


def _model_dict(config, est, names, X_raw, y):
    return {
        "format": "cmpdensity-model",
        "package_version": __version__,
        "response": config["response"],
        "covariates": names,
        "hyper": asdict(est.hyper_),
        "standardizer": est.scaler_.to_dict(),
        "y": y.tolist(),
        "X_raw": X_raw.tolist(),
        "draws": est.draws_.to_dict(),
    }


def _model_from_dict(d):
    if d.get("format") != "cmpdensity-model":
        raise DataError("model file is not a cmpdensity model")
    hyper = Hyperparams(**d["hyper"])
    scaler = Standardizer.from_dict(d["standardizer"])
    X_raw = np.asarray(d["X_raw"], dtype=float).reshape(len(d["y"]), -1)
    data = Dataset(np.asarray(d["y"], dtype=np.int64), scaler.design(X_raw))
    draws = PosteriorDraws.from_dict(d["draws"])
    est = ComPoissonDPMRegressor.from_draws(draws, data, scaler, hyper)
    return est, d["covariates"], X_raw


def _curves(est, config, names, X_raw):
    grid = _grid(config, names, X_raw)
    levels = config["quantiles"]
    Q = est.predict_quantile(grid, levels) if levels else np.zeros((grid.shape[0], 0), dtype=np.int64)
    return names, grid, levels, Q


def _run_fit(config, data_path, out):
    y, X_raw, names = read_table(data_path, config)
    est = ComPoissonDPMRegressor(**config["hyper"], standardize=config["standardize"], random_state=config["seed"])
    est.fit(X_raw, y)
    _write_json(out / "model.json", _model_dict(config, est, names, X_raw, y))
    curves = _curves(est, config, names, X_raw)
    return emit_outputs(out, config, draws=est.draws_, curves=curves, extra=["model.json"], inputs=[data_path])


def _run_predict(config, data_path, out):
    model_path = Path(config["model"])
    with open(model_path) as fh:
        try:
            model = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{model_path}: not valid JSON ({exc})") from exc
    est, names, X_raw = _model_from_dict(model)
    inputs = [model_path]
    if data_path is not None:
        # predict on the covariate range of a new file
        _, X_raw, _ = read_table(data_path, {**config, "response": model["response"], "covariates": names})
        inputs.append(data_path)
    curves = _curves(est, config, names, X_raw)
    return emit_outputs(out, config, draws=est.draws_, curves=curves, inputs=inputs)


def _run_benchmark(config, out):
    bench = config["benchmark"]
    scenarios = [Scenario(name, int(n)) for n in bench["sizes"] for name in bench["scenarios"]]
    rows = run_benchmark(
        scenarios,
        bench["methods"],
        BenchmarkSettings(**bench["settings"]),
        seed=config["seed"],
        replications=int(bench["replications"]),
    )
    write_results(rows, out / "benchmark.csv")
    return emit_outputs(out, config, extra=["benchmark.csv"])


def _run_simulate(config, out):
    sim = config["simulate"]
    x, y = generate(Scenario(sim["scenario"], sim["n"]), np.random.default_rng(config["seed"]))
    response = config["response"]
    _write_csv(out / "data.csv", ["x", response], [[float(a), int(b)] for a, b in zip(x, y)])
    return emit_outputs(out, config, extra=["data.csv"])


def _build_parser():
    parser = argparse.ArgumentParser(prog="cmpdensity", description=__doc__.split("\n")[0])
    parser.add_argument("--mode", required=True, choices=MODES)
    parser.add_argument("--data", type=Path, help="input CSV (fit, optional for predict)")
    parser.add_argument("--config", type=Path, help="JSON configuration or a previous manifest")
    parser.add_argument("--seed", type=int, help="master seed, overrides the config")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--model", type=Path, help="model.json written by fit (predict mode)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        raw = {}
        if args.config is not None:
            try:
                raw = json.loads(args.config.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        config = resolve_config(
            raw,
            args.mode,
            seed=args.seed,
            data=args.data,
            model=str(args.model) if args.model is not None else None,
        )
        args.out.mkdir(parents=True, exist_ok=True)
        if args.mode == "fit":
            _run_fit(config, args.data, args.out)
        elif args.mode == "predict":
            _run_predict(config, args.data, args.out)
        elif args.mode == "benchmark":
            _run_benchmark(config, args.out)
        else:
            _run_simulate(config, args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, SamplerError, RankDeficientError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
