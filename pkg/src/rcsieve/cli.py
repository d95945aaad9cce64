"""Command line front end.

Usage::

    rcsieve simulate --kind dgp1 --n 1000 --seed 7 --output out/
    rcsieve fit --input out/data.csv --output fit/ --K2 5
    rcsieve band --input data.csv --output band/ --M 11 --alpha 0.1
    rcsieve cv --input data.csv --output cv/ --K2_values 3,5,7
    rcsieve importance --input data.csv --output vi/
    rcsieve marginal --input data.csv --output marg/ --M 5

Every key can also come from ``--config FILE`` (``key = value`` lines, ``#``
comments) or a trailing ``key=value`` argument; command line values win.
Exit codes: 0 success, 2 configuration, 3 data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import re
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np

from .forest import ForestParams, UnsupportedOperation
from .inference import confidence_band
from .pipeline import (ConfigurationError, Dataset, SieveConfig, evaluate_density,
                       fit_conditional_density, marginal_density, variable_importance)
from .simlab import DgpSpec, generate, run_monte_carlo
from .tuning import TuningGrid, select_tuning

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("simulate", "fit", "band", "cv", "importance", "marginal")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _grid(text: str) -> tuple:
    lo, hi, step = (float(v) for v in text.split(":"))
    if not step > 0 or hi < lo:
        raise ValueError(f"grid must be lo:hi:step with step > 0, got {text!r}")
    return lo, hi, step


# key -> (parser, default)
KEYS = {
    "input": (str, None),
    "output": (str, None),
    "kind": (str, "dgp1"),
    "n": (int, None),
    "p": (int, 10),
    "reps": (int, 0),
    "K1": (int, 3),
    "K2": (int, 3),
    "sigma_t": (float, 1.0),
    "M": (int, 1),
    "mode": (str, "plain"),
    "n_trees": (int, 2000),
    "min_leaf": (int, 5),
    "subsample_fraction": (float, 0.5),
    "seed": (int, 0),
    "alpha": (float, 0.05),
    "test_point": (str, "median"),
    "b0_grid": (_grid, (-4.0, 4.0, 0.1)),
    "b1_grid": (_grid, (-5.0, 5.0, 0.05)),
    "K2_values": (_ints, [3, 5, 7]),
    "sigma_t_values": (_floats, [1.0]),
    "coefficient_axes": (str, "decorrelated"),
    "holdout_w": (_bool, False),
    "clip": (_bool, False),
}

REQUIRED = {
    "simulate": ("output", "n", "kind"),
    "fit": ("input", "output"),
    "band": ("input", "output"),
    "cv": ("input", "output"),
    "importance": ("input", "output"),
    "marginal": ("input", "output"),
}


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)


def _convert(key: str, raw):
    if key not in KEYS:
        raise CliError(EXIT_CONFIG, f"unknown key {key!r}")
    parser, _ = KEYS[key]
    if not isinstance(raw, str):
        return raw
    try:
        return parser(raw.strip())
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad value for {key}: {raw!r} ({exc})") from None


def read_config_file(path: str) -> dict:
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _convert(key, value)
    return out


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    for key in REQUIRED[cfg.command]:
        if v.get(key) is None:
            raise CliError(EXIT_CONFIG, f"missing required key: {key}")
    if v["K1"] < 1 or v["K2"] < 1 or any(k < 1 for k in v["K2_values"]):
        raise CliError(EXIT_CONFIG, "K1 and K2 must be at least 1")
    if not 0 < v["alpha"] <= 0.5:
        raise CliError(EXIT_CONFIG, f"alpha must lie in (0, 0.5], got {v['alpha']}")
    if v["M"] < 1 or v["n_trees"] < 1 or v["min_leaf"] < 1:
        raise CliError(EXIT_CONFIG, "M, n_trees and min_leaf must be positive")
    if not v["sigma_t"] > 0 or any(s <= 0 for s in v["sigma_t_values"]):
        raise CliError(EXIT_CONFIG, "sigma_t must be positive")
    if v["mode"] not in ("plain", "orthogonal_w"):
        raise CliError(EXIT_CONFIG, f"mode must be plain or orthogonal_w, got {v['mode']!r}")
    if v["kind"] not in ("dgp1", "dgp2"):
        raise CliError(EXIT_CONFIG, f"kind must be dgp1 or dgp2, got {v['kind']!r}")
    if v["coefficient_axes"] not in ("decorrelated", "canonical"):
        raise CliError(EXIT_CONFIG, "coefficient_axes must be decorrelated or canonical")
    if cfg.command == "simulate" and (v["n"] < 1 or v["p"] < 3):
        raise CliError(EXIT_CONFIG, "simulate needs n >= 1 and p >= 3")
    if v["test_point"] != "median":
        try:
            _floats(v["test_point"])
        except ValueError:
            raise CliError(EXIT_CONFIG, f"bad test_point {v['test_point']!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcsieve", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file")
        for key in KEYS:
            p.add_argument(f"--{key}", dest=key, default=None)
        p.add_argument("overrides", nargs="*", help="extra key=value pairs")
    return parser


def parse_config(args=None, file: str | None = None) -> RunConfig:
    """Merge defaults, the config file and command line values (CLI wins)."""
    parser = build_parser()
    try:
        ns = parser.parse_args(args)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise CliError(EXIT_CONFIG, "invalid command line") from exc
    values = {key: default for key, (_, default) in KEYS.items()}
    path = file or ns.config
    if path:
        values.update(read_config_file(path))
    for item in ns.overrides:
        if "=" not in item:
            raise CliError(EXIT_CONFIG, f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = _convert(key.strip(), value)
    for key in KEYS:
        raw = getattr(ns, key)
        if raw is not None:
            values[key] = _convert(key, raw)
    cfg = RunConfig(ns.command, values)
    _validate(cfg)
    return cfg


def load_csv(path: str) -> Dataset:
    """Read ``Y, W, X1..Xd`` (any column order) from a comma-separated file."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot read {path}: {exc}") from None
    if not rows:
        raise CliError(EXIT_DATA, f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    for name in ("Y", "W"):
        if name not in header:
            raise CliError(EXIT_DATA, f"missing column {name}")
    x_cols = sorted((int(m.group(1)), i) for i, h in enumerate(header)
                    if (m := re.fullmatch(r"X(\d+)", h)))
    if not x_cols:
        raise CliError(EXIT_DATA, "missing column X1")
    for expected, (num, _) in enumerate(x_cols, 1):
        if num != expected:
            raise CliError(EXIT_DATA, f"missing column X{expected}")
    order = [header.index("Y"), header.index("W")] + [i for _, i in x_cols]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    values = np.empty((len(body), len(order)))
    for r, row in enumerate(body, 2):
        if len(row) != len(header):
            raise CliError(EXIT_DATA, f"row {r}: expected {len(header)} cells, got {len(row)}")
        for c, col in enumerate(order):
            cell = row[col].strip()
            try:
                val = float(cell)
            except ValueError:
                val = math.nan
            if not math.isfinite(val):
                raise CliError(EXIT_DATA, f"row {r}, column {header[col]}: "
                                          f"non-numeric value {cell!r}")
            values[r - 2, c] = val
    try:
        return Dataset(values[:, 0], values[:, 1], values[:, 2:])
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _grid_values(spec) -> np.ndarray:
    lo, hi, step = spec
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def _sieve_config(v: dict, test_point, inference: bool = False) -> SieveConfig:
    forest = ForestParams(n_trees=v["n_trees"], min_leaf=v["min_leaf"],
                          subsample_fraction=v["subsample_fraction"], seed=v["seed"])
    return SieveConfig(K1=v["K1"], K2=v["K2"], sigma_t=v["sigma_t"], M=v["M"], mode=v["mode"],
                       test_points=None if test_point is None else np.atleast_2d(test_point),
                       forest=forest, inference=inference, holdout_w=v["holdout_w"],
                       clip=v["clip"], seed=v["seed"], coefficient_axes=v["coefficient_axes"])


def _test_point(v: dict, data: Dataset) -> np.ndarray:
    if v["test_point"] == "median":
        return np.median(data.X, axis=0)
    x = np.array(_floats(v["test_point"]))
    if len(x) != data.d:
        raise CliError(EXIT_CONFIG, f"test_point has {len(x)} entries, data has {data.d} "
                                    "covariates")
    return x


def _metadata(cfg: RunConfig, extra: dict) -> str:
    lines = [f"command = {cfg.command}"]
    for key in KEYS:
        val = cfg.values[key]
        if isinstance(val, (list, tuple)):
            val = ",".join(_fmt(v) for v in val)
        lines.append(f"{key} = {_fmt(val)}")
    for key, val in extra.items():
        if isinstance(val, (list, tuple, np.ndarray)):
            val = ",".join(_fmt(v) for v in np.ravel(val))
        lines.append(f"{key} = {_fmt(val)}")
    return "\n".join(lines) + "\n"


def _model_meta(model, x) -> dict:
    return {"test_point_resolved": x, "Q_min_eig": model.Qinv.min_eig,
            "Q_ridge": model.Qinv.ridge_used, "beta0": model.beta(x)[0],
            "beta1": model.beta(x)[1], "beta_guard": bool(model.guard_at_test[0])}


def _run_simulate(cfg):
    v = cfg.values
    spec = DgpSpec(v["kind"], v["n"], v["p"], v["seed"])
    data = generate(spec)
    header = ["Y", "W"] + [f"X{j + 1}" for j in range(data.d)]
    rows = np.column_stack([data.Y, data.W, data.X])
    files = {"data.csv": _csv(header, rows.tolist())}
    extra = {}
    if v["reps"] >= 2:
        rep = run_monte_carlo(spec, _sieve_config(v, None), v["reps"])
        files["mc_report.csv"] = _csv(
            ["b1", "truth", "median", "q05", "q95"],
            np.column_stack([rep.b1_grid, rep.true_density, rep.median_curve, rep.q05_curve,
                             rep.q95_curve]).tolist())
        files["mc_ise.csv"] = _csv(["rep", "ise", "mass", "imag_ratio"],
                                   [[i, a, b, c] for i, (a, b, c) in
                                    enumerate(zip(rep.ise, rep.mass, rep.imag_ratio))])
        extra = {"mc_failures": len(rep.failures), "mc_median_ise": float(np.median(rep.ise))}
    return files, extra


def _run_fit(cfg, data):
    v = cfg.values
    x = _test_point(v, data)
    model = fit_conditional_density(data, _sieve_config(v, x))
    b0, b1 = _grid_values(v["b0_grid"]), _grid_values(v["b1_grid"])
    dens = evaluate_density(model, x, b0, b1)
    B0, B1 = np.meshgrid(b0, b1, indexing="ij")
    rows = np.column_stack([B0.ravel(), B1.ravel(), dens.values.ravel()])
    extra = {**_model_meta(model, x), "imag_ratio": dens.imag_ratio}
    return {"density.csv": _csv(["b0", "b1", "density"], rows.tolist())}, extra


def _run_band(cfg, data):
    v = cfg.values
    x = _test_point(v, data)
    model = fit_conditional_density(data, _sieve_config(v, x, inference=True))
    b1 = _grid_values(v["b1_grid"])
    band = confidence_band(model, x, b1, v["alpha"])
    rows = np.column_stack([b1, band.point, band.lower, band.upper])
    extra = {**_model_meta(model, x), "M_used": band.M_used}
    return {"band.csv": _csv(["b1", "point", "lower", "upper"], rows.tolist())}, extra


def _run_cv(cfg, data):
    v = cfg.values
    x = _test_point(v, data)
    grid = TuningGrid(v["K2_values"], v["sigma_t_values"])
    out = select_tuning(data, grid, x, _sieve_config(v, None))
    rows = [["grid", k, s, out.criterion[a, b]]
            for a, k in enumerate(out.K2_values) for b, s in enumerate(out.sigma_t_values)]
    sel_k, sel_s = out.selected
    a, b = out.K2_values.index(sel_k), out.sigma_t_values.index(sel_s)
    rows.append(["selected", sel_k, sel_s, out.criterion[a, b]])
    extra = {"test_point_resolved": x, "selected_K2": sel_k, "selected_sigma_t": sel_s}
    return {"cv_table.csv": _csv(["row", "K2", "sigma_t", "criterion"], rows)}, extra


def _run_importance(cfg, data):
    v = cfg.values
    x = _test_point(v, data)
    model = fit_conditional_density(data, _sieve_config(v, x))
    shape, mean = variable_importance(model)
    rows = [[f"X{j + 1}", shape[j], mean[j]] for j in range(data.d)]
    return {"importance.csv": _csv(["feature", "VI_shape", "VI_mean"], rows)}, \
        _model_meta(model, x)


def _run_marginal(cfg, data):
    v = cfg.values
    b1 = _grid_values(v["b1_grid"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        dens = marginal_density(data, _sieve_config(v, None), b1)
    rows = np.column_stack([b1, dens])
    extra = {"warnings": len(caught)}
    return {"marginal.csv": _csv(["b1", "density"], rows.tolist())}, extra


RUNNERS = {"fit": _run_fit, "band": _run_band, "cv": _run_cv,
           "importance": _run_importance, "marginal": _run_marginal}


def run_command(cfg: RunConfig) -> int:
    """Execute ``cfg``; files are only written once every output is ready."""
    out_dir = cfg.values["output"]
    try:
        if cfg.command == "simulate":
            files, extra = _run_simulate(cfg)
        else:
            data = load_csv(cfg.values["input"])
            files, extra = RUNNERS[cfg.command](cfg, data)
    except CliError:
        raise
    except (ConfigurationError, UnsupportedOperation) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        raise CliError(EXIT_NUMERIC, f"numeric failure: {exc}") from None
    files["metadata.txt"] = _metadata(cfg, extra)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    try:
        for name, text in files.items():
            path = os.path.join(out_dir, name)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            written.append(path)
    except OSError as exc:
        for path in written:
            os.remove(path)
        raise CliError(EXIT_NUMERIC, f"cannot write outputs: {exc}") from None
    return EXIT_OK


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        return run_command(cfg)
    except CliError as exc:
        print(f"rcsieve: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
