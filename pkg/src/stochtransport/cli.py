"""Batch front end: ``python -m stochtransport <command> [options]``.

Every command reads an optional INI-style config (``[section]`` headers,
``key = value`` lines, ``#`` comments), resolves defaults, runs one
experiment and writes ``summary.json`` plus CSV detail files into the output
directory.  The summary embeds the resolved config.  All randomness flows
from ``[run] seed`` through a Philox generator, so identical config and seed
give byte-identical files.

Exit codes: 0 success, 2 precondition violation (CFL, cT <= 2R, tree too
deep, bad geometry), 3 numerical breakdown, 64 unknown command or bad usage,
65 malformed config.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_PRECONDITION, EXIT_BREAKDOWN, EXIT_USAGE, EXIT_CONFIG = 0, 2, 3, 64, 65

COMMANDS = ("geometry", "simulate", "backward", "duality-check", "carleman-check",
            "observability", "hum", "negative")

# section -> key -> (type, default)
SCHEMA = {
    "run": {"seed": (int, 0)},
    "geometry": {"dim": (int, 1), "bounds": ("floats", "-0.5, 0.5"), "n_cells": (int, 32),
                 "n_vel": (int, 8), "angle_offset": (float, 0.0)},
    "tree": {"T": (float, 1.5), "n_steps": (int, 10)},
    "coefficients": {"kind": (str, "random"), "bound": (float, 1.0), "names": ("names", "a1, a2, a3"),
                     "a1": (float, 0.0), "a2": (float, 0.0), "a3": (float, 0.0), "f": (float, 0.0)},
    "data": {"initial": (str, "cos"), "target": (str, "zero"), "samples": (int, 50)},
    "weight": {"lambda": (str, "auto"), "c": (str, "auto")},
    "solver": {"tol": (float, 1e-8), "max_iter": (int, 200), "substeps": (str, "auto"),
               "eig_iterations": (int, 20), "lambda_min": (bool, False)},
    "negative": {"depths": ("ints", "2, 4, 6"), "mode": (str, "v_off_G0"), "G0": ("floats", "-0.25, 0.25"),
                 "budget": (int, 400)},
    "output": {"dir": (str, "out"), "controls_csv": (bool, False)},
}


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


def _convert(kind, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return [float(s) for s in raw.split(",") if s.strip()]
        if kind == "ints":
            return [int(s) for s in raw.split(",") if s.strip()]
        if kind == "names":
            return [s.strip() for s in raw.split(",") if s.strip()]
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def load_config(path: str | None, overrides=()) -> dict:
    """Parse a config file plus ``section.key=value`` overrides into a dict with
    every field resolved to its typed default when absent."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(str(exc).replace("\n", " ")) from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)
    out = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    for section, fields in SCHEMA.items():
        out[section] = {}
        for key, (kind, default) in fields.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
            else:
                raw = default if isinstance(default, str) else None
            if raw is None:
                out[section][key] = default
            else:
                out[section][key] = _convert(kind, str(raw), f"[{section}] {key}")
    return out


# -- output -------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in _clean(list(row))])


# -- builders -----------------------------------------------------------------

def _rng(cfg, stream: int = 0):
    import numpy as np

    seed = cfg["run"]["seed"]
    if not 0 <= seed < 1 << 64:
        raise ConfigError(f"[run] seed must be an unsigned 64-bit integer, got {seed}")
    # seed and stream occupy separate key words, so streams never collide
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


def _geometry(cfg):
    from .geometry import build_geometry

    gc = cfg["geometry"]
    bounds = gc["bounds"]
    if gc["dim"] == 2:
        bounds = (bounds[-1] if len(bounds) else 0.5,)
    return build_geometry(gc["dim"], tuple(bounds), gc["n_cells"], n_vel=gc["n_vel"],
                          angle_offset=gc["angle_offset"])


def _tree(cfg, n_steps=None):
    from .tree import build_tree

    return build_tree(cfg["tree"]["T"], cfg["tree"]["n_steps"] if n_steps is None else n_steps)


def _substeps(cfg):
    s = cfg["solver"]["substeps"]
    if s == "auto":
        return s
    try:
        return int(s)
    except ValueError as exc:
        raise ConfigError(f"[solver] substeps: expected 'auto' or an integer, got {s!r}") from exc


def _coefficients(cfg, g, tree):
    from .forward import CoefficientSet, random_coefficients

    cc = cfg["coefficients"]
    kind = cc["kind"]
    if kind == "zero":
        return CoefficientSet()
    if kind == "constant":
        vals = {n: (cc[n] if cc[n] != 0.0 else None) for n in ("a1", "a2", "a3", "f")}
        bounds = {n: abs(v) for n, v in vals.items() if v is not None}
        return CoefficientSet(**vals, bounds=bounds)
    if kind == "random":
        names = tuple(n for n in cc["names"] if n in ("a1", "a2", "a3"))
        return random_coefficients(g, tree, _rng(cfg, 1), bound=cc["bound"], names=names,
                                   source="f" in cc["names"])
    raise ConfigError(f"[coefficients] kind must be zero, constant or random, got {kind!r}")


def profile(name: str, g):
    """Deterministic field profiles used for initial states and targets."""
    import numpy as np

    x = g.centers[:, 0]
    s = x / g.R
    U = g.velocities[:, 0]
    table = {
        "zero": lambda: np.zeros(g.field_shape),
        "one": lambda: np.ones(g.field_shape),
        "cos": lambda: np.cos(0.5 * np.pi * s)[:, None] * np.ones(g.n_vel)[None, :],
        "sin": lambda: np.sin(np.pi * s)[:, None] * (1.0 + 0.5 * U)[None, :],
        "bump": lambda: (np.clip(1.0 - s * s, 0.0, None) ** 3)[:, None] * np.ones(g.n_vel)[None, :],
    }
    if name not in table:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(table)}")
    return table[name]()


def _weight(cfg, g, tree, norms):
    from .carleman import CarlemanWeight, default_c, lambda_one

    wc = cfg["weight"]
    try:
        c = default_c(tree.T, g.R) if wc["c"] == "auto" else float(wc["c"])
        lam1 = lambda_one(norms, c)
        lam = max(lam1, 1.0) if wc["lambda"] == "auto" else float(wc["lambda"])
    except ValueError as exc:
        if isinstance(exc, ConfigError) or type(exc) is ValueError:
            raise ConfigError(f"[weight]: {exc}") from exc
        raise
    w = CarlemanWeight(lam, c, tree.T)
    w.check(g)
    return w


# -- commands -------------------------------------------------------------------

def cmd_geometry(cfg, out: Path, args) -> dict:
    from .geometry import inflow_set, min_control_time

    g = _geometry(cfg)
    inf = inflow_set(g)
    write_csv(out / "cells.csv", ["cell"] + [f"x{a}" for a in range(g.dim)],
              ([i] + list(map(float, g.centers[i])) for i in range(g.n_active)))
    write_csv(out / "inflow.csv",
              ["face", "cell", "velocity", "weight"] + [f"x{a}" for a in range(g.dim)]
              + [f"n{a}" for a in range(g.dim)],
              ([i, int(inf.cell[i]), int(inf.velocity[i]), float(inf.weight[i])]
               + list(map(float, inf.x[i])) + list(map(float, inf.normal[i])) for i in range(inf.size)))
    return {"geometry": g.to_dict(), "n_inflow": inf.size, "min_control_time": min_control_time(g)}


def cmd_simulate(cfg, out: Path, args) -> dict:
    from .forward import build_steps, energy_report, forward_solve

    g, tree = _geometry(cfg), _tree(cfg)
    coeffs = _coefficients(cfg, g, tree)
    steps = build_steps(g, coeffs, tree, _substeps(cfg))
    y0 = profile(cfg["data"]["initial"], g)
    path = forward_solve(y0, coeffs, None, tree, g, steps)
    rep = energy_report(path, coeffs, y0=y0)
    t = tree.times()
    write_csv(out / "levels.csv", ["level", "t", "energy", "residual"],
              ([k, float(t[k]), rep["energies"][k], rep["residual"][k] if k < tree.n_steps else ""]
               for k in range(tree.n_steps + 1)))
    rep.pop("residual")
    rep.pop("energies")
    return {"cfl": path.cfl, "substeps": steps[0].m, "energy": rep}


def cmd_backward(cfg, out: Path, args) -> dict:
    from .backward import backward_solve, hidden_regularity_trace
    from .carleman import random_terminal_data
    from .forward import build_steps, inner

    g, tree = _geometry(cfg), _tree(cfg)
    coeffs = _coefficients(cfg, g, tree)
    steps = build_steps(g, coeffs, tree, _substeps(cfg))
    zT = random_terminal_data(g, tree, _rng(cfg, 2))
    bwd = backward_solve(zT, steps, tree, g)
    _, ratio = hidden_regularity_trace(bwd, steps)
    t = tree.times()
    rows = []
    for k in range(tree.n_steps + 1):
        zz = inner(bwd.z[k], bwd.z[k], g)
        if k < tree.n_steps:
            ZZ = inner(bwd.Z[k], bwd.Z[k], g)
            tr = bwd.trace[k]
            trn = float((tr ** 2 * steps[0].inflow.weight).mean(axis=1).sum() / tr.shape[0])
        else:
            ZZ, trn = "", ""
        rows.append([k, float(t[k]), zz, ZZ, trn])
    write_csv(out / "levels.csv", ["level", "t", "z_sq", "Z_sq", "trace_sq_w"], rows)
    return {"hidden_regularity_ratio": ratio, "zT_sq": inner(zT, zT, g), "z0_sq": inner(bwd.z[0], bwd.z[0], g)}


def cmd_duality(cfg, out: Path, args) -> dict:
    import numpy as np

    from .backward import backward_solve, duality_pairing_check, duality_terms
    from .carleman import random_terminal_data
    from .forward import ControlPair, build_steps, forward_solve

    g, tree = _geometry(cfg), _tree(cfg)
    coeffs = _coefficients(cfg, g, tree)
    steps = build_steps(g, coeffs, tree, _substeps(cfg))
    rng = _rng(cfg, 3)
    nf = steps[0].inflow.size
    u = [rng.standard_normal((1 << k, op.m, nf)) for k, op in enumerate(steps)]
    v = [rng.standard_normal((1 << k,) + g.field_shape) for k in range(tree.n_steps)]
    ell = [rng.standard_normal((1 << k,) + g.field_shape) for k in range(tree.n_steps)]
    ctl = ControlPair(u, v, ell)
    y0 = rng.standard_normal(g.field_shape)
    fwd = forward_solve(y0, coeffs, ctl, tree, g, steps)
    bwd = backward_solve(random_terminal_data(g, tree, rng), steps, tree, g)
    terms = duality_terms(y0, ctl, fwd, bwd)
    res, rel = duality_pairing_check(y0, ctl, fwd, bwd)
    write_csv(out / "terms.csv", ["term", "value"], sorted(terms.items()))
    return {"abs_residual": res, "rel_residual": rel, "terms": terms, "finite": bool(np.isfinite(res))}


def cmd_carleman(cfg, out: Path, args) -> dict:
    import warnings

    from .backward import backward_norms, backward_solve
    from .carleman import CarlemanWarning, carleman_sides, random_terminal_data
    from .forward import build_steps

    g, tree = _geometry(cfg), _tree(cfg)
    coeffs = _coefficients(cfg, g, tree)
    steps = build_steps(g, coeffs, tree, _substeps(cfg))
    norms = backward_norms(coeffs, g, tree)
    w = _weight(cfg, g, tree, norms)
    rng = _rng(cfg, 4)
    rows, sides = [], []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CarlemanWarning)
        for i in range(cfg["data"]["samples"]):
            bwd = backward_solve(random_terminal_data(g, tree, rng), steps, tree, g)
            s = carleman_sides(bwd, w, g, steps, norms)
            sides.append(s)
            rows.append([i, s.terminal_term, s.rhs_dimensional, s.rhs_printed, s.defect_dimensional,
                         s.defect_printed, s.epsilon, s.energy_residual, s.observability["holds"]])
    write_csv(out / "samples.csv", ["sample", "terminal", "rhs_dimensional", "rhs_printed",
                                    "defect_dimensional", "defect_printed", "epsilon",
                                    "energy_residual", "observability_holds"], rows)
    ok = [s.defect_dimensional >= -s.epsilon for s in sides]
    return {"lambda": w.lam, "c": w.c, "lambda_one": sides[0].lambda_one if sides else None,
            "below_threshold": bool(caught), "samples": len(sides), "all_defects_within_tolerance": all(ok),
            "min_defect_dimensional": min(s.defect_dimensional for s in sides) if sides else None,
            "min_defect_printed": min(s.defect_printed for s in sides) if sides else None,
            "max_epsilon_ratio": max(s.epsilon / abs(s.rhs) for s in sides if s.rhs) if sides else None,
            "observability_constant": sides[0].observability["constant"] if sides else None}


def cmd_observability(cfg, out: Path, args) -> dict:
    from .forward import build_steps
    from .hum import GramianOperator, min_gramian_eig

    g, tree = _geometry(cfg), _tree(cfg)
    coeffs = _coefficients(cfg, g, tree)
    steps = build_steps(g, coeffs, tree, _substeps(cfg))
    op = GramianOperator(g, tree, steps)
    lam, const, hist = min_gramian_eig(op, iterations=cfg["solver"]["eig_iterations"],
                                       seed=cfg["run"]["seed"])
    write_csv(out / "history.csv", ["iteration", "rayleigh_quotient"], enumerate(hist))
    return {"lambda_min": lam, "observability_constant": const, "T": tree.T,
            "two_R": 2.0 * g.R, "gramian_applies": op.applies}


def cmd_hum(cfg, out: Path, args) -> dict:
    import numpy as np

    from .forward import build_steps
    from .hum import GramianOperator, hum_solve, min_gramian_eig

    g, tree = _geometry(cfg), _tree(cfg)
    coeffs = _coefficients(cfg, g, tree)
    steps = build_steps(g, coeffs, tree, _substeps(cfg))
    op = GramianOperator(g, tree, steps)
    sol = hum_solve(profile(cfg["data"]["initial"], g), profile(cfg["data"]["target"], g), coeffs,
                    tree, g, tol=cfg["solver"]["tol"], max_iter=cfg["solver"]["max_iter"], op=op)
    summary = sol.summary()
    summary["warning"] = None if tree.T > 2 * g.R else "T <= 2R: exact controllability not expected"
    summary["lambda_min"] = None
    if cfg["solver"]["lambda_min"]:
        summary["lambda_min"] = min_gramian_eig(op, cfg["solver"]["eig_iterations"], seed=cfg["run"]["seed"])[0]
    if cfg["output"]["controls_csv"]:
        rows = []
        for k in range(tree.n_steps):
            u, v, _ = sol.controls.level(k)
            if u is not None:
                for n, j, f in np.ndindex(*u.shape):
                    rows.append([k, n, "u", j, f, int(steps[0].inflow.velocity[f]), float(u[n, j, f])])
            if v is not None:
                for n, c, j in np.ndindex(*v.shape):
                    rows.append([k, n, "v", "", c, j, float(v[n, c, j])])
        write_csv(out / "controls.csv", ["level", "node", "kind", "substep", "face_or_cell", "velocity",
                                         "value"], rows)
    return summary


def cmd_negative(cfg, out: Path, args) -> dict:
    from .negative import localized_target_energy_growth, mean_obstruction_demo, peng_oscillation_report

    nc = cfg["negative"]
    depths = nc["depths"] if args.depths is None else [int(s) for s in args.depths.split(",") if s.strip()]
    if args.experiment == "peng":
        rep = peng_oscillation_report(depths, cfg["tree"]["T"])
        rows = zip(rep.depths, rep.sign_changes, rep.details["expected_counts"], rep.details["integrand_error"])
        write_csv(out / "depths.csv", ["depth", "sign_changes", "expected", "integrand_error"], rows)
    elif args.experiment == "mean":
        g = _geometry(cfg)
        reps = [mean_obstruction_demo(_tree(cfg, d), g, a3=cfg["coefficients"]["a3"] or 1.0,
                                      y1=1.0, cg_budget=nc["budget"], rng=_rng(cfg, 5)) for d in depths]
        from .negative import ObstructionReport

        rep = ObstructionReport("mean", depths, [r.residuals[0] for r in reps], [r.energies[0] for r in reps],
                                reps[0].jensen_bound,
                                details={"max_abs_mean": [r.details["max_abs_mean"] for r in reps]})
        write_csv(out / "depths.csv", ["depth", "residual_sq", "energy", "jensen_bound", "max_abs_mean"],
                  ([d, r.residuals[0], r.energies[0], r.jensen_bound, r.details["max_abs_mean"]]
                   for d, r in zip(depths, reps)))
    else:
        mode = args.mode or nc["mode"]
        rep = localized_target_energy_growth(mode, tuple(nc["G0"]), depths, nc["budget"], _geometry(cfg),
                                             cfg["tree"]["T"])
        write_csv(out / "depths.csv", ["depth", "relative_residual", "energy", "iterations"],
                  zip(rep.depths, rep.residuals, rep.energies, rep.details["cg_iterations"]))
    return rep.to_dict()


HANDLERS = {"geometry": cmd_geometry, "simulate": cmd_simulate, "backward": cmd_backward,
            "duality-check": cmd_duality, "carleman-check": cmd_carleman,
            "observability": cmd_observability, "hum": cmd_hum, "negative": cmd_negative}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stochtransport", description="Controllability experiments for stochastic transport.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI-style config file")
        sp.add_argument("--out", help="output directory (overrides [output] dir)")
        sp.add_argument("--seed", type=int, help="overrides [run] seed")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if name == "negative":
            sp.add_argument("experiment", choices=("mean", "peng", "localized"))
            sp.add_argument("--depths", help="comma-separated tree depths")
            sp.add_argument("--mode", choices=("v_off_G0", "drift_only"))
    return p


def _apply_threads():
    raw = os.environ.get("STC_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError as exc:
        raise ConfigError(f"STC_THREADS must be a positive integer, got {raw!r}") from exc
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        _apply_threads()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.out is not None:
            overrides.append(f"output.dir={args.out}")
        cfg = load_config(args.config, overrides)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stochtransport: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"stochtransport: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .forward import ConfigurationError
    from .geometry import GeometryError
    from .hum import NumericalBreakdown
    from .tree import TreeSizeError

    out = Path(cfg["output"]["dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        results = HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"stochtransport: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, GeometryError, TreeSizeError) as exc:
        print(f"stochtransport: precondition violated: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (NumericalBreakdown, FloatingPointError) as exc:
        print(f"stochtransport: numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN
    command = args.command + (f" {args.experiment}" if args.command == "negative" else "")
    write_json(out / "summary.json", {"command": command, "config": cfg, "results": results})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
