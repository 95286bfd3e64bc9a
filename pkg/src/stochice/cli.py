"""
Command-line front end.

Lengths are given and written in km, times in kyr. Every command writes its
data as CSV next to a JSON manifest holding everything needed to rerun it.

Exit codes: 0 success, 2 invalid configuration, 3 solver failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .action_path import most_probable_path_X, path_csv
from .analysis import (barrier_crossing_time, compare_mlt_mpp, comparison_csv, mode_vs_noise,
                       mode_vs_params, zero_touch_threshold)
from .errors import ConfigError, DomainError, NonConvergenceError, SolverError
from .fokker_planck import (SCHEMES, Grid1D, cluster_states, density_csv,
                            maximal_likely_trajectory, solve)
from .model import KM, ModelParams, cusp_surface, equilibria, potential_U
from .sde_sim import SimConfig, ensemble_csv, simulate_ensemble

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

# key -> (type, default); None defaults mean "derived" or "required"
MODEL_KEYS = {
    "sigma": (float, 6.25), "beta": (float, 1.0), "lambda": (float, 0.001),
    "r": (float, -250.0), "eps0": (float, 0.01),
}
GRID_KEYS = {"n_cells": (int, 2000), "x_max": (float, 3000.0), "dt": (float, 0.05),
             "scheme": (str, "backward_euler")}
COMMAND_KEYS = {
    "equilibria": {},
    "potential": {"lambdas": (str, "0.001,0.0012,0.0014"), "x_max": (float, 3000.0),
                  "n_points": (int, 601)},
    "cusp": {"r_range": (str, "-400,0"), "lambda_range": (str, "0.0005,0.002"),
             "resolution": (str, "41")},
    "simulate": {"x0": (float, 1800.0), "t_max": (float, 100.0), "dt": (float, 0.01),
                 "n_paths": (int, 100), "record_stride": (int, None)},
    "mlt": dict(GRID_KEYS, x0=(str, "1800,1600,1000,100,50"), t_max=(float, 100.0),
                density=(bool, False)),
    "mpp": {"x0": (float, None), "x1": (float, 0.0), "t1": (float, 100.0),
            "n_nodes": (int, 800), "solver": (str, "collocation"), "rk_dt": (float, 0.01)},
    "compare": dict(GRID_KEYS, x0=(float, 1800.0), x1=(float, 1740.0), t_max=(float, 200.0),
                    n_nodes=(int, 800), ratio=(float, 0.05)),
    "sweep": dict(GRID_KEYS, kind=(str, "noise"), values=(str, "0.01,0.05,0.1"),
                  x0=(float, 1800.0), t_max=(float, 100.0), tol=(float, 1.0)),
}


# ---------------------------------------------------------------------------
# configuration

def _convert(kind, raw, key):
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {key!r}: {raw!r}") from None


def _floats(text, key):
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of numbers") from None
    if not vals:
        raise ConfigError(f"{key} must not be empty")
    return vals


def load_settings(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the config file ([model] and [<command>] sections) and flags."""
    allowed = dict(MODEL_KEYS, **COMMAND_KEYS[command])
    settings = {k: v for k, (_, v) in allowed.items()}
    if args.config:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(args.config, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        for section in cp.sections():
            if section not in ("model", "run") and section not in COMMAND_KEYS:
                raise ConfigError(f"unknown config section [{section}]")
        sources = [("model", MODEL_KEYS), (command, COMMAND_KEYS[command])]
        for section, keys in sources:
            if not cp.has_section(section):
                continue
            for key, raw in cp.items(section):
                key_n = key.replace("-", "_")
                if key_n not in keys:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                settings[key_n] = _convert(keys[key_n][0], raw, key_n)
        if cp.has_section("run"):
            for key, raw in cp.items("run"):
                if key not in ("seed", "threads", "out"):
                    raise ConfigError(f"unknown key {key!r} in [run]")
                if getattr(args, key, None) is None:
                    setattr(args, key, raw)
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = _convert(allowed[key][0], value, key)
    return settings


def model_params(s: dict) -> ModelParams:
    try:
        return ModelParams(sigma=s["sigma"], beta=s["beta"], lam=s["lambda"],
                           r=s["r"] * KM, eps0=s["eps0"])
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


def _grid(s):
    if s["scheme"] not in SCHEMES:
        raise ConfigError(f"scheme must be one of {', '.join(SCHEMES)}")
    try:
        return Grid1D(x_max=s["x_max"] * KM, n_cells=s["n_cells"])
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


def _seed(args):
    if args.seed is None:
        return None
    try:
        seed = int(args.seed)
    except ValueError:
        raise ConfigError("seed must be an integer") from None
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    return seed


def _threads(args):
    try:
        n = int(args.threads) if args.threads is not None else 1
    except ValueError:
        raise ConfigError("threads must be an integer") from None
    if n < 1:
        raise ConfigError("threads must be >= 1")
    return n


# ---------------------------------------------------------------------------
# output

def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _write_json(path: Path, payload: dict):
    _write_text(path, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _manifest(command, settings, params, outputs, seed=None, **extra):
    m = {"command": command, "artifact_version": __version__, "settings": settings,
         "params": params.to_dict() if params else None, "seed": seed, "outputs": outputs,
         "units": {"length": "km", "time": "kyr"}}
    m.update(extra)
    return m


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands

def cmd_equilibria(args, out):
    s = load_settings("equilibria", args)
    p = model_params(s)
    eq = equilibria(p)
    payload = _manifest("equilibria", s, p, ["equilibria.json"])
    payload.update({
        "discriminant": eq.discriminant, "regime": eq.regime,
        "states": [{"X_km": x / KM, "stability": st} for x, st in eq.states],
        "X_minus_km": None if eq.x_minus is None else eq.x_minus / KM,
        "X_plus_km": None if eq.x_plus is None else eq.x_plus / KM,
    })
    _write_json(out / "equilibria.json", payload)
    states = ", ".join(f"{x / KM:.1f} km ({st})" for x, st in eq.states)
    print(f"regime={eq.regime} discriminant={eq.discriminant:.6g} states: {states}")


def cmd_potential(args, out):
    s = load_settings("potential", args)
    p = model_params(s)
    lams = _floats(s["lambdas"], "lambdas")
    if s["x_max"] <= 0 or s["n_points"] < 2:
        raise ConfigError("potential range is empty (need x_max > 0 and n_points >= 2)")
    if any(l <= 0 for l in lams):
        raise ConfigError("lambda values must be > 0")
    X = np.linspace(0.0, s["x_max"] * KM, s["n_points"])
    curves, info = [], []
    for lam in lams:
        q = p.with_(lam=lam)
        curves.append(potential_U(X, q))
        eq = equilibria(q)
        interior = [x for x, _ in eq.states if x > 0]
        info.append({"lambda": lam, "regime": eq.regime, "interior_extrema": len(interior),
                     "degenerate": abs(eq.discriminant) <= 1e-12,
                     "extrema_km": [x / KM for x in interior]})
    header = ["X_km"] + [f"U_lambda_{lam!r}" for lam in lams]
    _write_text(out / "potential.csv", _csv(header, zip(X / KM, *curves)))
    _write_json(out / "potential.json",
                _manifest("potential", s, p, ["potential.csv"], curves=info))
    for c in info:
        print(f"lambda={c['lambda']}: {c['interior_extrema']} interior extrema ({c['regime']})")


def cmd_cusp(args, out):
    s = load_settings("cusp", args)
    p = model_params(s)
    rr = _floats(s["r_range"], "r_range")
    lr = _floats(s["lambda_range"], "lambda_range")
    res = [int(v) for v in _floats(s["resolution"], "resolution")]
    if len(rr) != 2 or len(lr) != 2 or len(res) not in (1, 2):
        raise ConfigError("ranges need two values and resolution one or two")
    try:
        rows = cusp_surface((rr[0] * KM, rr[1] * KM), tuple(lr),
                            res[0] if len(res) == 1 else tuple(res), sigma=p.sigma)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    body = _csv(["r_km", "lambda", "n_equilibria", "fold"],
                [(r.r / KM, r.lam, str(r.n_equilibria), str(r.fold).lower()) for r in rows])
    _write_text(out / "cusp.csv", body)
    _write_json(out / "cusp.json", _manifest("cusp", s, p, ["cusp.csv"]))
    print(f"{len(rows)} grid points, {sum(r.fold for r in rows)} on the fold")


def cmd_simulate(args, out):
    s = load_settings("simulate", args)
    p = model_params(s)
    seed = _seed(args)
    if seed is None:
        raise ConfigError("simulate requires --seed")
    if s["x0"] < 0:
        raise ConfigError("x0 must be >= 0")
    cfg = SimConfig(T=s["t_max"], dt=s["dt"], n_paths=s["n_paths"], seed=seed,
                    record_stride=s["record_stride"])
    ens = simulate_ensemble(s["x0"] * KM, p, cfg, threads=_threads(args))
    _write_text(out / "ensemble.csv", ensemble_csv(ens))
    _write_json(out / "ensemble.json",
                _manifest("simulate", s, p, ["ensemble.csv"], seed=seed,
                          record_stride=cfg.stride, n_times=len(ens.times)))
    final = ens.paths[:, -1] / KM
    print(f"{cfg.n_paths} paths, t={ens.times[-1]:g} kyr: mean {final.mean():.3f} km, "
          f"min {final.min():.3f} km, max {final.max():.3f} km")


def _x0_list(s, grid):
    x0 = _floats(s["x0"], "x0")
    if any(x < 0 or x * KM > grid.x_max for x in x0):
        raise ConfigError("x0 values must lie in [0, x_max]")
    return x0


def cmd_mlt(args, out):
    s = load_settings("mlt", args)
    p = model_params(s)
    grid = _grid(s)
    x0s = _x0_list(s, grid)
    outputs, summary, cols = ["mlt.csv"], [], []
    times = None
    for x0 in x0s:
        field = solve(grid, p, x0 * KM, s["t_max"], s["dt"], scheme=s["scheme"])
        mlt = maximal_likely_trajectory(field)
        times = mlt.times
        cols.append(mlt.X_ml / KM)
        summary.append({"x0_km": x0, "terminal_km": mlt.terminal_state / KM,
                        "converged": mlt.converged, "min_km": float(mlt.X_ml.min() / KM)})
        if s["density"]:
            name = f"density_x0_{x0!r}.csv"
            _write_text(out / name, density_csv(field))
            outputs.append(name)
    header = ["t_kyr"] + [f"X_ml_km_x0_{x!r}" for x in x0s]
    _write_text(out / "mlt.csv", _csv(header, zip(times, *cols)))
    clusters = cluster_states([d["terminal_km"] * KM for d in summary if d["converged"]])
    _write_json(out / "mlt.json", _manifest("mlt", s, p, outputs, trajectories=summary,
                                            clusters_km=[c / KM for c in clusters]))
    for d in summary:
        print(f"x0={d['x0_km']:g} km -> {d['terminal_km']:.3f} km"
              f"{'' if d['converged'] else ' (not converged)'}")


def cmd_mpp(args, out):
    s = load_settings("mpp", args)
    p = model_params(s)
    eq = equilibria(p)
    x0 = s["x0"] if s["x0"] is not None else (eq.x_plus / KM if eq.x_plus else None)
    if x0 is None:
        raise ConfigError("x0 is required when there is no ice-covered state")
    if x0 < 0 or s["x1"] < 0 or s["t1"] <= 0:
        raise ConfigError("need x0, x1 >= 0 and t1 > 0")
    if s["solver"] not in ("collocation", "shooting"):
        raise ConfigError("solver must be collocation or shooting")
    kw = {"rk_dt": s["rk_dt"]} if s["solver"] == "shooting" else {}
    res = most_probable_path_X(x0 * KM, s["x1"] * KM, s["t1"], p, n_nodes=s["n_nodes"],
                               solver=s["solver"], **kw)
    path = res.path
    crossing = (barrier_crossing_time(res.times, res.X, eq.x_minus)
                if eq.x_minus is not None else None)
    _write_text(out / "mpp.csv", path_csv(path))
    _write_json(out / "mpp.json", _manifest(
        "mpp", s, p, ["mpp.csv"], x0_km=x0,
        report=dict(path.report, om_action=path.om_action, fw_action=path.fw_action,
                    residual_norm=path.residual_norm, solver=path.solver_used,
                    barrier_crossing_kyr=crossing)))
    print(f"{path.solver_used}: OM action {path.om_action:.6g}, residual {path.residual_norm:.2e}"
          + (f", crosses X- at {crossing:.2f} kyr" if crossing is not None else ""))


def cmd_compare(args, out):
    s = load_settings("compare", args)
    p = model_params(s)
    grid = _grid(s)
    c = compare_mlt_mpp(s["x0"] * KM, s["x1"] * KM, p.eps0, p, T=s["t_max"], grid=grid,
                        dt=s["dt"], scheme=s["scheme"], n_nodes=s["n_nodes"], ratio=s["ratio"])
    _write_text(out / "compare.csv", comparison_csv(c))
    _write_json(out / "compare.json", _manifest(
        "compare", s, p, ["compare.csv"], t1_kyr=c.t1, sup_distance_km=c.sup_distance / KM,
        range_km=c.trajectory_range / KM, coincide=c.coincide))
    print(f"t1={c.t1:.3f} kyr, sup distance {c.sup_distance / KM:.4f} km "
          f"({'coincide' if c.coincide else 'differ'})")


def cmd_sweep(args, out):
    s = load_settings("sweep", args)
    p = model_params(s)
    grid = _grid(s)
    threads = _threads(args)
    kind = s["kind"]
    if kind == "threshold":
        res = zero_touch_threshold(p, p.eps0, s["t_max"], bisection_tol=s["tol"] * KM,
                                   grid=grid, dt=s["dt"])
        rows = [(x / KM, "true" if v else "false") for x, v in res.history]
        _write_text(out / "sweep.csv", _csv(["x0_km", "touches_zero"], rows))
        _write_json(out / "sweep.json", _manifest(
            "sweep", s, p, ["sweep.csv"], found=res.found, report=res.report,
            X_star_km=None if res.X_star is None else res.X_star / KM,
            bracket_km=[b / KM for b in res.bracket]))
        print(f"threshold: {res.X_star / KM:.3f} km" if res.found else res.report)
        return
    values = _floats(s["values"], "values")
    if kind == "noise":
        res = mode_vs_noise(p, s["x0"] * KM, values, s["t_max"], grid, s["dt"],
                            s["scheme"], threads)
    elif kind in ("lambda", "r"):
        vals = values if kind == "lambda" else [v * KM for v in values]
        res = mode_vs_params(kind, vals, p.eps0, s["x0"] * KM, s["t_max"], p, grid, s["dt"],
                             s["scheme"], threads)
    else:
        raise ConfigError("kind must be noise, lambda, r or threshold")
    _write_text(out / "sweep.csv", res.to_csv())
    _write_json(out / "sweep.json", _manifest("sweep", s, p, ["sweep.csv"], meta=res.meta,
                                              points=res.extra))
    for v, o in zip(res.values, res.outcomes):
        print(f"{res.axis}={v:g}: {o / KM:.4f} km")


COMMANDS = {"equilibria": cmd_equilibria, "potential": cmd_potential, "cusp": cmd_cusp,
            "simulate": cmd_simulate, "mlt": cmd_mlt, "mpp": cmd_mpp,
            "compare": cmd_compare, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [model] and per-command sections")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--seed", help="random seed (unsigned 64-bit)")
    common.add_argument("--threads", help="worker cap; never changes results")
    model = common.add_argument_group("model")
    model.add_argument("--sigma", help="yield stress parameter (m)")
    model.add_argument("--beta", help="mass-balance rate (1/kyr)")
    model.add_argument("--lambda", dest="lambda", help="mass-balance slope")
    model.add_argument("--r", help="origin offset (km, <= 0)")
    model.add_argument("--eps0", help="noise amplitude")

    parser = argparse.ArgumentParser(prog="stochice", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp_ = sub.add_parser(name, parents=[common])
        for key in COMMAND_KEYS[name]:
            flag = "--" + key.replace("_", "-")
            if COMMAND_KEYS[name][key][0] is bool:
                sp_.add_argument(flag, dest=key, action="store_const", const=True)
            else:
                sp_.add_argument(flag, dest=key)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        out = Path(args.out or ".")
        _threads(args)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        hint = (" Hint: retry with a larger --eps0 or a shorter --t1 and continue from there."
                if args.command == "mpp" else "")
        print(f"solver did not converge: {exc}.{hint}", file=sys.stderr)
        return EXIT_SOLVER
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
