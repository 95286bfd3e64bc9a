"""
Cross-method checks and parameter experiments built on the solvers.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .action_path import most_probable_path_X
from .errors import DomainError, SolverError
from .fokker_planck import (DETECT_CELLS, DensityField, Grid1D, MLTrajectory, cell_variation,
                            maximal_likely_trajectory, solve, stationary_mode_residual)
from .model import KM, ModelParams, equilibria
from .sde_sim import PathEnsemble

TOUCH_LEVEL = 1.0 * KM


@dataclass
class SweepResult:
    axis: str
    values: list
    outcomes: list
    extra: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.values) != len(self.outcomes):
            raise DomainError("one outcome per axis value")
        d = np.diff(np.asarray(self.values, dtype=float))
        if len(d) and not (np.all(d > 0) or np.all(d < 0)):
            raise DomainError("sweep axis must be strictly monotone")

    def to_csv(self) -> str:
        keys = sorted({k for e in self.extra for k in e}) if self.extra else []
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis, "terminal_mode_km"] + keys)
        for i, (v, o) in enumerate(zip(self.values, self.outcomes)):
            row = [repr(float(v)), repr(float(o) / KM) if o is not None else ""]
            e = self.extra[i] if self.extra else {}
            row += [_cell(e.get(k)) for k in keys]
            w.writerow(row)
        return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, float, np.floating, np.integer)):
        return repr(float(v))
    return str(v)


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------

def histogram_on_grid(samples, grid: Grid1D) -> np.ndarray:
    """Fraction of samples per FPE cell (samples outside the grid are counted as lost mass)."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise DomainError("empty sample")
    counts, _ = np.histogram(samples, bins=grid.edges)
    return counts / samples.size


def l1_distance(grid: Grid1D, p: np.ndarray, cell_mass: np.ndarray) -> float:
    """Sum over cells of |p dx - cell_mass|."""
    return float(np.sum(np.abs(np.asarray(p) * grid.dx - np.asarray(cell_mass))))


def density_distance(field: DensityField, ensemble: PathEnsemble, t: float) -> float:
    """L1 distance between the density at ``t`` and the ensemble histogram on the same cells."""
    if len(field.times) == 0 or ensemble.n_paths == 0:
        raise DomainError("empty inputs")
    kf = int(np.argmin(np.abs(field.times - t)))
    ke = int(np.argmin(np.abs(ensemble.times - t)))
    tol = 1e-9 * max(1.0, abs(t))
    if abs(field.times[kf] - t) > tol or abs(ensemble.times[ke] - t) > tol:
        raise DomainError(f"time {t} is not stored in both the density and the ensemble")
    return l1_distance(field.grid, field.p[kf], histogram_on_grid(ensemble.paths[:, ke], field.grid))


# ---------------------------------------------------------------------------

def _terminal(params, X0, T, grid, dt, scheme):
    mlt = maximal_likely_trajectory(solve(grid, params, X0, T, dt, scheme=scheme))
    Xm = mlt.terminal_state
    return mlt, {"converged": mlt.converged,
                 "oracle_residual": stationary_mode_residual(Xm, params),
                 "cell_tolerance": cell_variation(Xm, grid, params)}


def mode_vs_noise(params: ModelParams, X0: float, noise_values, T: float,
                  grid: Grid1D | None = None, dt: float = 0.05,
                  scheme: str = "backward_euler", threads: int = 1) -> SweepResult:
    """Terminal maximal likely state for each noise level."""
    grid = grid or Grid1D()
    noise_values = [float(v) for v in noise_values]
    if any(b <= a for a, b in zip(noise_values, noise_values[1:])):
        raise DomainError("noise_values must be increasing")
    runs = _map(lambda e: _terminal(params.with_(eps0=e), X0, T, grid, dt, scheme),
                noise_values, threads)
    return SweepResult("eps0", noise_values, [m.terminal_state for m, _ in runs],
                       [x for _, x in runs],
                       {"X0_km": X0 / KM, "T_kyr": T, "dt_kyr": dt, "scheme": scheme,
                        "n_cells": grid.n_cells, "x_max_km": grid.x_max / KM,
                        "params": params.to_dict()})


def mode_vs_params(axis: str, values, eps0: float, X0: float, T: float,
                   params: ModelParams | None = None, grid: Grid1D | None = None,
                   dt: float = 0.05, scheme: str = "backward_euler",
                   threads: int = 1) -> SweepResult:
    """Terminal maximal likely state across ``lambda`` or ``r`` values.

    Each point also reports the deterministic regime and X+ (when present).
    """
    keys = {"lambda": "lam", "r": "r"}
    if axis not in keys:
        raise DomainError("axis must be 'lambda' or 'r'")
    params = (params or ModelParams()).with_(eps0=eps0)
    grid = grid or Grid1D()
    values = [float(v) for v in values]

    def point(v):
        p = params.with_(**{keys[axis]: v})
        eq = equilibria(p)
        mlt, extra = _terminal(p, X0, T, grid, dt, scheme)
        extra.update(regime=eq.regime, x_plus_km=None if eq.x_plus is None else eq.x_plus / KM)
        return mlt.terminal_state, extra

    runs = _map(point, values, threads)
    return SweepResult(axis, values, [m for m, _ in runs], [x for _, x in runs],
                       {"eps0": eps0, "X0_km": X0 / KM, "T_kyr": T, "dt_kyr": dt,
                        "scheme": scheme, "n_cells": grid.n_cells, "params": params.to_dict()})


# ---------------------------------------------------------------------------

def touches_zero(params: ModelParams, X0: float, T: float, grid: Grid1D | None = None,
                 dt: float = 0.05, level: float = TOUCH_LEVEL) -> tuple[bool, MLTrajectory]:
    """Whether the maximal likely trajectory from ``X0`` dips below ``level``."""
    mlt = maximal_likely_trajectory(solve(grid or Grid1D(n_cells=DETECT_CELLS), params, X0, T, dt))
    return bool(np.min(mlt.X_ml) < level), mlt


@dataclass
class ThresholdResult:
    X_star: float | None
    bracket: tuple[float, float]
    history: list
    found: bool
    report: str = ""


def zero_touch_threshold(params: ModelParams, eps0: float, T: float,
                         bisection_tol: float = 1.0 * KM, lo: float = 1.0 * KM,
                         hi: float | None = None, grid: Grid1D | None = None,
                         dt: float = 0.05) -> ThresholdResult:
    """Bisection for the boundary between starting lengths whose maximal likely
    trajectory touches zero (below 1 km) and those that do not.

    The bracket defaults to (1 km, X-) and the grid to 250 m cells. When the
    predicate takes the same value at both ends no threshold is reported.
    """
    params = params.with_(eps0=eps0)
    eq = equilibria(params)
    if eq.regime != "bistable":
        raise DomainError("threshold search needs the bistable regime")
    hi = eq.x_minus if hi is None else hi
    grid = grid or Grid1D(n_cells=DETECT_CELLS)
    pred = lambda x: touches_zero(params, x, T, grid, dt)[0]
    p_lo, p_hi = pred(lo), pred(hi)
    history = [(lo, p_lo), (hi, p_hi)]
    if p_lo == p_hi:
        return ThresholdResult(None, (lo, hi), history, False,
                               f"predicate is {p_lo} at both ends of the bracket")
    while hi - lo > bisection_tol:
        mid = 0.5 * (lo + hi)
        pm = pred(mid)
        history.append((mid, pm))
        if pm == p_lo:
            lo = mid
        else:
            hi = mid
    return ThresholdResult(0.5 * (lo + hi), (lo, hi), history, True)


def barrier_crossing_time(times, X, level: float) -> float | None:
    """First downward crossing of ``level`` by linear interpolation, or None."""
    times = np.asarray(times, dtype=float)
    X = np.asarray(X, dtype=float)
    if len(times) != len(X) or len(times) < 2:
        raise DomainError("need matching arrays with at least two nodes")
    idx = np.flatnonzero((X[:-1] > level) & (X[1:] <= level))
    if idx.size == 0:
        return None
    k = idx[0]
    frac = (X[k] - level) / (X[k] - X[k + 1])
    return float(times[k] + frac * (times[k + 1] - times[k]))


# ---------------------------------------------------------------------------

@dataclass
class Comparison:
    t1: float
    mlt_times: np.ndarray
    mlt_X: np.ndarray
    mpp_times: np.ndarray
    mpp_X: np.ndarray
    sup_distance: float
    trajectory_range: float
    ratio_threshold: float

    @property
    def coincide(self) -> bool:
        if self.trajectory_range == 0:
            return self.sup_distance <= 1e-6 * max(abs(self.mpp_X[-1]), 1.0)
        return self.sup_distance <= self.ratio_threshold * self.trajectory_range


class ArrivalUndefined(SolverError):
    """The maximal likely trajectory never reaches the requested end state."""


def compare_mlt_mpp(X0: float, X1: float, eps0: float, params: ModelParams | None = None,
                    T: float = 200.0, grid: Grid1D | None = None, dt: float = 0.05,
                    scheme: str = "backward_euler", n_nodes: int = 800,
                    ratio: float = 0.05) -> Comparison:
    """Maximal likely trajectory from X0 against the most probable path X0 -> X1.

    The horizon of the path is the arrival time of the trajectory at X1;
    when X0 == X1 the full horizon ``T`` is used.
    """
    params = (params or ModelParams()).with_(eps0=eps0)
    grid = grid or Grid1D()
    mlt = maximal_likely_trajectory(solve(grid, params, X0, T, dt, scheme=scheme))
    t1 = T if X0 == X1 else mlt.arrival_time(X1)
    if t1 is None or t1 <= 0:
        raise ArrivalUndefined(f"maximal likely trajectory never reaches {X1 / KM} km within {T} kyr")
    mpp = most_probable_path_X(X0, X1, t1, params, n_nodes=n_nodes)
    keep = mlt.times <= t1 + 1e-12
    mt, mx = mlt.times[keep], mlt.X_ml[keep]
    sup = float(np.max(np.abs(np.interp(mpp.times, mt, mx) - mpp.X)))
    return Comparison(float(t1), mt, mx, mpp.times, mpp.X, sup, float(mx.max() - mx.min()), ratio)


def comparison_csv(c: Comparison) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_kyr", "X_mpp_km", "X_mlt_km"])
    for t, x in zip(c.mpp_times, c.mpp_X):
        w.writerow([repr(float(t)), repr(float(x / KM)),
                    repr(float(np.interp(t, c.mlt_times, c.mlt_X) / KM))])
    return buf.getvalue()
