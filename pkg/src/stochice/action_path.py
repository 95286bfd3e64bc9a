"""
Onsager-Machlup action and most probable transition paths.

Paths live in the additive-noise coordinate z = 2 sqrt(X), where

    dz = F(z) dt + eps dB.

The OM Lagrangian is (zdot - F)^2 + eps^2 F'(z) and its minimizers solve

    zddot = F'(z) F(z) + (eps^2 / 2) F''(z).

The collocation solver minimizes the discrete action

    S = sum_k h_k [((z_{k+1} - z_k)/h_k - F(m_k))^2 + eps^2 F'(m_k)],

with m_k the interval midpoint, by Newton's method on grad S = 0. The Hessian
is tridiagonal and grad S = 0 is a compact second-order discretization of
the equation above. Evaluating F at midpoints avoids the odd-even decoupling
that a centered-difference/trapezoid pairing suffers from.

The shooting solver integrates the Hamiltonian system

    zdot = Phi + F(z),    Phidot = -F'(z) Phi + (eps^2 / 2) F''(z),

whose invariant is H = Phi^2/2 + F Phi - (eps^2/2) F'.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import solve_banded
from scipy.optimize import brentq

from .errors import DomainError, NonConvergenceError
from .model import KM, ModelParams, additive_drift_F, lamperti_forward, lamperti_inverse

X_FLOOR = 500.0
Z_FLOOR = 2.0 * math.sqrt(X_FLOOR)
RULES = ("trapezoid", "midpoint")


def _F(z, params, order=0):
    return additive_drift_F(z, params, order)


@dataclass(frozen=True)
class TransitionSpec:
    z0: float
    z1: float
    t0: float
    t1: float
    params: ModelParams
    z_floor: float = Z_FLOOR

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise DomainError("t1 must exceed t0")
        if min(self.z0, self.z1) < self.z_floor or self.z_floor <= 0:
            raise DomainError(f"endpoints must be >= z_floor = {self.z_floor}")


@dataclass
class TransitionPath:
    times: np.ndarray
    z: np.ndarray
    om_action: float
    fw_action: float
    hamiltonian_trace: np.ndarray = field(repr=False)
    residual_norm: float
    solver_used: str
    params: ModelParams
    converged: bool = True
    report: dict = field(default_factory=dict)

    @property
    def X(self) -> np.ndarray:
        return lamperti_inverse(self.z)

    @property
    def Phi(self) -> np.ndarray:
        return np.gradient(self.z, self.times) - _F(self.z, self.params)


# ---------------------------------------------------------------------------
# action functionals

def om_lagrangian(z, zdot, params: ModelParams):
    """(zdot - F(z))^2 + eps^2 F'(z)."""
    return (np.asarray(zdot) - _F(z, params)) ** 2 + params.epsilon ** 2 * _F(z, params, 1)


def _mesh(times, z):
    times = np.asarray(times, dtype=float)
    z = np.asarray(z, dtype=float)
    if times.shape != z.shape or times.ndim != 1 or len(times) < 3:
        raise DomainError("need matching 1-D arrays with at least 3 nodes")
    h = np.diff(times)
    if np.any(h <= 0):
        raise DomainError("times must be strictly increasing")
    return times, z, h


def _pieces(times, z, params, rule):
    """Per-node (trapezoid) or per-interval (midpoint) values of (zdot - F)^2 and F'."""
    times, z, h = _mesh(times, z)
    if rule == "trapezoid":
        zdot = np.gradient(z, times, edge_order=1)
        return h, (zdot - _F(z, params)) ** 2, _F(z, params, 1)
    if rule == "midpoint":
        m = 0.5 * (z[1:] + z[:-1])
        return h, (np.diff(z) / h - _F(m, params)) ** 2, _F(m, params, 1)
    raise DomainError(f"rule must be one of {RULES}")


def _integrate(h, values, rule):
    if rule == "trapezoid":
        return float(np.sum(0.5 * h * (values[1:] + values[:-1])))
    return float(np.sum(h * values))


def om_action(times, z, params: ModelParams, rule: str = "trapezoid") -> float:
    """Integral of the OM Lagrangian along a sampled path.

    ``trapezoid`` uses centered differences for zdot (one-sided at the ends);
    ``midpoint`` is the discrete action minimized by the collocation solver.
    """
    h, phi2, f1 = _pieces(times, z, params, rule)
    return _integrate(h, phi2 + params.epsilon ** 2 * f1, rule)


def fw_action(times, z, params: ModelParams, rule: str = "trapezoid") -> float:
    """Integral of (zdot - F(z))^2 with the same quadrature as :func:`om_action`."""
    h, phi2, _ = _pieces(times, z, params, rule)
    return _integrate(h, phi2, rule)


def noise_correction(times, z, params: ModelParams, rule: str = "trapezoid") -> float:
    """eps^2 times the integral of F'(z); equals om_action - fw_action."""
    h, _, f1 = _pieces(times, z, params, rule)
    return params.epsilon ** 2 * _integrate(h, f1, rule)


def hamiltonian(z, phi, params: ModelParams):
    return 0.5 * phi ** 2 + _F(z, params) * phi - 0.5 * params.epsilon ** 2 * _F(z, params, 1)


def euler_lagrange_rhs(z, params: ModelParams):
    """zddot = F'(z) F(z) + (eps^2 / 2) F''(z)."""
    return _F(z, params, 1) * _F(z, params) + 0.5 * params.epsilon ** 2 * _F(z, params, 2)


# ---------------------------------------------------------------------------
# discrete action: gradient and tridiagonal Hessian

def action_gradient(times, z, params: ModelParams) -> np.ndarray:
    """Gradient of the midpoint action with respect to every node value."""
    times, z, h = _mesh(times, z)
    e2 = params.epsilon ** 2
    m = 0.5 * (z[1:] + z[:-1])
    phi = np.diff(z) / h - _F(m, params)
    f1, f2 = _F(m, params, 1), _F(m, params, 2)
    common = -h * phi * f1 + 0.5 * h * e2 * f2
    g = np.zeros_like(z)
    g[1:] += 2.0 * phi + common
    g[:-1] += -2.0 * phi + common
    return g


def _action_hessian(times, z, params):
    h = np.diff(times)
    e2 = params.epsilon ** 2
    m = 0.5 * (z[1:] + z[:-1])
    phi = np.diff(z) / h - _F(m, params)
    f1, f2, f3 = _F(m, params, 1), _F(m, params, 2), _F(m, params, 3)
    a = 1.0 / h - 0.5 * f1
    b = -1.0 / h - 0.5 * f1
    q = h * (-0.5 * phi * f2 + 0.25 * e2 * f3)
    diag = np.zeros_like(z)
    diag[1:] += 2.0 * h * a * a + q
    diag[:-1] += 2.0 * h * b * b + q
    off = 2.0 * h * a * b + q
    return diag, off


def el_residual(times, z, params: ModelParams) -> float:
    """Scaled residual of the discrete Euler-Lagrange equations.

    Interior gradient components divided by the local cell size approximate
    -2 (zddot - F'F - eps^2 F''/2); they are measured against the size of
    the terms of that equation along the path.
    """
    times, z, h = _mesh(times, z)
    g = action_gradient(times, z, params)[1:-1]
    hmid = 0.5 * (h[1:] + h[:-1])
    zdd = np.diff(z, 2) / hmid
    scale = (2.0 * np.max(np.abs(_F(z, params) * _F(z, params, 1)))
             + params.epsilon ** 2 * np.max(np.abs(_F(z, params, 2)))
             + 2.0 * np.max(np.abs(zdd / h[1:])))
    if scale == 0.0:
        scale = 1.0
    return float(np.max(np.abs(g / hmid)) / scale) if g.size else 0.0


# ---------------------------------------------------------------------------
# solvers

def _finish(times, z, params, solver, residual, converged, report, phi=None):
    if phi is None:
        phi = np.gradient(z, times) - _F(z, params)
    return TransitionPath(
        times=times, z=z,
        om_action=om_action(times, z, params, "midpoint"),
        fw_action=fw_action(times, z, params, "midpoint"),
        hamiltonian_trace=hamiltonian(z, phi, params),
        residual_norm=residual, solver_used=solver, params=params,
        converged=converged, report=report)


def _newton(times, z, params, tol, max_iter, max_halvings):
    z = z.copy()
    history = []
    res = el_residual(times, z, params)
    for it in range(max_iter):
        history.append(res)
        if res <= tol:
            return z, res, it, history, True
        g = action_gradient(times, z, params)[1:-1]
        diag, off = _action_hessian(times, z, params)
        ab = np.zeros((3, len(g)))
        ab[0, 1:] = off[1:-1]
        ab[1] = diag[1:-1]
        ab[2, :-1] = off[1:-1]
        try:
            dz = solve_banded((1, 1), ab, -g)
        except (np.linalg.LinAlgError, ValueError):
            break
        if not np.all(np.isfinite(dz)):
            break
        gnorm = np.linalg.norm(g)
        step, accepted = 1.0, False
        for _ in range(max_halvings + 1):
            trial = z.copy()
            trial[1:-1] += step * dz
            if trial.min() > 0:
                gt = action_gradient(times, trial, params)[1:-1]
                if np.linalg.norm(gt) < gnorm:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            break
        z = trial
        res = el_residual(times, z, params)
    history.append(res)
    return z, res, len(history) - 1, history, res <= tol


def solve_bvp_collocation(spec: TransitionSpec, n_nodes: int = 800, tol: float = 1e-9,
                          max_iter: int = 200, max_halvings: int = 30,
                          continuation: bool = True, initial: np.ndarray | None = None,
                          eps0_start: float = 0.2, n_continuation: int = 8) -> TransitionPath:
    """Damped Newton on the discrete Euler-Lagrange equations.

    The initial guess is the straight line between the endpoints. If Newton
    stalls, the solve is repeated along a sequence of noise levels starting
    at ``eps0_start`` and ending at the requested one, each warm-started
    from the previous solution.

    Raises
    ------
    NonConvergenceError
        Carries the last iterate and the solver report.
    """
    if n_nodes < 50:
        raise DomainError("n_nodes must be >= 50")
    params = spec.params
    times = np.linspace(spec.t0, spec.t1, n_nodes)
    z = np.linspace(spec.z0, spec.z1, n_nodes) if initial is None else np.array(initial, float)
    z[0], z[-1] = spec.z0, spec.z1

    z_new, res, its, hist, ok = _newton(times, z, params, tol, max_iter, max_halvings)
    report = {"iterations": its, "residuals": hist, "continuation": []}
    if not ok and continuation:
        target = params.eps0
        levels = (np.geomspace(eps0_start, target, n_continuation) if target > 0
                  else np.linspace(eps0_start, 0.0, n_continuation))
        zc = z
        for level in levels:
            zc, res, its, hist, ok = _newton(times, zc, params.with_(eps0=float(level)),
                                             tol, max_iter, max_halvings)
            report["continuation"].append({"eps0": float(level), "iterations": its,
                                           "residual": res, "converged": ok})
        z_new = zc
    if not ok:
        raise NonConvergenceError(
            f"collocation did not converge (scaled residual {res:.3e}); try a larger eps0, "
            "a shorter horizon or more nodes to continue from", last_iterate=z_new, report=report)
    z_new[0], z_new[-1] = spec.z0, spec.z1
    return _finish(times, z_new, params, "collocation", res, True, report)


def _rk4_shot(z0, phi0, params, t0, t1, rk_dt, z_low, z_high):
    n = max(1, int(round((t1 - t0) / rk_dt)))
    h = (t1 - t0) / n
    c, b, r = params.coef, params.beta, params.r
    he2 = 0.5 * params.epsilon ** 2

    # plain-float copies of F, F', F'' keep the scalar loop fast
    def rhs(z, p):
        F = -c * (0.1875 * z * z - r) + b * z / 6.0 - he2 / z
        F1 = -0.375 * c * z + b / 6.0 + he2 / (z * z)
        F2 = -0.375 * c - 2.0 * he2 / (z * z * z)
        return p + F, -F1 * p + he2 * F2

    zs = np.empty(n + 1)
    ps = np.empty(n + 1)
    zs[0], ps[0] = z0, phi0
    z, p = z0, phi0
    for k in range(n):
        k1 = rhs(z, p)
        y2 = (z + 0.5 * h * k1[0], p + 0.5 * h * k1[1])
        if y2[0] <= z_low or y2[0] >= z_high:
            return None, None, k, -1.0 if y2[0] <= z_low else 1.0
        k2 = rhs(*y2)
        y3 = (z + 0.5 * h * k2[0], p + 0.5 * h * k2[1])
        if y3[0] <= z_low or y3[0] >= z_high:
            return None, None, k, -1.0 if y3[0] <= z_low else 1.0
        k3 = rhs(*y3)
        y4 = (z + h * k3[0], p + h * k3[1])
        if y4[0] <= z_low or y4[0] >= z_high:
            return None, None, k, -1.0 if y4[0] <= z_low else 1.0
        k4 = rhs(*y4)
        z = z + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        p = p + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if not (math.isfinite(z) and math.isfinite(p)) or z <= z_low or z >= z_high:
            return None, None, k + 1, -1.0 if not z > z_low else 1.0
        zs[k + 1], ps[k + 1] = z, p
    return zs, ps, n, 0.0


def shoot(spec: TransitionSpec, phi0: float, rk_dt: float = 0.01):
    """Integrate the Hamiltonian system from (z0, phi0).

    Returns ``(times, z, phi)``, or ``None`` entries when the trajectory
    leaves (0, 100 * max(z0, z1)).
    """
    z_high = 100.0 * max(spec.z0, spec.z1)
    zs, ps, _, _ = _rk4_shot(spec.z0, phi0, spec.params, spec.t0, spec.t1, rk_dt,
                             1e-6 * spec.z_floor, z_high)
    n = max(1, int(round((spec.t1 - spec.t0) / rk_dt)))
    return np.linspace(spec.t0, spec.t1, n + 1), zs, ps


def solve_bvp_shooting(spec: TransitionSpec, rk_dt: float = 0.01,
                       phi_range: tuple[float, float] = (1e-8, 1e3), n_scan: int = 89,
                       phi_guess: float | None = None) -> TransitionPath:
    """Single shooting on Phi(t0) with RK4 and Brent's method.

    The miss z(t1) - z1 is decreasing in Phi(t0); trajectories that escape
    the domain count as missing low or high. A sign change is searched over
    0 and +/- logarithmically spaced magnitudes in ``phi_range`` (and
    around ``phi_guess`` if given).
    """
    params = spec.params
    z_low = 1e-6 * spec.z_floor
    z_high = 100.0 * max(spec.z0, spec.z1)

    def miss(phi0):
        zs, _, _, escape = _rk4_shot(spec.z0, phi0, params, spec.t0, spec.t1, rk_dt,
                                     z_low, z_high)
        if zs is None:
            return escape * 1e300
        return zs[-1] - spec.z1

    mags = np.geomspace(*phi_range, n_scan)
    cand = np.concatenate((-mags[::-1], [0.0], mags))
    if phi_guess is not None:
        span = max(abs(phi_guess), 1.0) * np.geomspace(1e-6, 1e-1, 11)
        cand = np.sort(np.concatenate((cand, phi_guess - span, phi_guess + span, [phi_guess])))
    values = [miss(c) for c in cand]
    bracket = None
    for k in range(len(cand) - 1):
        if values[k] == 0.0:
            bracket = (cand[k], cand[k])
            break
        if np.sign(values[k]) != np.sign(values[k + 1]) and values[k + 1] != 0.0:
            bracket = (cand[k], cand[k + 1])
            break
        if values[k + 1] == 0.0:
            bracket = (cand[k + 1], cand[k + 1])
            break
    if bracket is None:
        raise NonConvergenceError("no bracketing root for the initial momentum",
                                  report={"scanned": len(cand)})
    if bracket[0] == bracket[1]:
        phi0 = bracket[0]
    else:
        phi0 = brentq(miss, *bracket, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=400)

    times, zs, ps = shoot(spec, phi0, rk_dt)
    if zs is None:
        raise NonConvergenceError("final shot left the domain", report={"phi0": phi0})
    end_miss = float(zs[-1] - spec.z1)
    zs = zs.copy()
    zs[-1] = spec.z1
    H = hamiltonian(zs[:-1], ps[:-1], params)
    drift = float(np.max(np.abs(H - H[0])) / max(abs(H[0]), 1e-300))
    report = {"phi0": float(phi0), "endpoint_miss": end_miss, "hamiltonian_drift": drift,
              "rk_dt": float(times[1] - times[0])}
    path = _finish(times, zs, params, "shooting", abs(end_miss) / max(spec.z0, spec.z1),
                   True, report, phi=ps)
    return path


# ---------------------------------------------------------------------------
# X-space wrapper and diagnostics

@dataclass
class XPath:
    times: np.ndarray
    X: np.ndarray
    path: TransitionPath
    X0: float
    X1: float


def z_of_X(X: float, z_floor: float = Z_FLOOR) -> float:
    """Lamperti image with 0 (and anything below the floor) mapped to ``z_floor``."""
    return max(float(lamperti_forward(X)), z_floor)


def most_probable_path_X(X0: float, X1: float, t1: float, params: ModelParams,
                         t0: float = 0.0, n_nodes: int = 800, solver: str = "collocation",
                         z_floor: float = Z_FLOOR, **kwargs) -> XPath:
    """Most probable path between two ice-sheet lengths (meters)."""
    if X0 < 0 or X1 < 0:
        raise DomainError("X endpoints must be >= 0")
    spec = TransitionSpec(z_of_X(X0, z_floor), z_of_X(X1, z_floor), t0, t1, params, z_floor)
    if solver == "collocation":
        path = solve_bvp_collocation(spec, n_nodes, **kwargs)
    elif solver == "shooting":
        path = solve_bvp_shooting(spec, **kwargs)
    else:
        raise DomainError("solver must be 'collocation' or 'shooting'")
    return XPath(path.times, path.X, path, X0, X1)


def sample_on(path: TransitionPath, times) -> np.ndarray:
    """Evaluate a path at other times with a cubic Hermite interpolant."""
    zdot = np.gradient(path.z, path.times)
    return CubicHermiteSpline(path.times, path.z, zdot)(times)


def gradient_check(times, z, params: ModelParams, step: float | None = None) -> float:
    """Largest gap between the analytic action gradient and central differences,
    relative to the largest gradient component."""
    times, z, _ = _mesh(times, z)
    g = action_gradient(times, z, params)
    step = step or 1e-6 * float(np.max(np.abs(z)))
    fd = np.empty_like(z)
    for i in range(len(z)):
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        fd[i] = (om_action(times, zp, params, "midpoint")
                 - om_action(times, zm, params, "midpoint")) / (2.0 * step)
    return float(np.max(np.abs(fd - g)) / max(np.max(np.abs(g)), 1e-300))


def local_minimality_check(path: TransitionPath, n_perturbations: int = 100,
                           amplitude: float | None = None, seed: int = 0,
                           n_modes: int = 8) -> dict:
    """Compare the action of ``path`` with randomly perturbed copies.

    Perturbations are random sine series vanishing at both ends, scaled so
    that their maximum equals ``amplitude`` (default 1e-3 * max z).

    Returns
    -------
    dict
        ``fraction``: share of perturbations whose action is >= the path's;
        ``min_increase``; ``gradient_error``: :func:`gradient_check` at a
        perturbed copy, where the gradient is not zero.
    """
    times, z = path.times, path.z
    params = path.params
    amplitude = 1e-3 * float(np.max(z)) if amplitude is None else float(amplitude)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
    s = (times - times[0]) / (times[-1] - times[0])
    basis = np.sin(np.pi * np.outer(np.arange(1, n_modes + 1), s))
    base = om_action(times, z, params, "midpoint")
    diffs = []
    bump = None
    for _ in range(n_perturbations):
        coef = rng.standard_normal(n_modes) / np.arange(1, n_modes + 1)
        d = coef @ basis
        peak = np.max(np.abs(d))
        d = d / peak if peak > 0 else d
        bump = d if bump is None else bump
        diffs.append(om_action(times, z + amplitude * d, params, "midpoint") - base)
    diffs = np.array(diffs)
    grad_point = z + (amplitude if amplitude > 0 else 1e-3 * np.max(z)) * bump
    return {"fraction": float(np.mean(diffs >= 0)) if len(diffs) else 1.0,
            "min_increase": float(diffs.min()) if len(diffs) else 0.0,
            "max_abs_change": float(np.max(np.abs(diffs))) if len(diffs) else 0.0,
            "gradient_error": gradient_check(times, grad_point, params),
            "amplitude": amplitude, "base_action": base}


def path_csv(path: TransitionPath) -> str:
    phi = path.Phi
    H = hamiltonian(path.z, phi, path.params)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_kyr", "z", "X_km", "Phi", "H"])
    for row in zip(path.times, path.z, path.X / KM, phi, H):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()
