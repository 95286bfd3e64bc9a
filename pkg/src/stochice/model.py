"""
Reduced ice-sheet model
=======================

Closed-form layer of the package. The ice-sheet length X (meters) obeys the
Ito SDE

    dX = f(X) dt + eps * sqrt(X) dB,

with time in kiloyears. Everything here is a pure function of its inputs.

Unit convention: lengths in meters, time in kyr, so the mass-balance rate
beta = 1e-3 / yr becomes 1 / kyr.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError

KM = 1000.0

STABLE = "stable"
UNSTABLE = "unstable"
SEMI_STABLE = "semi-stable"


@dataclass(frozen=True)
class ModelParams:
    """Physical and noise parameters.

    Parameters
    ----------
    sigma : float
        Yield-stress parameter (m).
    beta : float
        Mass-balance rate (1/kyr).
    lam : float
        Mass-balance slope (dimensionless).
    r : float
        Distance of the ice-sheet origin from the polar ocean (m), r <= 0.
    eps0 : float
        Noise amplitude entering the mass balance.
    """

    sigma: float = 6.25
    beta: float = 1.0
    lam: float = 0.001
    r: float = -250.0 * KM
    eps0: float = 0.01

    def __post_init__(self):
        checks = [
            (self.sigma > 0, "sigma must be > 0"),
            (self.beta > 0, "beta must be > 0"),
            (self.lam > 0, "lam must be > 0"),
            (self.r <= 0, "r must be <= 0"),
            (self.eps0 >= 0, "eps0 must be >= 0"),
        ]
        for ok, msg in checks:
            if not (ok and all(map(math.isfinite, self.as_tuple()))):
                raise DomainError(f"{msg} (got {self})")

    def as_tuple(self):
        return (self.sigma, self.beta, self.lam, self.r, self.eps0)

    @property
    def epsilon(self) -> float:
        """Effective noise strength beta*eps0/sqrt(2*sigma)."""
        return self.beta * self.eps0 / math.sqrt(2.0 * self.sigma)

    @property
    def coef(self) -> float:
        """beta*lam/sqrt(2*sigma), the prefactor of the ablation terms."""
        return self.beta * self.lam / math.sqrt(2.0 * self.sigma)

    def with_(self, **changes) -> "ModelParams":
        values = dict(sigma=self.sigma, beta=self.beta, lam=self.lam, r=self.r, eps0=self.eps0)
        values.update(changes)
        return ModelParams(**values)

    def to_dict(self) -> dict:
        return {"sigma_m": self.sigma, "beta_per_kyr": self.beta, "lambda": self.lam,
                "r_m": self.r, "eps0": self.eps0}


@dataclass(frozen=True)
class EquilibriumSet:
    discriminant: float
    states: list[tuple[float, str]]
    regime: str

    @property
    def locations(self) -> list[float]:
        return [x for x, _ in self.states]

    @property
    def x_minus(self) -> float | None:
        unstable = [x for x, s in self.states if s == UNSTABLE and x > 0]
        return unstable[0] if unstable else None

    @property
    def x_plus(self) -> float | None:
        stable = [x for x, s in self.states if s == STABLE and x > 0]
        return stable[-1] if stable else None


@dataclass(frozen=True)
class ThicknessProfile:
    length: float
    x: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    max_height: float


def _check_nonneg(X, name="X"):
    X = np.asarray(X, dtype=float)
    if np.any(X < 0) or np.any(~np.isfinite(X)):
        raise DomainError(f"{name} must be finite and >= 0")
    return X


def _out(value, like):
    return float(value) if np.ndim(like) == 0 else value


def drift_f(X, params: ModelParams):
    """Deterministic drift f(X) in m/kyr."""
    X = _check_nonneg(X)
    s = np.sqrt(X)
    val = -params.coef * (0.75 * X * s - params.r * s) + params.beta * X / 3.0
    return _out(val, X)


def drift_derivative(X, params: ModelParams):
    """f'(X); diverges at X = 0 when r < 0."""
    X = _check_nonneg(X)
    with np.errstate(divide="ignore"):
        s = np.sqrt(X)
        val = -params.coef * (1.125 * s - 0.5 * params.r / s) + params.beta / 3.0
    return _out(val, X)


def diffusion_g(X):
    """Noise coefficient g(X) = sqrt(X)."""
    X = _check_nonneg(X)
    return _out(np.sqrt(X), X)


def potential_U(X, params: ModelParams):
    """Potential with -U'(X) = f(X) and U(0) = 0."""
    X = _check_nonneg(X)
    s = np.sqrt(X)
    val = (params.coef * (0.3 * X * X * s - (2.0 / 3.0) * params.r * X * s)
           - params.beta * X * X / 6.0)
    return _out(val, X)


def discriminant(params: ModelParams) -> float:
    return 1.0 + 27.0 * params.r * params.lam ** 2 / (2.0 * params.sigma)


def equilibria(params: ModelParams) -> EquilibriumSet:
    """Fixed points of dX/dt = f(X).

    Dividing f(X) = 0 by sqrt(X) leaves a quadratic in y = sqrt(X) whose roots
    give X = (8 sigma / (81 lam^2)) (1 +/- sqrt(D))^2.
    """
    delta = discriminant(params)
    scale = 8.0 * params.sigma / (81.0 * params.lam ** 2)
    origin = (0.0, STABLE if params.r < 0 else UNSTABLE)

    if params.r == 0:
        return EquilibriumSet(delta, [origin, (4.0 * scale, STABLE)], "monostable")
    if delta < 0:
        return EquilibriumSet(delta, [origin], "monostable")
    if delta == 0:
        return EquilibriumSet(delta, [origin, (scale, SEMI_STABLE)], "degenerate")

    root = math.sqrt(delta)
    states = [origin]
    for x in (scale * (1.0 - root) ** 2, scale * (1.0 + root) ** 2):
        states.append((x, STABLE if drift_derivative(x, params) < 0 else UNSTABLE))
    return EquilibriumSet(delta, states, "bistable")


def fold_lambda(r: float, sigma: float) -> float:
    """lam on the fold locus D = 0 for a given r < 0."""
    if r >= 0:
        raise DomainError("fold locus exists only for r < 0")
    return math.sqrt(2.0 * sigma / (27.0 * abs(r)))


class CuspRow(NamedTuple):
    r: float
    lam: float
    n_equilibria: int
    fold: bool


def _count_equilibria(r, lam, sigma):
    if r == 0:
        return 2
    delta = 1.0 + 27.0 * r * lam ** 2 / (2.0 * sigma)
    return 3 if delta > 0 else (2 if delta == 0 else 1)


def cusp_surface(r_range, lambda_range, resolution, sigma: float = 6.25) -> list[CuspRow]:
    """Equilibrium count over an (r, lam) grid.

    ``resolution`` is an int or an (n_r, n_lambda) pair. A point is flagged as
    fold when the sign of the discriminant differs from one of its four grid
    neighbours.
    """
    n_r, n_l = (resolution, resolution) if np.isscalar(resolution) else resolution
    (r_lo, r_hi), (l_lo, l_hi) = r_range, lambda_range
    if n_r < 2 or n_l < 2:
        raise DomainError("resolution must be >= 2 per axis")
    if not (r_lo < r_hi and l_lo < l_hi):
        raise DomainError("ranges must be nonempty")
    if r_hi > 0 or l_lo <= 0:
        raise DomainError("need r <= 0 and lam > 0")

    rs = np.linspace(r_lo, r_hi, int(n_r))
    ls = np.linspace(l_lo, l_hi, int(n_l))
    R, L = np.meshgrid(rs, ls, indexing="ij")
    sign = np.sign(1.0 + 27.0 * R * L ** 2 / (2.0 * sigma))
    sign[R == 0] = 1.0

    fold = np.zeros_like(sign, dtype=bool)
    fold[1:, :] |= sign[1:, :] != sign[:-1, :]
    fold[:-1, :] |= sign[:-1, :] != sign[1:, :]
    fold[:, 1:] |= sign[:, 1:] != sign[:, :-1]
    fold[:, :-1] |= sign[:, :-1] != sign[:, 1:]

    return [CuspRow(float(R[i, j]), float(L[i, j]), _count_equilibria(R[i, j], L[i, j], sigma),
                    bool(fold[i, j]))
            for i in range(len(rs)) for j in range(len(ls))]


def thickness_profile(X: float, params: ModelParams, n_samples: int = 101) -> ThicknessProfile:
    """Parabolic ice-thickness profile h(x) on [0, X]."""
    X = float(_check_nonneg(X))
    if n_samples < 3:
        raise DomainError("n_samples must be >= 3")
    x = np.linspace(0.0, X, n_samples)
    inner = np.clip(X / 2.0 - np.abs(x - X / 2.0), 0.0, None)
    h = math.sqrt(params.sigma) * np.sqrt(inner)
    return ThicknessProfile(X, x, h, math.sqrt(params.sigma * X / 2.0))


def lamperti_forward(X):
    """Z = 2 sqrt(X)."""
    X = _check_nonneg(X)
    return _out(2.0 * np.sqrt(X), X)


def lamperti_inverse(Z):
    """X = (Z/2)^2."""
    Z = _check_nonneg(Z, "Z")
    return _out(0.25 * Z * Z, Z)


def _check_positive_z(Z):
    Z = np.asarray(Z, dtype=float)
    if np.any(Z <= 0) or np.any(~np.isfinite(Z)):
        raise DomainError("Z must be > 0 (the transformed drift is singular at 0)")
    return Z


def additive_drift_F(Z, params: ModelParams, order: int = 0):
    """Drift of the additive-noise SDE dZ = F(Z) dt + eps dB and its derivatives.

    ``order`` selects F (0), F' (1), F'' (2) or F''' (3).
    """
    Z = _check_positive_z(Z)
    c, b, r = params.coef, params.beta, params.r
    half_e2 = 0.5 * params.epsilon ** 2
    if order == 0:
        val = -c * (0.1875 * Z * Z - r) + b * Z / 6.0 - half_e2 / Z
    elif order == 1:
        val = -0.375 * c * Z + b / 6.0 + half_e2 / (Z * Z)
    elif order == 2:
        val = -0.375 * c - 2.0 * half_e2 / Z ** 3
    elif order == 3:
        val = 6.0 * half_e2 / Z ** 4
    else:
        raise ValueError("order must be 0..3")
    return _out(val, Z)
