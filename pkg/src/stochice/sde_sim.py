"""
Monte Carlo integration of dX = f(X) dt + eps sqrt(X) dB.

Each path owns a Philox stream keyed by ``(seed, path_index)``. Normals are
drawn per path in fixed time blocks, so the output does not depend on how
paths are grouped into chunks or spread over threads.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, IntegrationError
from .model import KM, ModelParams, drift_f

MAX_RECORDS = 2000
_CHUNK = 512
_BLOCK = 1024


@dataclass(frozen=True)
class SimConfig:
    """Numerical settings of an ensemble run.

    ``record_stride = None`` picks the smallest stride that keeps at most
    2000 stored samples per path.
    """

    T: float
    dt: float = 0.01
    n_paths: int = 1
    seed: int = 0
    record_stride: int | None = None

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be > 0")
        if not (self.T >= self.dt and math.isfinite(self.T)):
            raise ConfigError("T must be >= dt")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if self.record_stride is not None and self.record_stride < 1:
            raise ConfigError("record_stride must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def stride(self) -> int:
        if self.record_stride is not None:
            return int(self.record_stride)
        return max(1, math.ceil(self.n_steps / (MAX_RECORDS - 1)))

    def record_steps(self) -> np.ndarray:
        steps = np.arange(0, self.n_steps + 1, self.stride)
        if steps[-1] != self.n_steps:
            steps = np.append(steps, self.n_steps)
        return steps


@dataclass
class PathEnsemble:
    times: np.ndarray
    paths: np.ndarray = field(repr=False)
    X0: float
    config: SimConfig
    params: ModelParams

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    def manifest(self) -> dict:
        return {"kind": "ensemble", "X0_km": self.X0 / KM, "params": self.params.to_dict(),
                "config": asdict(self.config) | {"record_stride": self.config.stride},
                "seed": self.config.seed, "n_times": len(self.times)}


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path_index])))


def _integrate(X0, params, config, indices):
    """Integrate a group of paths together; rows follow ``indices``."""
    n = len(indices)
    eps = params.epsilon
    dt = config.dt
    sqdt = math.sqrt(dt)
    rec = config.record_steps()
    out = np.empty((n, len(rec)))
    out[:, 0] = X0
    gens = [path_rng(config.seed, int(i)) for i in indices]

    X = np.full(n, float(X0))
    j = 1
    step = 0
    n_steps = config.n_steps
    while step < n_steps:
        m = min(_BLOCK, n_steps - step)
        noise = np.stack([g.standard_normal(m) for g in gens]) if eps > 0 else None
        for k in range(m):
            s = np.sqrt(X)
            with np.errstate(over="ignore", invalid="ignore"):
                inc = drift_f(X, params) * dt
                if noise is not None:
                    inc = inc + eps * s * sqdt * noise[:, k]
            X = X + inc
            step += 1
            if not np.all(np.isfinite(X)):
                bad = int(indices[np.flatnonzero(~np.isfinite(X))[0]])
                raise IntegrationError(f"non-finite state at step {step} of path {bad}",
                                       step=step, path_index=bad)
            np.maximum(X, 0.0, out=X)
            if j < len(rec) and step == rec[j]:
                out[:, j] = X
                j += 1
    return out


def simulate_path(X0: float, params: ModelParams, config: SimConfig, path_index: int = 0):
    """One Euler-Maruyama path with full truncation at 0.

    Returns
    -------
    times, X : ndarray
        Recorded times (kyr) and states (m).
    """
    if not (X0 >= 0 and math.isfinite(X0)):
        raise DomainError("X0 must be finite and >= 0")
    X = _integrate(X0, params, config, np.array([path_index]))[0]
    return config.record_steps() * config.dt, X


def simulate_ensemble(X0: float, params: ModelParams, config: SimConfig,
                      threads: int = 1) -> PathEnsemble:
    """Independent paths ``0 .. n_paths-1``; the result is independent of ``threads``."""
    if not (X0 >= 0 and math.isfinite(X0)):
        raise DomainError("X0 must be finite and >= 0")
    idx = np.arange(config.n_paths)
    chunks = [idx[i:i + _CHUNK] for i in range(0, len(idx), _CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _integrate(X0, params, config, c), chunks))
    else:
        parts = [_integrate(X0, params, config, c) for c in chunks]
    times = config.record_steps() * config.dt
    return PathEnsemble(times, np.vstack(parts), float(X0), config, params)


def ensemble_density(ensemble: PathEnsemble, t: float, bin_width: float | None = None,
                     edges: np.ndarray | None = None):
    """Histogram of the ensemble at the recorded time nearest ``t``.

    Either ``bin_width`` (bins anchored at 0) or explicit ``edges`` may be
    given. Returns ``(edges, density)`` with ``sum(density * widths) == 1``;
    samples outside explicit edges are dropped before normalizing.
    """
    if ensemble.n_paths == 0:
        raise DomainError("empty ensemble")
    k = int(np.argmin(np.abs(ensemble.times - t)))
    sample = ensemble.paths[:, k]
    if edges is None:
        if not (bin_width and bin_width > 0):
            raise DomainError("bin_width must be > 0")
        top = math.floor(sample.max() / bin_width) + 1
        edges = np.arange(top + 1) * bin_width
    counts, edges = np.histogram(sample, bins=edges)
    total = counts.sum()
    if total == 0:
        raise DomainError("no samples fall inside the bins")
    return edges, counts / (total * np.diff(edges))


def ensemble_csv(ensemble: PathEnsemble) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_kyr"] + [f"path_{i}" for i in range(ensemble.n_paths)])
    for j, t in enumerate(ensemble.times):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in ensemble.paths[:, j] / KM])
    return buf.getvalue()


def write_ensemble(ensemble: PathEnsemble, csv_path, json_path=None):
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(ensemble_csv(ensemble))
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(ensemble.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
