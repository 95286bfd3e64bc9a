import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from stochice.errors import ConfigError, DomainError, IntegrationError
from stochice.model import ModelParams, drift_f, equilibria
from stochice.sde_sim import (SimConfig, ensemble_csv, ensemble_density, simulate_ensemble,
                              simulate_path, write_ensemble)

P = ModelParams()
XP = equilibria(P).x_plus


def ode_oracle(X0, times, params):
    sol = solve_ivp(lambda t, x: [drift_f(max(x[0], 0.0), params)], (0, times[-1]), [X0],
                    method="DOP853", rtol=1e-12, atol=1e-6, t_eval=times)
    return sol.y[0]


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(T=1, dt=0), dict(T=0.001, dt=0.01), dict(T=1, n_paths=0),
                                    dict(T=1, seed=-1), dict(T=1, record_stride=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SimConfig(**kw)

    def test_stride_caps_records(self):
        cfg = SimConfig(T=100, dt=0.01)
        assert len(cfg.record_steps()) <= 2000
        assert cfg.record_steps()[-1] == cfg.n_steps


class TestPath:
    def test_fixed_point(self):
        t, X = simulate_path(XP, P.with_(eps0=0.0), SimConfig(T=100))
        assert np.max(np.abs(X - XP)) <= 1e-6

    def test_absorbing_origin(self):
        t, X = simulate_path(0.0, P.with_(eps0=0.5), SimConfig(T=10))
        assert np.all(X == 0.0)

    def test_matches_ode_and_monotone(self):
        t, X = simulate_path(1.8e6, P.with_(eps0=0.0), SimConfig(T=100))
        assert np.all(np.diff(X) <= 0) and X[-1] > XP
        assert np.max(np.abs(X - ode_oracle(1.8e6, t, P))) <= 100.0

    def test_first_order_convergence(self):
        errs = []
        for dt in (0.01, 0.005, 0.0025):
            t, X = simulate_path(1.2e6, P.with_(eps0=0.0), SimConfig(T=20, dt=dt))
            errs.append(np.max(np.abs(X - ode_oracle(1.2e6, t, P))))
        ratios = [errs[0] / errs[1], errs[1] / errs[2]]
        assert all(1.8 < r < 2.2 for r in ratios), (errs, ratios)

    def test_nonfinite_reports_step(self):
        with pytest.raises(IntegrationError) as info:
            simulate_path(1e306, P, SimConfig(T=1, dt=0.5), path_index=4)
        assert info.value.step == 1 and info.value.path_index == 4

    def test_negative_start(self):
        with pytest.raises(DomainError):
            simulate_path(-1.0, P, SimConfig(T=1))

    @settings(max_examples=25, deadline=None)
    @given(x0=st.floats(0.0, 3e6), eps0=st.floats(0.0, 3.0), seed=st.integers(0, 2 ** 32))
    def test_nonnegative(self, x0, eps0, seed):
        _, X = simulate_path(x0, P.with_(eps0=eps0), SimConfig(T=2, dt=0.05, seed=seed))
        assert np.all(X >= 0) and X[0] == x0


class TestEnsemble:
    def test_structure(self):
        ens = simulate_ensemble(1.8e6, P, SimConfig(T=5, n_paths=7, seed=1))
        assert ens.paths.shape == (7, len(ens.times))
        assert ens.times[0] == 0 and np.all(np.diff(ens.times) > 0)
        assert np.all(ens.paths[:, 0] == 1.8e6) and np.all(ens.paths >= 0)

    def test_path_matches_ensemble_row(self):
        cfg = SimConfig(T=3, n_paths=5, seed=9)
        ens = simulate_ensemble(1e6, P.with_(eps0=0.5), cfg)
        _, X = simulate_path(1e6, P.with_(eps0=0.5), cfg, path_index=3)
        np.testing.assert_array_equal(ens.paths[3], X)

    def test_thread_count_does_not_matter(self):
        cfg = SimConfig(T=2, n_paths=1100, seed=42)
        a = simulate_ensemble(1e6, P.with_(eps0=0.3), cfg, threads=1)
        b = simulate_ensemble(1e6, P.with_(eps0=0.3), cfg, threads=3)
        assert ensemble_csv(a) == ensemble_csv(b)

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = SimConfig(T=2, n_paths=20, seed=5)
        for name in ("a", "b"):
            write_ensemble(simulate_ensemble(1.8e6, P, cfg), tmp_path / f"{name}.csv",
                           tmp_path / f"{name}.json")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        meta = json.loads((tmp_path / "a.json").read_text())
        assert meta["seed"] == 5 and meta["config"]["n_paths"] == 20
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert header.split(",")[:3] == ["t_kyr", "path_0", "path_1"]

    def test_different_seeds_differ(self):
        a = simulate_ensemble(1.8e6, P, SimConfig(T=2, n_paths=10, seed=5))
        b = simulate_ensemble(1.8e6, P, SimConfig(T=2, n_paths=10, seed=6))
        assert not np.array_equal(a.paths[:, -1], b.paths[:, -1])

    def test_short_time_mean(self):
        X0, t, n = 1.0e6, 0.5, 4000
        p = P.with_(eps0=1.0)
        ens = simulate_ensemble(X0, p, SimConfig(T=t, dt=0.01, n_paths=n, seed=3))
        tol = 3 * p.epsilon * math.sqrt(X0) * math.sqrt(t) / math.sqrt(n)
        # second-order term: 0.5 f f' t^2, bounded generously
        tol += abs(drift_f(X0, p)) * 0.05 * t ** 2
        assert abs(ens.paths[:, -1].mean() - (X0 + drift_f(X0, p) * t)) <= tol

    def test_spread_brackets_fpe_mode(self):
        ens = simulate_ensemble(1.8e6, P, SimConfig(T=100, n_paths=100, seed=0))
        mode = 1738.5592e3  # stationary density mode, shifted by well under a meter
        late = ens.paths[:, -1]
        assert late.min() < mode < late.max()


class TestDensity:
    def test_normalized(self):
        ens = simulate_ensemble(1.8e6, P.with_(eps0=0.5), SimConfig(T=5, n_paths=300, seed=2))
        edges, dens = ensemble_density(ens, 5.0, 500.0)
        assert abs(np.sum(dens * np.diff(edges)) - 1) <= 1e-12

    def test_zero_noise_single_bin(self):
        ens = simulate_ensemble(1.8e6, P.with_(eps0=0.0), SimConfig(T=5, n_paths=50))
        edges, dens = ensemble_density(ens, 5.0, 1000.0)
        k = np.flatnonzero(dens)
        assert len(k) == 1
        x = ode_oracle(1.8e6, np.array([0.0, 5.0]), P)[-1]
        assert edges[k[0]] <= x < edges[k[0] + 1]

    def test_bad_width(self):
        ens = simulate_ensemble(1.8e6, P, SimConfig(T=1, n_paths=2))
        with pytest.raises(DomainError):
            ensemble_density(ens, 1.0, 0.0)
