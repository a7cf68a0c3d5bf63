import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from itolab.data import SystemMeta, read_trajectory
from itolab.errors import InputError, IntegrationError
from itolab.sampling import (EnsembleResult, SamplerConfig, ensemble_rollout, rollout, rollout_seed,
                            sample_transition, tail_window, temperature_sweep, write_ensemble)

from helpers import tiny_params

META1 = SystemMeta(("A",))


class FixedNoise:
    """Stands in for a Generator and hands out a fixed array."""

    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)

    def standard_normal(self, shape):
        return self.z.reshape(shape)


def gaussian_flow(m, sigma):
    """Marginal velocity transporting N(0, 1) to N(m, sigma^2) along the linear path."""
    def v(z, s, c):
        var = s * s * sigma ** 2 + (1 - s) ** 2
        return m + (s * sigma ** 2 - (1 - s)) / var * (z - s * m)
    return v


def test_euler_converges_to_exact_gaussian_transport():
    p = tiny_params()
    m, sigma = 0.7, 0.3
    z0 = np.array([-1.0, 0.0, 2.0])
    x0 = np.zeros((3, 1, 1))
    exact = m + sigma * z0
    errs = []
    for N in (25, 100, 400):
        out = sample_transition(p, x0, SamplerConfig(n_ode_steps=N), META1, lag=0.5, temperature=1.0,
                                rng=FixedNoise(z0), velocity_fn=gaussian_flow(m, sigma))
        errs.append(np.abs(out[:, 0, 0] - exact).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 5e-3
    # first-order method: error shrinks roughly 4x per 4x refinement
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.25)


def test_custom_grid_matches_uniform_grid():
    p = tiny_params()
    x0 = np.zeros((2, 1, 1))
    v = gaussian_flow(0.0, 0.5)
    a = sample_transition(p, x0, SamplerConfig(n_ode_steps=4), META1, lag=1, temperature=1,
                          rng=FixedNoise([1.0, -1.0]), velocity_fn=v)
    b = sample_transition(p, x0, SamplerConfig(grid=(0, 0.25, 0.5, 0.75, 1.0)), META1, lag=1,
                          temperature=1, rng=FixedNoise([1.0, -1.0]), velocity_fn=v)
    np.testing.assert_array_equal(a, b)


def test_grid_validation():
    for g in ((0.0, 0.5), (0.1, 1.0), (0.0, 0.6, 0.4, 1.0)):
        with pytest.raises(InputError):
            SamplerConfig(grid=g)
    with pytest.raises(InputError):
        SamplerConfig(n_ode_steps=0)


def test_integration_failure_reports_step():
    p = tiny_params()

    def blow(z, s, c):
        return np.full_like(z, np.nan) if s >= 0.5 else np.zeros_like(z)

    with pytest.raises(IntegrationError) as info:
        sample_transition(p, np.zeros((1, 1)), SamplerConfig(n_ode_steps=10), META1, lag=1, temperature=1,
                          velocity_fn=blow)
    assert info.value.step == 6


def test_recentering_for_translation_invariant_layout(rng):
    p = tiny_params(coord_dim=2, center=True)
    meta = SystemMeta(("A",) * 4)
    out = sample_transition(p, rng.normal(size=(3, 4, 2)), SamplerConfig(n_ode_steps=3), meta, lag=1,
                            temperature=1)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    r = rollout(p, rng.normal(size=(4, 2)) + 3.0, 1.0, 1.0, 3, SamplerConfig(n_ode_steps=3), meta)
    np.testing.assert_allclose(r.frames.mean(axis=1), 0.0, atol=1e-12)
    assert r.centering_drift.shape == (3,) and np.all(r.centering_drift >= 0)


def test_rollout_shapes_and_seeding():
    p = tiny_params()
    cfg = SamplerConfig(n_ode_steps=3, seed=11)
    r = rollout(p, np.zeros((1, 1)), 0.5, 1.0, 5, cfg, META1, traj_id=2)
    assert r.frames.shape == (6, 1, 1) and r.velocity_norm.shape == (5,)
    assert r.seed == rollout_seed(11, 2)
    ens = ensemble_rollout(p, np.zeros((3, 1, 1)), 0.5, 1.0, 5, cfg, META1)
    np.testing.assert_array_equal(ens.results[2].frames, r.frames)


@given(st.integers(1, 4), st.integers(1, 5))
def test_results_independent_of_workers_and_chunking(workers, chunk):
    p = tiny_params()
    x0s = np.linspace(-1, 1, 7).reshape(7, 1, 1)
    ref = ensemble_rollout(p, x0s, 0.5, 1.0, 3, SamplerConfig(n_ode_steps=2, chunk_size=7), META1)
    ens = ensemble_rollout(p, x0s, 0.5, 1.0, 3, SamplerConfig(n_ode_steps=2, chunk_size=chunk), META1,
                           workers=workers)
    for a, b in zip(ref.results, ens.results):
        np.testing.assert_array_equal(a.frames, b.frames)


def test_failed_trajectory_does_not_abort_ensemble(tmp_path):
    p = tiny_params()

    def hook(z, s, c):
        v = np.zeros_like(z)
        v[1] = np.inf
        return v

    ens = ensemble_rollout(p, np.zeros((3, 1, 1)), 0.5, 1.0, 4, SamplerConfig(n_ode_steps=2), META1,
                           velocity_fn=hook)
    assert list(ens.failures) == [1]
    assert ens.status(0) == "ok" and ens.status(1).startswith("failed")
    assert len(ens.ok) == 2
    write_ensemble(tmp_path, ens, 0.5, 1.0, "dw")
    rows = list(csv.reader(open(tmp_path / "manifest.csv")))
    assert rows[0] == ["trajectory", "seed", "status"] and rows[2][2].startswith("failed")
    assert not (tmp_path / "traj_00001.itr").exists()
    tr = read_trajectory(tmp_path / "traj_00002.itr")
    assert len(tr) == 5 and tr.frame_interval == 0.5


def test_sweep_warns_outside_trained_range():
    p = tiny_params()  # trained range (1, 2)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = temperature_sweep(p, np.zeros((2, 1, 1)), [1.5, 3.0], 0.5, 2, SamplerConfig(n_ode_steps=2), META1)
    assert [str(x.message) for x in w if issubclass(x.category, RuntimeWarning)] == \
        ["temperature 3.0 lies outside the trained range [1.0, 2.0]"]
    assert out[1.5].warnings == [] and len(out[3.0].warnings) == 1


def test_tail_window():
    p = tiny_params()
    ens = ensemble_rollout(p, np.zeros((3, 1, 1)), 0.5, 1.0, 5, SamplerConfig(n_ode_steps=2), META1)
    tail = tail_window(ens, 2)
    assert tail.shape == (6, 1, 1)
    np.testing.assert_array_equal(tail[:2], ens.results[0].frames[-2:])
    with pytest.raises(InputError):
        tail_window(ens, 7)
    with pytest.raises(InputError):
        tail_window(EnsembleResult([None], [0], {0: "x"}), 1)


@given(st.integers(1, 40))
def test_constant_field_is_integrated_exactly(N):
    p = tiny_params()
    w = 0.37
    z0 = np.array([0.5, -1.25])
    out = sample_transition(p, np.zeros((2, 1, 1)), SamplerConfig(n_ode_steps=N), META1, lag=1,
                            temperature=1, rng=FixedNoise(z0), velocity_fn=lambda z, s, c: np.full_like(z, w))
    np.testing.assert_allclose(out[:, 0, 0], z0 + w, rtol=1e-12)


def test_single_step_is_one_euler_step():
    p = tiny_params()
    z0 = np.array([0.3, 2.0])
    out = sample_transition(p, np.zeros((2, 1, 1)), SamplerConfig(n_ode_steps=1), META1, lag=1,
                            temperature=1, rng=FixedNoise(z0),
                            velocity_fn=lambda z, s, c: -2.0 * z + s)
    np.testing.assert_allclose(out[:, 0, 0], z0 + (-2.0 * z0 + 0.0))


def test_zero_step_rollout_is_initial_state():
    p = tiny_params()
    r = rollout(p, np.array([[0.4]]), 0.5, 1.0, 0, SamplerConfig(), META1)
    np.testing.assert_array_equal(r.frames, [[[0.4]]])
