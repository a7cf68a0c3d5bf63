import numpy as np
import pytest
from hypothesis import given, strategies as st

from itolab.errors import InputError, IntegrationError
from itolab.systems import (BeadChain, DoubleWell, Harmonic, LangevinConfig, MuellerBrown,
                            Trajectory, boltzmann_log_weight, force, ou_transition_moments,
                            potential_energy, potential_from_dict, potential_to_dict,
                            simulate_ensemble, simulate_langevin)

# Global minimum of the four-Gaussian surface and probe energies, computed
# once with a dense grid followed by scipy.optimize.minimize (BFGS).
MB_MIN_X = np.array([-0.5582236363604153, 1.4417258397939947])
MB_MIN_E = -146.69951720995405
MB_PROBES = [((0.0, 0.0), -48.40127417318389), ((-0.5, 1.5), -145.27271669314962),
             ((1.0, 0.0), -53.40700152001108), ((0.5, 0.5), -35.62620054061109)]


def fd_force(spec, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = -(potential_energy(spec, xp) - potential_energy(spec, xm)) / (2 * h)
    return g


def test_harmonic_minimum_and_force():
    assert potential_energy(Harmonic(1.0, 0.0), np.zeros((1, 1))) == 0.0
    np.testing.assert_allclose(force(Harmonic(2.0, 0.0), np.array([[3.0]])), [[-6.0]])


def test_double_well_symmetric_minima_and_barrier_force():
    dw = DoubleWell(1.0, 1.0)
    assert potential_energy(dw, np.array([[1.0]])) == 0.0
    assert potential_energy(dw, np.array([[-1.0]])) == 0.0
    assert force(dw, np.array([[0.0]]))[0, 0] == 0.0
    assert DoubleWell(2.0, 1.5).barrier_height == pytest.approx(4.5)


def test_mueller_brown_minimum_matches_oracle():
    mb = MuellerBrown()
    assert potential_energy(mb, MB_MIN_X[None]) == pytest.approx(MB_MIN_E, abs=1e-9)
    np.testing.assert_allclose(force(mb, MB_MIN_X[None]), 0.0, atol=1e-5)
    for xy, e in MB_PROBES:
        assert potential_energy(mb, np.array([xy])) == pytest.approx(e, rel=1e-12)


def test_bead_chain_rest_length_has_zero_bond_force():
    chain = BeadChain(n_particles=2, dim=3, contacts=())
    x = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(force(chain, x), 0.0, atol=1e-12)


@pytest.mark.parametrize("spec", [Harmonic(1.7, 0.3, 2, 2), DoubleWell(1.3, 0.8), MuellerBrown(0.1),
                                  BeadChain()])
def test_force_matches_finite_differences(spec, rng):
    for _ in range(3):
        x = rng.normal(scale=0.7, size=(spec.n_particles, spec.dim))
        if spec.kind == "bead_chain":
            x = np.cumsum(rng.normal(scale=0.6, size=(spec.n_particles, spec.dim)), axis=0)
        np.testing.assert_allclose(force(spec, x), fd_force(spec, x), rtol=1e-6, atol=1e-6)


def test_shape_mismatch_is_rejected():
    with pytest.raises(InputError):
        potential_energy(DoubleWell(), np.zeros((2, 1)))


def test_boltzmann_weight_rejects_bad_temperature():
    with pytest.raises(InputError):
        boltzmann_log_weight(DoubleWell(), np.zeros((1, 1)), 0.0)
    assert boltzmann_log_weight(DoubleWell(), np.array([[0.0]]), 2.0) == pytest.approx(-0.5)


def test_potential_dict_round_trip():
    for spec in (Harmonic(2.0, 1.0), DoubleWell(2.0, 1.0), MuellerBrown(0.1), BeadChain()):
        assert potential_from_dict(potential_to_dict(spec)) == spec
    with pytest.raises(InputError):
        potential_from_dict({"kind": "nope"})


def test_langevin_frame_count_and_reproducibility():
    cfg = LangevinConfig(timestep=0.01, n_steps=105, save_stride=10, seed=3)
    a = simulate_langevin(DoubleWell(), cfg, np.array([[1.0]]))
    b = simulate_langevin(DoubleWell(), cfg, np.array([[1.0]]))
    assert len(a) == 105 // 10 + 1
    assert a.frame_interval == pytest.approx(0.1)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.frames[0], [[1.0]])


def test_ensemble_member_is_independent_of_batch():
    cfg = LangevinConfig(timestep=0.01, n_steps=50, seed=9)
    x0 = np.array([[[0.5]], [[-0.5]], [[0.0]]])
    full = simulate_ensemble(DoubleWell(), cfg, x0)
    part = simulate_ensemble(DoubleWell(), cfg, x0[:2])
    np.testing.assert_array_equal(full[1].frames, part[1].frames)
    assert not np.array_equal(full[0].frames, full[1].frames)


@pytest.mark.parametrize("integrator", ["overdamped", "baoab"])
def test_blowup_reports_step(integrator):
    cfg = LangevinConfig(timestep=1.0, n_steps=200, integrator=integrator)
    with pytest.raises(IntegrationError) as info:
        simulate_langevin(DoubleWell(5.0, 1.0), cfg, np.array([[3.0]]))
    assert info.value.step >= 1


def test_langevin_config_validation():
    for bad in ({"timestep": 0}, {"friction": -1}, {"temperature": 0}, {"save_stride": 0},
                {"integrator": "rk4"}):
        with pytest.raises(InputError):
            LangevinConfig(**bad)


def test_trajectory_validates_shape_and_interval():
    with pytest.raises(InputError):
        Trajectory(np.zeros((4, 1)), 0.1)
    with pytest.raises(InputError):
        Trajectory(np.zeros((4, 1, 1)), 0.0)
    assert len(Trajectory(np.zeros((4, 1, 1)), 0.1).subsample(2)) == 2


def test_ou_moments_closed_form():
    m, v = ou_transition_moments(2.0, 1.0, 0.5, 0.3)
    assert m == pytest.approx(np.exp(-0.6))
    assert v == pytest.approx(0.25 * (1 - np.exp(-1.2)))


@pytest.mark.parametrize("integrator", ["overdamped", "baoab"])
def test_harmonic_stationary_variance(integrator):
    # long run of a harmonic well; variance -> kT/theta
    T, theta = 0.7, 2.0
    cfg = LangevinConfig(timestep=0.005, n_steps=200_000, save_stride=20, temperature=T, seed=1,
                         integrator=integrator)
    x0 = np.zeros((16, 1, 1))
    frames = np.concatenate([t.frames[100:, 0, 0] for t in simulate_ensemble(Harmonic(theta), cfg, x0)])
    assert frames.var() == pytest.approx(T / theta, rel=0.05)


@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 3), st.floats(1e-3, 5))
def test_ou_moments_bounds(theta, gamma, T, dt):
    m, v = ou_transition_moments(theta, gamma, T, dt)
    assert 0 < m < 1
    assert 0 < v <= T / theta * (1 + 1e-12)


@given(st.floats(-3, 3), st.floats(0.1, 3))
def test_double_well_is_even(x, a):
    dw = DoubleWell(a, 1.0)
    assert potential_energy(dw, np.array([[x]])) == pytest.approx(potential_energy(dw, np.array([[-x]])))
