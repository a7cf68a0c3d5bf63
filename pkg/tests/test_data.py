import numpy as np
import pytest
from hypothesis import given, strategies as st

from itolab.conditioning import ExternalEmbedding
from itolab.data import (Dataset, SystemMeta, read_embedding, read_trajectory,
                         remove_center_of_gravity, sample_transition_batch, write_embedding,
                         write_trajectory)
from itolab.errors import (BadMagicError, InputError, SamplingError, TruncatedFileError,
                           UnsupportedVersionError)
from itolab.systems import Trajectory


def make_traj(M=20, n=2, d=1, sid="s", T=1.0, dtf=0.1):
    frames = np.arange(M * n * d, dtype=float).reshape(M, n, d)
    return Trajectory(frames, dtf, sid, T)


def test_trajectory_round_trip_is_exact(tmp_path, rng):
    tr = Trajectory(rng.normal(size=(7, 3, 2)), 0.025, "chäin", 1.3)
    write_trajectory(tmp_path / "a.itr", tr)
    back = read_trajectory(tmp_path / "a.itr")
    np.testing.assert_array_equal(back.frames, tr.frames)
    assert (back.frame_interval, back.system_id, back.temperature) == (0.025, "chäin", 1.3)


def test_trajectory_format_errors(tmp_path):
    p = tmp_path / "a.itr"
    write_trajectory(p, make_traj())
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"NOTATRAJ" + raw[8:])
    with pytest.raises(BadMagicError):
        read_trajectory(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:8] + (7).to_bytes(4, "little") + raw[12:])
    with pytest.raises(UnsupportedVersionError):
        read_trajectory(tmp_path / "ver")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        read_trajectory(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(TruncatedFileError):
        read_trajectory(tmp_path / "long")


def test_embedding_round_trip(tmp_path, rng):
    m = rng.normal(size=(4, 5)).astype(np.float32)
    write_embedding(tmp_path / "e.bin", m)
    e = read_embedding(tmp_path / "e.bin")
    np.testing.assert_array_equal(e.matrix, m)
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + b"\0" * 8)
    with pytest.raises(BadMagicError):
        read_embedding(tmp_path / "bad")


@given(st.integers(1, 6), st.integers(1, 3))
def test_center_of_gravity_removed(n, d):
    x = np.random.default_rng(n * 7 + d).normal(size=(4, n, d)) + 5.0
    np.testing.assert_allclose(remove_center_of_gravity(x).mean(axis=-2), 0.0, atol=1e-12)


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset([make_traj(n=2)], [SystemMeta(("A",))])
    with pytest.raises(InputError):
        Dataset([make_traj()], [])
    with pytest.raises(InputError):
        SystemMeta(("A", "B"), ExternalEmbedding(np.ones((3, 2))))


def test_dataset_properties():
    ds = Dataset([make_traj(T=0.5), make_traj(T=2.0, dtf=0.3), make_traj(n=3)],
                 [SystemMeta(("B", "A")), SystemMeta(("A", "A")), SystemMeta(("C",) * 3)])
    assert ds.vocabulary == ("A", "B", "C")
    assert ds.temperature_range == (0.5, 2.0)
    assert ds.max_frame_interval == 0.3
    g = ds.groups()
    assert set(g) == {(2, 1), (3, 1)}
    np.testing.assert_array_equal(g[(2, 1)], [0, 1])


def test_transition_pairs_are_consistent(rng):
    tr = make_traj(M=30, n=1)
    ds = Dataset([tr], [SystemMeta(("A",))])
    b = sample_transition_batch(ds, 5, 500, rng, center=False)
    assert b.delta_t.min() >= 1 and b.delta_t.max() <= 5
    assert b.start.max() <= 30 - 5 - 1
    np.testing.assert_array_equal(b.x_t[:, 0, 0], b.start)
    np.testing.assert_array_equal(b.x_target[:, 0, 0], b.start + b.delta_t)
    np.testing.assert_allclose(b.lag_time, b.delta_t * 0.1)
    assert set(np.unique(b.delta_t)) == set(range(1, 6))


def test_sampling_rejects_short_and_mixed(rng):
    ds = Dataset([make_traj(M=5)], [SystemMeta(("A", "B"))])
    with pytest.raises(SamplingError, match="5 frames"):
        sample_transition_batch(ds, 5, 4, rng)
    mixed = Dataset([make_traj(), make_traj(n=3)], [SystemMeta(("A", "A")), SystemMeta(("A",) * 3)])
    with pytest.raises(InputError):
        sample_transition_batch(mixed, 2, 4, rng)
    sample_transition_batch(mixed, 2, 4, rng, indices=[1])


def test_centering_applied_to_both_frames(rng):
    ds = Dataset([make_traj(n=3, d=2)], [SystemMeta(("A",) * 3)])
    b = sample_transition_batch(ds, 3, 16, rng)
    np.testing.assert_allclose(b.x_t.mean(1), 0.0, atol=1e-12)
    np.testing.assert_allclose(b.x_target.mean(1), 0.0, atol=1e-12)
