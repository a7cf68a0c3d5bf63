import numpy as np
import pytest
from hypothesis import given, strategies as st

from itolab import autograd as ag
from itolab.conditioning import make_layout
from itolab.data import SystemMeta
from itolab.errors import (BadMagicError, ChecksumError, InputError, LayoutMismatchError,
                           NumericError, TruncatedFileError)
from itolab.model import (ModelConfig, backward, cond_forward, init_params, read_checkpoint,
                          velocity_forward, write_checkpoint)
from itolab.training import features_from_metas

from helpers import tiny_params


def forward(params, x, z, s, T=1.0, lag=0.5):
    meta = SystemMeta(("A",) * x.shape[1])
    f = features_from_metas(params, x, lag, T, [meta] * x.shape[0])
    return velocity_forward(params, z, s, cond_forward(params, x, f))


def test_output_shapes(rng):
    p = tiny_params(coord_dim=2)
    x = rng.normal(size=(3, 5, 2))
    v = forward(p, x, rng.normal(size=x.shape), 0.3)
    assert v.shape == x.shape
    # a single unbatched configuration is accepted too
    meta = SystemMeta(("A",) * 5)
    c = cond_forward(p, x[:1], features_from_metas(p, x[:1], 0.5, 1.0, [meta]))
    assert velocity_forward(p, x[0], 0.3, c).shape == (5, 2)


def test_single_particle_model(rng):
    p = tiny_params()
    x = rng.normal(size=(4, 1, 1))
    assert forward(p, x, x, np.linspace(0, 1, 4)).shape == (4, 1, 1)


def test_config_validation():
    with pytest.raises(InputError):
        ModelConfig(hidden_dim=10, n_attention_heads=4)
    with pytest.raises(InputError):
        ModelConfig(precision="float16")


def test_flow_time_outside_unit_interval_rejected(rng):
    p = tiny_params()
    x = rng.normal(size=(2, 1, 1))
    with pytest.raises(InputError):
        forward(p, x, x, 1.5)


def test_non_finite_input_raises_numeric_error(rng):
    p = tiny_params()
    x = rng.normal(size=(2, 1, 1))
    z = x.copy()
    z[1] = np.inf
    with pytest.raises(NumericError):
        forward(p, x, z, 0.5)


def test_gradients_match_finite_differences(rng):
    p = tiny_params(coord_dim=2)
    p = p.with_arrays({k: rng.normal(scale=0.5, size=a.shape) for k, a in p.arrays().items()})
    x, z = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 2))

    def loss_of(params):
        return ag.square(forward(params, x, z, np.array([0.2, 0.7]))).mean()

    grads = backward(p, loss_of(p))
    assert set(grads) == set(p)
    base = p.arrays()
    h = 1e-6
    for name in ("cond.in.w", "vel.block0.attn.q", "vel.pair.w", "embed.tokens"):
        idx = tuple(rng.integers(0, s) for s in base[name].shape)
        plus = {k: a.copy() for k, a in base.items()}
        minus = {k: a.copy() for k, a in base.items()}
        plus[name][idx] += h
        minus[name][idx] -= h
        with ag.no_grad():
            fd = (float(loss_of(p.with_arrays(plus)).data) - float(loss_of(p.with_arrays(minus)).data)) / (2 * h)
        assert abs(grads[name][idx]) > 1e-8, name
        assert grads[name][idx] == pytest.approx(fd, rel=1e-4), name


@given(st.integers(1, 4), st.integers(0, 3))
def test_samples_do_not_interact_within_a_batch(B, k):
    rng = np.random.default_rng(B * 10 + k)
    p = tiny_params(coord_dim=2)
    x, z = rng.normal(size=(B + 1, 3, 2)), rng.normal(size=(B + 1, 3, 2))
    s = rng.uniform(size=B + 1)
    with ag.no_grad():
        full = forward(p, x, z, s).data
        one = forward(p, x[k % (B + 1):][:1], z[k % (B + 1):][:1], s[k % (B + 1):][:1]).data
    np.testing.assert_allclose(full[k % (B + 1)], one[0], rtol=1e-10, atol=1e-12)


def test_velocity_head_starts_at_zero(rng):
    p = tiny_params()
    x = rng.normal(size=(2, 1, 1))
    with ag.no_grad():
        np.testing.assert_array_equal(forward(p, x, x, 0.5).data, 0.0)


def test_init_is_seeded():
    a, b, c = tiny_params(seed=1), tiny_params(seed=1), tiny_params(seed=2)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)
    assert a.n_parameters() == sum(t.data.size for t in a.values())


def test_checkpoint_round_trip(tmp_path, rng):
    p = tiny_params(precision="float32", annotation_dim=2)
    opt = {"step": 7, "seed": 3, "m": {k: rng.normal(size=a.shape).astype(np.float32) for k, a in p.arrays().items()},
           "v": {k: np.abs(rng.normal(size=a.shape)).astype(np.float32) for k, a in p.arrays().items()}}
    write_checkpoint(tmp_path / "m.ckpt", p, opt)
    q, o = read_checkpoint(tmp_path / "m.ckpt", expect_layout=p.layout)
    assert q.config == p.config and q.layout == p.layout
    for k in p:
        np.testing.assert_array_equal(q[k].data, p[k].data)
        np.testing.assert_array_equal(o["m"][k], opt["m"][k])
    assert (o["step"], o["seed"]) == (7, 3)
    write_checkpoint(tmp_path / "n.ckpt", p)
    assert read_checkpoint(tmp_path / "n.ckpt")[1] is None


def test_checkpoint_corruption_and_layout_checks(tmp_path):
    p = tiny_params(precision="float32")
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, p)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "flip").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_checkpoint(tmp_path / "flip")
    (tmp_path / "magic").write_bytes(b"XXXXXXXX" + bytes(raw[8:]))
    with pytest.raises(BadMagicError):
        read_checkpoint(tmp_path / "magic")
    (tmp_path / "short").write_bytes(path.read_bytes()[:10])
    with pytest.raises(TruncatedFileError):
        read_checkpoint(tmp_path / "short")
    other = make_layout(("A", "B"), max_lag=1.0, temperature_range=(1.0, 2.0))
    with pytest.raises(LayoutMismatchError):
        read_checkpoint(path, expect_layout=other)


def test_feature_width_mismatch(rng):
    p = tiny_params()
    x = rng.normal(size=(2, 1, 1))
    with pytest.raises(LayoutMismatchError):
        cond_forward(p, x, ag.Tensor(np.zeros((2, 1, 3))))
