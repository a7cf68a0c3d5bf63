import numpy as np
import pytest
from hypothesis import given, strategies as st

from itolab import autograd as ag
from itolab.data import sample_transition_batch
from itolab.errors import InputError, NumericError
from itolab.model import ModelConfig
from itolab.training import (TrainConfig, TrainState, cfm_loss, clip_gradients, evaluate_loss,
                            global_norm, load_train_state, optimizer_step, save_train_state, train,
                            write_loss_trace)

from helpers import TINY, tiny_params, toy_dataset


def batch(rng, n=1, B=16):
    return sample_transition_batch(toy_dataset(n=n), 3, B, rng, center=False)


def test_loss_vanishes_for_the_exact_conditional_velocity(rng):
    p = tiny_params()
    b = batch(rng)
    # along z = s x1 + (1 - s) eps the velocity x1 - eps equals (x1 - z) / (1 - s)
    hook = lambda z, s, c: ag.Tensor((b.x_target - z) / (1.0 - s)[:, None, None])
    terms = cfm_loss(p, b, np.random.default_rng(0), velocity_fn=hook)
    assert float(terms.loss.data) < 1e-18


def test_loss_draw_order_and_value(rng):
    p = tiny_params()
    b = batch(rng)
    zero = lambda z, s, c: ag.Tensor(np.zeros_like(z))
    terms = cfm_loss(p, b, np.random.default_rng(5), velocity_fn=zero)
    r = np.random.default_rng(5)
    s = r.uniform(size=len(b))
    eps = r.standard_normal(b.x_target.shape)
    np.testing.assert_array_equal(terms.s, s)
    np.testing.assert_array_equal(terms.noise, eps)
    assert float(terms.loss.data) == pytest.approx(np.mean((b.x_target - eps) ** 2))


def test_non_finite_loss_names_sample(rng):
    p = tiny_params()
    b = batch(rng)

    def hook(z, s, c):
        v = np.zeros_like(z)
        v[3] = np.nan
        return ag.Tensor(v)

    with pytest.raises(NumericError, match="sample 3"):
        cfm_loss(p, b, rng, velocity_fn=hook)


@given(st.floats(0.01, 10), st.integers(0, 5))
def test_clipping_bounds_the_global_norm(threshold, seed):
    r = np.random.default_rng(seed)
    g = {"a": r.normal(size=(3, 4)) * 10, "b": r.normal(size=5)}
    out = clip_gradients(g, threshold)
    assert global_norm(out) <= threshold * (1 + 1e-9)
    if global_norm(g) <= threshold:
        assert all(np.array_equal(out[k], g[k]) for k in g)
    else:
        ratio = out["a"] / g["a"]
        np.testing.assert_allclose(ratio, ratio.flat[0])


def test_adamw_first_step_matches_hand_computation():
    p = tiny_params()
    st_ = TrainState.fresh(p)
    grads = {k: np.full_like(a, 0.5) for k, a in p.arrays().items()}
    cfg = TrainConfig(lr=0.01, weight_decay=0.1)
    new = optimizer_step(st_, grads, cfg)
    for k, a in p.arrays().items():
        # bias-corrected first step: m_hat / sqrt(v_hat) = sign(g)
        expected = a - 0.01 * (0.5 / (0.5 + 1e-8) + 0.1 * a)
        np.testing.assert_allclose(new.params[k].data, expected, rtol=1e-12)
    assert new.step == 1


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, lr_decay_every=10, lr_decay_factor=0.5)
    assert [cfg.lr_at(s) for s in (0, 9, 10, 25)] == [1.0, 1.0, 0.5, 0.25]


def test_config_validation():
    for bad in ({"batch_size": 0}, {"lr": 0}, {"clip": 0}, {"beta1": 1.0}, {"lr_decay_factor": 0}):
        with pytest.raises(InputError):
            TrainConfig(**bad)


def test_training_reduces_loss():
    ds = toy_dataset(M=400)
    cfg = TrainConfig(batch_size=64, dt_max=3, lr=3e-3, n_steps=150, seed=1)
    model = ModelConfig(precision="float64", **TINY)
    st_, trace = train(ds, model, cfg)
    first = np.mean([r[1] for r in trace[:20]])
    last = np.mean([r[1] for r in trace[-20:]])
    assert last < 0.8 * first
    assert len(trace) == 150 and st_.step == 150


def test_resume_is_bit_identical(tmp_path):
    ds = toy_dataset(n=2, T=(1.0, 1.5))
    model = ModelConfig(**TINY)
    full, _ = train(ds, model, TrainConfig(batch_size=8, dt_max=3, n_steps=12, seed=4))
    half, _ = train(ds, model, TrainConfig(batch_size=8, dt_max=3, n_steps=6, seed=4))
    save_train_state(tmp_path / "h.ckpt", half, 4)
    state, seed = load_train_state(tmp_path / "h.ckpt")
    assert (state.step, seed) == (6, 4)
    resumed, trace = train(ds, model, TrainConfig(batch_size=8, dt_max=3, n_steps=12, seed=4), state=state)
    assert [r[0] for r in trace] == list(range(6, 12))
    for k in full.params:
        np.testing.assert_array_equal(resumed.params[k].data, full.params[k].data)


def test_periodic_checkpoints_and_trace(tmp_path):
    ds = toy_dataset()
    st_, trace = train(ds, ModelConfig(**TINY), TrainConfig(batch_size=4, dt_max=2, n_steps=4, checkpoint_every=2),
                       checkpoint_dir=tmp_path / "ck")
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["step_00000002.ckpt", "step_00000004.ckpt"]
    write_loss_trace(tmp_path / "trace.csv", trace)
    assert len((tmp_path / "trace.csv").read_text().strip().splitlines()) >= 5
    a = evaluate_loss(st_.params, ds, 2, n_batches=2, batch_size=8)
    assert a == evaluate_loss(st_.params, ds, 2, n_batches=2, batch_size=8) and np.isfinite(a)
