"""Rectified conditional flow matching objective and the training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .conditioning import (DEFAULT_ANNOTATIONS, FeatureLayout, assemble_condition_features,
                           make_layout, token_table)
from .data import Dataset, SystemMeta, TransitionBatch, sample_transition_batch
from .errors import InputError, LayoutMismatchError, NumericError
from .model import (GradientSet, ModelConfig, ModelParams, VelocityFn, backward, cond_forward,
                    init_params, read_checkpoint, velocity_forward, write_checkpoint)
from .seeding import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    dt_max: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip: float = 0.1
    n_steps: int = 1000
    checkpoint_every: int = 0
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.dt_max < 1:
            out.append("dt_max must be >= 1")
        if not self.lr > 0:
            out.append("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            out.append("eps must be > 0")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        if not self.clip > 0:
            out.append("clip must be > 0")
        if self.n_steps < 0:
            out.append("n_steps must be >= 0")
        if self.checkpoint_every < 0 or self.lr_decay_every < 0:
            out.append("checkpoint_every and lr_decay_every must be >= 0")
        if not 0 < self.lr_decay_factor <= 1:
            out.append("lr_decay_factor must lie in (0, 1]")
        return out

    def __post_init__(self):
        bad = self.problems()
        if bad:
            raise InputError("; ".join(bad))

    def lr_at(self, step: int) -> float:
        if not self.lr_decay_every:
            return self.lr
        return self.lr * self.lr_decay_factor ** (step // self.lr_decay_every)


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        zeros = {k: np.zeros_like(a) for k, a in params.arrays().items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()}, 0)


class LossTerms(NamedTuple):
    loss: ag.Tensor
    s: np.ndarray
    noise: np.ndarray
    target: np.ndarray


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def features_from_metas(params: ModelParams, x_t: np.ndarray, lag_time, temperature,
                        metas: Sequence[SystemMeta]) -> ag.Tensor:
    """Conditioning features for a batch whose samples may come from different systems."""
    layout = params.layout
    table = token_table(layout, params)
    cache: dict[int, np.ndarray] = {}
    for m in metas:
        if id(m) not in cache:
            cache[id(m)] = table.index(m.tokens)
    ids = np.stack([cache[id(m)] for m in metas])
    external = None
    if layout.external_dim:
        if any(m.external is None for m in metas):
            raise LayoutMismatchError("model expects external embeddings but a system has none")
        external = np.stack([m.external.matrix for m in metas])
    annotations = None
    if layout.annotation_dim:
        annotations = [m.annotations or DEFAULT_ANNOTATIONS for m in metas]
    return assemble_condition_features(layout, params, x_t, lag_time, temperature, ids,
                                       external=external, annotations=annotations)


def cfm_loss(params: ModelParams, batch: TransitionBatch, rng: np.random.Generator,
             velocity_fn: VelocityFn | None = None) -> LossTerms:
    """Mean squared error between predicted velocity and x_target - noise.

    Draws s ~ U(0, 1) per sample, then noise ~ N(0, I) per coordinate, in that
    order.  ``velocity_fn(z_s, s, c)`` replaces the velocity network (test hook).
    """
    dtype = params.dtype
    B = len(batch)
    s = rng.uniform(0.0, 1.0, size=B)
    noise = rng.standard_normal(batch.x_target.shape)
    sb = s[:, None, None]
    z = (sb * batch.x_target + (1.0 - sb) * noise).astype(dtype)
    target = (batch.x_target - noise).astype(dtype)
    feats = features_from_metas(params, batch.x_t.astype(dtype), batch.lag_time, batch.temperature,
                                batch.metas)
    c = cond_forward(params, batch.x_t.astype(dtype), feats)
    v = (velocity_fn or (lambda z_, s_, c_: velocity_forward(params, z_, s_, c_)))(z, s, c)
    sq = ag.square(v - target)
    loss = sq.mean()
    if not np.isfinite(loss.data):
        bad = int(np.flatnonzero(~np.isfinite(sq.data.reshape(B, -1).sum(axis=1)))[0])
        raise NumericError("non-finite CFM loss", f"sample {bad}")
    return LossTerms(loss, s, noise, target)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def global_norm(grads: GradientSet) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_gradients(grads: GradientSet, threshold: float) -> GradientSet:
    """Rescale so the global L2 norm does not exceed ``threshold``."""
    if not threshold > 0:
        raise InputError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return dict(grads)
    scale = threshold / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


def optimizer_step(state: TrainState, grads: GradientSet, config: TrainConfig) -> TrainState:
    """One AdamW update (bias-corrected moments, decoupled weight decay)."""
    params = state.params.arrays()
    if set(grads) != set(params):
        raise InputError("gradient names do not match parameter names")
    t = state.step + 1
    lr = config.lr_at(state.step)
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise InputError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        dt = p.dtype
        m = (b1 * state.m[k] + (1 - b1) * g).astype(dt)
        v = (b2 * state.v[k] + (1 - b2) * g * g).astype(dt)
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * p
        new_p[k] = (p - lr * update).astype(dt)
        new_m[k], new_v[k] = m, v
    return TrainState(state.params.with_arrays(new_p), new_m, new_v, t)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def default_layout(dataset: Dataset, dt_max: int, center: bool = True, **kw) -> FeatureLayout:
    ext = {m.external.dim for m in dataset.metas if m.external is not None}
    return make_layout(dataset.vocabulary, max_lag=dt_max * dataset.max_frame_interval,
                       temperature_range=dataset.temperature_range, center=center,
                       external_dim=ext.pop() if len(ext) == 1 else 0, **kw)


def _draw_batch(dataset: Dataset, groups: list[np.ndarray], config: TrainConfig,
                rng: np.random.Generator, center: bool) -> TransitionBatch:
    if len(groups) == 1:
        return sample_transition_batch(dataset, config.dt_max, config.batch_size, rng, center)
    sizes = np.array([len(g) for g in groups], dtype=float)
    g = groups[rng.choice(len(groups), p=sizes / sizes.sum())]
    return sample_transition_batch(dataset, config.dt_max, config.batch_size, rng, center, indices=g)


def train(dataset: Dataset, model_config: ModelConfig, config: TrainConfig, *,
          layout: FeatureLayout | None = None, state: TrainState | None = None,
          checkpoint_dir=None, progress: Callable[[int, float], None] | None = None):
    """Run the flow-matching training loop up to ``config.n_steps`` total steps.

    Every step draws its batch and flow noise from the sub-stream
    ``(seed, "train", step)``, so continuing from a saved state reproduces an
    uninterrupted run exactly.  Returns ``(state, trace)`` where each trace row
    is ``(step, loss, grad_norm, wallclock_seconds)``.
    """
    if state is None:
        layout = layout or default_layout(dataset, config.dt_max)
        params = init_params(model_config, layout, seed=int(stream(config.seed, "init").integers(2 ** 31)))
        state = TrainState.fresh(params)
    center = state.params.layout.center
    groups = [g for _, g in sorted(dataset.groups().items())]
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    trace: list[tuple[int, float, float, float]] = []
    t0 = time.perf_counter()
    while state.step < config.n_steps:
        step = state.step
        rng = stream(config.seed, "train", step)
        batch = _draw_batch(dataset, groups, config, rng, center)
        try:
            terms = cfm_loss(state.params, batch, rng)
        except NumericError as exc:
            raise NumericError(f"training failed at step {step}: {exc}") from exc
        grads = backward(state.params, terms.loss)
        norm = global_norm(grads)
        state = optimizer_step(state, clip_gradients(grads, config.clip), config)
        loss = float(terms.loss.data)
        trace.append((step, loss, norm, time.perf_counter() - t0))
        if progress is not None:
            progress(step, loss)
        if ckpt_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_train_state(ckpt_dir / f"step_{state.step:08d}.ckpt", state, config.seed)
        if step % 500 == 0:
            log.debug("step %d loss %.5f grad_norm %.4f", step, loss, norm)
    return state, trace


def evaluate_loss(params: ModelParams, dataset: Dataset, dt_max: int, n_batches: int = 10,
                  batch_size: int = 256, seed: int = 0) -> float:
    """Average CFM loss over fixed held-out batches (no graph is built)."""
    total = 0.0
    groups = [g for _, g in sorted(dataset.groups().items())]
    cfg = TrainConfig(batch_size=batch_size, dt_max=dt_max)
    with ag.no_grad():
        for i in range(n_batches):
            rng = stream(seed, "eval", i)
            batch = _draw_batch(dataset, groups, cfg, rng, params.layout.center)
            total += float(cfm_loss(params, batch, rng).loss.data)
    return total / n_batches


def save_train_state(path, state: TrainState, seed: int) -> None:
    write_checkpoint(path, state.params, {"step": state.step, "seed": seed, "m": state.m, "v": state.v})


def load_train_state(path) -> tuple[TrainState, int]:
    params, opt = read_checkpoint(path)
    if opt is None:
        return TrainState.fresh(params), 0
    return TrainState(params, opt["m"], opt["v"], int(opt["step"])), int(opt["seed"])


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "grad_norm", "wallclock"])
        for step, loss, norm, wall in trace:
            w.writerow([step, repr(loss), repr(norm), f"{wall:.3f}"])


def train_config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
