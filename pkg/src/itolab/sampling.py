"""Euler ODE sampling of the learned transition density, rollouts and sweeps."""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .data import SystemMeta, remove_center_of_gravity, write_trajectory
from .errors import InputError, IntegrationError
from .model import ModelParams, VelocityFn, cond_forward, velocity_forward
from .seeding import derive_seed, stream
from .systems import Trajectory
from .training import features_from_metas

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    """ODE discretisation and bookkeeping for transition sampling.

    ``grid`` overrides the uniform grid of ``n_ode_steps`` steps; it must start
    at 0, end at 1 and increase strictly.
    """

    n_ode_steps: int = 50
    grid: tuple[float, ...] | None = None
    seed: int = 0
    recenter: bool = True
    chunk_size: int = 256

    def __post_init__(self):
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=np.float64)
            if g.ndim != 1 or len(g) < 2 or g[0] != 0.0 or g[-1] != 1.0 or np.any(np.diff(g) <= 0):
                raise InputError("grid must increase strictly from 0 to 1")
            object.__setattr__(self, "grid", tuple(float(v) for v in g))
            object.__setattr__(self, "n_ode_steps", len(g) - 1)
        if self.n_ode_steps < 1:
            raise InputError("n_ode_steps must be >= 1")
        if self.chunk_size < 1:
            raise InputError("chunk_size must be >= 1")

    @property
    def s_grid(self) -> np.ndarray:
        if self.grid is not None:
            return np.asarray(self.grid)
        return np.linspace(0.0, 1.0, self.n_ode_steps + 1)


@dataclass
class RolloutResult:
    frames: np.ndarray                 # (K+1, n, dim)
    velocity_norm: np.ndarray          # (K,) mean |v| over ODE steps
    centering_drift: np.ndarray        # (K,) |centre of gravity| before re-centering
    seed: int = 0

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class EnsembleResult:
    results: list[RolloutResult | None]
    seeds: list[int]
    failures: dict[int, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> list[RolloutResult]:
        return [r for r in self.results if r is not None]

    def status(self, i: int) -> str:
        return "ok" if self.results[i] is not None else f"failed: {self.failures[i]}"


def _as_batch(x, n_dims: int = 3) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        return a[None], True
    if a.ndim != 3:
        raise InputError(f"expected (n, dim) or (B, n, dim), got {a.shape}")
    return a, False


def _vfield(params: ModelParams, velocity_fn: VelocityFn | None):
    if velocity_fn is None:
        return lambda z, s, c: velocity_forward(params, z, s, c).data
    def hook(z, s, c):
        v = velocity_fn(z, s, c)
        return np.broadcast_to(v.data if isinstance(v, ag.Tensor) else np.asarray(v), z.shape)
    return hook


def _integrate(params: ModelParams, x0: np.ndarray, z0: np.ndarray, lag: float, temperature: float,
               meta: SystemMeta, cfg: SamplerConfig, velocity_fn: VelocityFn | None):
    """Euler integration for a batch; returns (z1, mean |v|, finite mask, first bad step)."""
    dtype = params.dtype
    B = x0.shape[0]
    with ag.no_grad():
        feats = features_from_metas(params, x0.astype(dtype), lag, temperature, [meta] * B)
        c = cond_forward(params, x0.astype(dtype), feats)
        f = _vfield(params, velocity_fn)
        s = cfg.s_grid
        z = z0.astype(np.float64)
        vnorm = np.zeros(B)
        bad_step = np.full(B, -1)
        for i in range(1, len(s)):
            v = np.asarray(f(z.astype(dtype), s[i - 1], c), dtype=np.float64)
            z = z + (s[i] - s[i - 1]) * v
            vnorm += np.sqrt(np.einsum("bnd,bnd->b", v, v) / v[0].size)
            finite = np.isfinite(z).all(axis=(1, 2))
            newly = ~finite & (bad_step < 0)
            bad_step[newly] = i
            if newly.any():
                z[~finite] = 0.0
    return z, vnorm / (len(s) - 1), bad_step


def sample_transition(params: ModelParams, x0, cfg: SamplerConfig, meta: SystemMeta, *,
                      lag: float, temperature: float, rng: np.random.Generator | None = None,
                      velocity_fn: VelocityFn | None = None) -> np.ndarray:
    """Draw x(t + lag) given x(t) = ``x0`` by integrating the learned flow from noise.

    ``x0`` is ``(n, dim)`` or a batch ``(B, n, dim)``; conditioning is computed once.
    Without ``rng`` the noise comes from the config seed.  ``velocity_fn`` replaces
    the velocity network (test hook) and receives ``(z, s, c)``.
    """
    x, squeeze = _as_batch(x0)
    if not np.isfinite(x).all():
        raise InputError("x0 contains non-finite values")
    center = params.layout.center
    if center:
        x = remove_center_of_gravity(x)
    rng = rng if rng is not None else stream(cfg.seed, "transition")
    z0 = rng.standard_normal(x.shape)
    z, _, bad = _integrate(params, x, z0, lag, temperature, meta, cfg, velocity_fn)
    if (bad >= 0).any():
        b = int(np.flatnonzero(bad >= 0)[0])
        raise IntegrationError(f"non-finite state in ODE integration of sample {b}", step=int(bad[b]))
    if cfg.recenter and center:
        z = remove_center_of_gravity(z)
    return z[0] if squeeze else z


def _rollout_chunk(params, x0s, seeds, lag, temperature, K, cfg, meta, velocity_fn):
    """Roll a chunk forward in lock step; rows that fail are frozen and reported."""
    B, n, d = x0s.shape
    center = params.layout.center
    x = remove_center_of_gravity(x0s) if center else x0s.copy()
    frames = np.empty((B, K + 1, n, d))
    frames[:, 0] = x
    vnorm = np.zeros((B, K))
    drift = np.zeros((B, K))
    noise = np.stack([np.random.default_rng(s).standard_normal((K, n, d)) for s in seeds]) if K else None
    failed: dict[int, str] = {}
    alive = np.ones(B, dtype=bool)
    for k in range(K):
        z, vn, bad = _integrate(params, x, noise[:, k], lag, temperature, meta, cfg, velocity_fn)
        for b in np.flatnonzero((bad >= 0) & alive):
            failed[int(b)] = f"non-finite state at rollout step {k} (ode step {int(bad[b])})"
            alive[b] = False
        if center:
            cog = z.mean(axis=1)
            drift[:, k] = np.sqrt((cog ** 2).sum(axis=-1))
            if cfg.recenter:
                z = z - cog[:, None, :]
        z[~alive] = 0.0
        vnorm[:, k] = vn
        frames[:, k + 1] = z
        x = z
    out = []
    for b in range(B):
        if b in failed:
            out.append(None)
        else:
            out.append(RolloutResult(frames[b], vnorm[b], drift[b], int(seeds[b])))
    return out, failed


def rollout_seed(seed: int, traj_id: int) -> int:
    return derive_seed(seed, "rollout", traj_id)


def rollout(params: ModelParams, x0, lag: float, temperature: float, K: int, cfg: SamplerConfig,
            meta: SystemMeta, *, traj_id: int = 0, velocity_fn: VelocityFn | None = None) -> RolloutResult:
    """Chain ``K`` sampled transitions into a trajectory of ``K + 1`` frames."""
    if K < 0:
        raise InputError("K must be >= 0")
    x, _ = _as_batch(x0)
    if x.shape[0] != 1:
        raise InputError("rollout takes a single initial state; use ensemble_rollout for batches")
    res, failed = _rollout_chunk(params, x, [rollout_seed(cfg.seed, traj_id)], lag, temperature, K,
                                 cfg, meta, velocity_fn)
    if failed:
        raise IntegrationError(f"rollout {traj_id} failed: {failed[0]}")
    return res[0]


def ensemble_rollout(params: ModelParams, x0s, lag: float, temperature: float, K: int,
                     cfg: SamplerConfig, meta: SystemMeta, *, workers: int = 1,
                     velocity_fn: VelocityFn | None = None) -> EnsembleResult:
    """Independent rollouts from each initial state in ``x0s`` ``(n_traj, n, dim)``.

    Trajectories are processed in fixed chunks of ``cfg.chunk_size`` whatever
    the worker count, and every trajectory draws from its own seeded stream, so
    results do not depend on ``workers``.  Failed trajectories are recorded in
    ``failures`` while the rest of the ensemble completes.
    """
    if K < 0:
        raise InputError("K must be >= 0")
    x0s, _ = _as_batch(x0s)
    n_traj = x0s.shape[0]
    seeds = [rollout_seed(cfg.seed, i) for i in range(n_traj)]
    bounds = [(a, min(a + cfg.chunk_size, n_traj)) for a in range(0, n_traj, cfg.chunk_size)]

    def run(ab):
        a, b = ab
        return _rollout_chunk(params, x0s[a:b], seeds[a:b], lag, temperature, K, cfg, meta, velocity_fn)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(ab) for ab in bounds]
    results: list[RolloutResult | None] = []
    failures: dict[int, str] = {}
    for (a, _), (res, failed) in zip(bounds, parts):
        results.extend(res)
        failures.update({a + i: msg for i, msg in failed.items()})
    for i, msg in failures.items():
        log.warning("trajectory %d: %s", i, msg)
    return EnsembleResult(results, seeds, failures)


def temperature_sweep(params: ModelParams, x0s, temperatures: Sequence[float], lag: float, K: int,
                      cfg: SamplerConfig, meta: SystemMeta, *, workers: int = 1,
                      velocity_fn: VelocityFn | None = None) -> dict[float, EnsembleResult]:
    """One ensemble per temperature, all started from the same initial states.

    Temperatures outside the trained range trigger a warning (recorded on the
    corresponding ensemble) but are still sampled.
    """
    lo, hi = params.layout.temperature_range
    out = {}
    for T in temperatures:
        ens = ensemble_rollout(params, x0s, lag, float(T), K, cfg, meta, workers=workers,
                               velocity_fn=velocity_fn)
        if not lo - 1e-12 <= T <= hi + 1e-12:
            msg = f"temperature {T} lies outside the trained range [{lo}, {hi}]"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            ens.warnings.append(msg)
        out[float(T)] = ens
    return out


def tail_window(ensemble: EnsembleResult | Sequence[RolloutResult], W: int) -> np.ndarray:
    """Last ``W`` frames of every successful trajectory, stacked to ``(W * n_ok, n, dim)``."""
    results = ensemble.ok if isinstance(ensemble, EnsembleResult) else list(ensemble)
    if W < 1:
        raise InputError("tail window must be >= 1")
    if not results:
        raise InputError("no successful trajectories")
    if any(len(r) < W for r in results):
        raise InputError(f"tail window {W} exceeds trajectory length {min(len(r) for r in results)}")
    return np.concatenate([r.frames[-W:] for r in results])


def write_ensemble(directory, ensemble: EnsembleResult, lag: float, temperature: float,
                   system_id: str = "") -> Path:
    """Write each trajectory as a trajectory file plus ``manifest.csv`` (id, seed, status)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(ensemble.results):
        if r is not None:
            write_trajectory(d / f"traj_{i:05d}.itr", Trajectory(r.frames, lag, system_id, temperature))
    path = d / "manifest.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "seed", "status"])
        for i, seed in enumerate(ensemble.seeds):
            w.writerow([i, seed, ensemble.status(i)])
    return path
