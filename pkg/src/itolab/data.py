"""Trajectory storage, the training dataset and transition-pair sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditioning import ExternalEmbedding
from .errors import (BadMagicError, InputError, SamplingError, TruncatedFileError,
                     UnsupportedVersionError)
from .systems import Trajectory

TRAJ_MAGIC = b"ITOTRAJ1"
TRAJ_VERSION = 1
EMB_MAGIC = b"ITOEMB01"

_TRAJ_HEADER = struct.Struct("<8sIQIIdd")
_U32 = struct.Struct("<I")
_EMB_HEADER = struct.Struct("<8sII")


# ---------------------------------------------------------------------------
# binary formats
# ---------------------------------------------------------------------------

def write_trajectory(path, traj: Trajectory) -> None:
    sid = traj.system_id.encode("utf-8")
    M, n, d = traj.frames.shape
    with open(path, "wb") as fh:
        fh.write(_TRAJ_HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, M, n, d,
                                   float(traj.frame_interval), float(traj.temperature)))
        fh.write(_U32.pack(len(sid)))
        fh.write(sid)
        fh.write(np.ascontiguousarray(traj.frames, dtype="<f8").tobytes())


def _take(buf: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buf):
        raise TruncatedFileError(f"file truncated while reading {what}: need {offset + size} bytes, have {len(buf)}")
    return buf[offset:offset + size]


def read_trajectory(path) -> Trajectory:
    buf = Path(path).read_bytes()
    magic = buf[:8]
    if len(magic) == 8 and magic != TRAJ_MAGIC:
        raise BadMagicError(f"expected magic {TRAJ_MAGIC!r}, found {magic!r}")
    head = _take(buf, 0, _TRAJ_HEADER.size, "header")
    _, version, M, n, d, interval, temperature = _TRAJ_HEADER.unpack(head)
    if version != TRAJ_VERSION:
        raise UnsupportedVersionError(f"trajectory format version {version} (supported: {TRAJ_VERSION})")
    off = _TRAJ_HEADER.size
    (sid_len,) = _U32.unpack(_take(buf, off, 4, "system-id length"))
    off += 4
    sid = _take(buf, off, sid_len, "system id").decode("utf-8")
    off += sid_len
    nbytes = M * n * d * 8
    payload = _take(buf, off, nbytes, "frame payload")
    if off + nbytes != len(buf):
        raise TruncatedFileError(f"{len(buf) - off - nbytes} unexpected trailing bytes")
    frames = np.frombuffer(payload, dtype="<f8").reshape(M, n, d).astype(np.float64)
    return Trajectory(frames, interval, sid, temperature)


def write_embedding(path, emb: ExternalEmbedding | np.ndarray) -> None:
    m = emb.matrix if isinstance(emb, ExternalEmbedding) else np.asarray(emb)
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_embedding(path, source: str | None = None) -> ExternalEmbedding:
    buf = Path(path).read_bytes()
    magic = buf[:8]
    if len(magic) == 8 and magic != EMB_MAGIC:
        raise BadMagicError(f"expected magic {EMB_MAGIC!r}, found {magic!r}")
    _, n, d = _EMB_HEADER.unpack(_take(buf, 0, _EMB_HEADER.size, "header"))
    payload = _take(buf, _EMB_HEADER.size, n * d * 4, "embedding payload")
    m = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return ExternalEmbedding(m, source if source is not None else str(path))


# ---------------------------------------------------------------------------
# dataset and sampling
# ---------------------------------------------------------------------------

def remove_center_of_gravity(x) -> np.ndarray:
    """Subtract the per-dimension mean over particles (axis -2)."""
    x = np.asarray(x)
    return x - x.mean(axis=-2, keepdims=True)


@dataclass(frozen=True)
class SystemMeta:
    """Conditioning metadata of one system: per-particle tokens and optional extras."""

    tokens: tuple[str, ...]
    external: ExternalEmbedding | None = None
    annotations: tuple[str, str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.external is not None and self.external.n_particles != len(self.tokens):
            raise InputError(
                f"external embedding has {self.external.n_particles} rows for {len(self.tokens)} tokens"
            )
        if self.annotations is not None:
            object.__setattr__(self, "annotations", tuple(self.annotations))


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    metas: list[SystemMeta]

    def __post_init__(self):
        if len(self.trajectories) != len(self.metas):
            raise InputError("one SystemMeta is required per trajectory")
        for i, (tr, meta) in enumerate(zip(self.trajectories, self.metas)):
            if len(tr) == 0:
                raise InputError(f"trajectory {i} is empty")
            if tr.n_particles != len(meta.tokens):
                raise InputError(
                    f"trajectory {i} ({tr.system_id!r}) has {tr.n_particles} particles "
                    f"but {len(meta.tokens)} tokens"
                )
        self.lengths = np.array([len(t) for t in self.trajectories], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return tuple(sorted({tok for m in self.metas for tok in m.tokens}))

    @property
    def temperature_range(self) -> tuple[float, float]:
        temps = [t.temperature for t in self.trajectories]
        return min(temps), max(temps)

    @property
    def max_frame_interval(self) -> float:
        return max(t.frame_interval for t in self.trajectories)

    def groups(self) -> dict[tuple[int, int], np.ndarray]:
        """Trajectory indices grouped by (n_particles, dim)."""
        keys: dict[tuple[int, int], list[int]] = {}
        for i, tr in enumerate(self.trajectories):
            keys.setdefault((tr.n_particles, tr.dim), []).append(i)
        return {k: np.array(v) for k, v in keys.items()}


@dataclass
class TransitionBatch:
    x_t: np.ndarray            # (B, n, dim)
    x_target: np.ndarray       # (B, n, dim)
    delta_t: np.ndarray        # (B,) lag in frames
    frame_interval: np.ndarray  # (B,) physical time per frame
    temperature: np.ndarray    # (B,)
    metas: list[SystemMeta]
    traj_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    start: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.x_t.shape[0]

    @property
    def lag_time(self) -> np.ndarray:
        """Lag in physical time units."""
        return self.delta_t * self.frame_interval


def sample_transition_batch(dataset: Dataset, dt_max: int, batch_size: int,
                            rng: np.random.Generator, center: bool = True,
                            indices: Sequence[int] | None = None) -> TransitionBatch:
    """Draw ``batch_size`` training pairs (trajectory, start frame, lag) uniformly.

    Start frames are drawn from ``{0, ..., len - dt_max - 1}`` so every lag up to
    ``dt_max`` fits.  ``indices`` restricts sampling to a subset of trajectories,
    which must share particle count and dimension.
    """
    if dt_max < 1:
        raise InputError("dt_max must be >= 1")
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    shapes = {(dataset.trajectories[i].n_particles, dataset.trajectories[i].dim) for i in pool}
    if len(shapes) != 1:
        raise InputError(f"trajectories in one batch must share (n_particles, dim); found {sorted(shapes)}")
    for i in pool:
        if dataset.lengths[i] <= dt_max:
            tr = dataset.trajectories[i]
            raise SamplingError(
                f"trajectory {i} ({tr.system_id!r}) has {len(tr)} frames; need more than dt_max={dt_max}"
            )
    j = pool[rng.integers(0, len(pool), size=batch_size)]
    t = rng.integers(0, dataset.lengths[j] - dt_max)
    lag = rng.integers(1, dt_max + 1, size=batch_size)
    x_t = np.stack([dataset.trajectories[a].frames[b] for a, b in zip(j, t)])
    x_1 = np.stack([dataset.trajectories[a].frames[b] for a, b in zip(j, t + lag)])
    if center:
        x_t = remove_center_of_gravity(x_t)
        x_1 = remove_center_of_gravity(x_1)
    return TransitionBatch(
        x_t=x_t, x_target=x_1, delta_t=lag,
        frame_interval=np.array([dataset.trajectories[a].frame_interval for a in j]),
        temperature=np.array([dataset.trajectories[a].temperature for a in j]),
        metas=[dataset.metas[a] for a in j], traj_index=j, start=t,
    )
