"""Raw conditioning features: sinusoidal scalars, nominal tokens, external rows.

The per-particle feature matrix fed to the conditioning network is laid out as
``[token embedding | enc(dt) | enc(T) | external row | annotation embeddings]``.
The layout is described by :class:`FeatureLayout`, which is stored in every
checkpoint so that sampling assembles features exactly as training did.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .errors import InputError, LayoutMismatchError, VocabularyError

SUITABILITY_VOCAB = ("Yes", "No")
CONFIDENCE_VOCAB = ("High", "Medium", "Low")
DEFAULT_ANNOTATIONS = ("Yes", "High")

TOKEN_TABLE = "embed.tokens"
SUITABILITY_TABLE = "embed.suitability"
CONFIDENCE_TABLE = "embed.confidence"


@dataclass(frozen=True)
class SinusoidalSpec:
    """Frequencies run geometrically from 2*pi/max_period up by ``freq_ratio``."""

    dim: int = 16
    max_period: float = 1.0
    freq_ratio: float = 32.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise InputError(f"sinusoidal dim must be even and >= 2, got {self.dim}")
        if not self.max_period > 0:
            raise InputError("max_period must be positive")
        if not self.freq_ratio >= 1:
            raise InputError("freq_ratio must be >= 1")

    @property
    def frequencies(self) -> np.ndarray:
        k = self.dim // 2
        base = 2.0 * np.pi / self.max_period
        if k == 1:
            return np.array([base])
        return base * self.freq_ratio ** (np.arange(k) / (k - 1))


def sinusoidal_encode(value, spec: SinusoidalSpec) -> np.ndarray:
    """Encode scalar(s) as interleaved (sin, cos) pairs; output shape ``(..., dim)``."""
    v = np.asarray(value, dtype=np.float64)
    if not np.isfinite(v).all():
        raise InputError("cannot encode non-finite value")
    phase = v[..., None] * spec.frequencies
    out = np.empty(v.shape + (spec.dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


@dataclass
class NominalTable:
    """Learnable embedding matrix with one row per vocabulary token."""

    vocabulary: tuple[str, ...]
    weight: ag.Tensor

    def __post_init__(self):
        self.vocabulary = tuple(self.vocabulary)
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise InputError("vocabulary contains duplicate tokens")
        if self.weight.shape[0] != len(self.vocabulary):
            raise InputError(
                f"table has {self.weight.shape[0]} rows for {len(self.vocabulary)} tokens"
            )
        self._lookup = {tok: i for i, tok in enumerate(self.vocabulary)}

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def index(self, tokens) -> np.ndarray:
        arr = np.asarray(tokens, dtype=object)
        out = np.empty(arr.shape, dtype=np.int64)
        for pos, tok in np.ndenumerate(arr):
            try:
                out[pos] = self._lookup[tok]
            except KeyError:
                raise VocabularyError(f"unknown token {tok!r}; vocabulary is {list(self.vocabulary)}") from None
        return out


def embed_tokens(tokens, table: NominalTable) -> ag.Tensor:
    """Row lookup: output row i is the table row of token i (gradient flows to the table)."""
    ids = tokens if isinstance(tokens, np.ndarray) and tokens.dtype.kind == "i" else table.index(tokens)
    return ag.take_rows(table.weight, ids)


@dataclass(frozen=True)
class ExternalEmbedding:
    """Fixed, non-learnable per-particle feature rows (e.g. precomputed pLM output)."""

    matrix: np.ndarray
    source: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float32)
        if m.ndim != 2:
            raise InputError(f"external embedding must be 2-D, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise InputError("external embedding contains non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n_particles(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of the conditioning features and how to build them."""

    vocabulary: tuple[str, ...]
    token_dim: int
    dt_encoding: SinusoidalSpec
    temperature_encoding: SinusoidalSpec
    external_dim: int = 0
    annotation_dim: int = 0
    center: bool = True
    temperature_range: tuple[float, float] = (1.0, 1.0)
    max_lag: float = 1.0  # largest trained lag, physical time

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        object.__setattr__(self, "temperature_range", tuple(float(t) for t in self.temperature_range))
        if self.token_dim < 1:
            raise InputError("token_dim must be >= 1")
        if self.external_dim < 0 or self.annotation_dim < 0:
            raise InputError("channel widths must be non-negative")

    @property
    def width(self) -> int:
        return (self.token_dim + self.dt_encoding.dim + self.temperature_encoding.dim
                + self.external_dim + 2 * self.annotation_dim)

    def channels(self) -> list[tuple[str, int]]:
        chans = [("tokens", self.token_dim), ("dt", self.dt_encoding.dim),
                 ("temperature", self.temperature_encoding.dim)]
        if self.external_dim:
            chans.append(("external", self.external_dim))
        if self.annotation_dim:
            chans += [("suitability", self.annotation_dim), ("confidence", self.annotation_dim)]
        return chans

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocabulary"] = list(self.vocabulary)
        d["temperature_range"] = list(self.temperature_range)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureLayout":
        d = dict(d)
        d["dt_encoding"] = SinusoidalSpec(**d["dt_encoding"])
        d["temperature_encoding"] = SinusoidalSpec(**d["temperature_encoding"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "FeatureLayout":
        return cls.from_dict(json.loads(text))

    def check_compatible(self, other: "FeatureLayout") -> None:
        if self != other:
            mine, theirs = self.to_dict(), other.to_dict()
            diff = sorted(k for k in mine if mine[k] != theirs.get(k))
            raise LayoutMismatchError(f"feature layouts differ in {diff}")


def make_layout(vocabulary: Sequence[str], *, max_lag: float, temperature_range: tuple[float, float],
                token_dim: int = 8, encoding_dim: int = 16, external_dim: int = 0,
                annotation_dim: int = 0, center: bool = True) -> FeatureLayout:
    """Layout with encoding periods set to twice the largest lag and temperature."""
    return FeatureLayout(
        vocabulary=tuple(vocabulary),
        token_dim=token_dim,
        dt_encoding=SinusoidalSpec(encoding_dim, 2.0 * max_lag),
        temperature_encoding=SinusoidalSpec(encoding_dim, 2.0 * max(temperature_range)),
        external_dim=external_dim,
        annotation_dim=annotation_dim,
        center=center,
        temperature_range=temperature_range,
        max_lag=max_lag,
    )


def token_table(layout: FeatureLayout, tables: Mapping[str, ag.Tensor]) -> NominalTable:
    return NominalTable(layout.vocabulary, tables[TOKEN_TABLE])


def _per_sample(value, batch: int) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        return np.full(batch, float(v))
    if v.shape != (batch,):
        raise InputError(f"expected scalar or shape ({batch},), got {v.shape}")
    return v


def assemble_condition_features(layout: FeatureLayout, tables: Mapping[str, ag.Tensor], x_t,
                                dt, temperature, tokens, external=None,
                                annotations=None) -> ag.Tensor:
    """Per-particle conditioning features of shape ``(B, n, layout.width)``.

    ``x_t`` is ``(B, n, dim)`` and fixes the batch and particle counts.  ``dt``
    is physical time.  ``tokens`` are strings or ids, shape ``(n,)`` or ``(B, n)``.
    ``external`` is ``(n, d_ext)`` or ``(B, n, d_ext)``; ``annotations`` is one
    (suitability, confidence) pair or one per sample, defaulting to
    ("Yes", "High") when the layout carries that channel.
    """
    x_t = np.asarray(x_t)
    if x_t.ndim != 3:
        raise InputError(f"x_t must be (B, n, dim), got {x_t.shape}")
    B, n = x_t.shape[:2]
    dtype = tables[TOKEN_TABLE].dtype

    table = token_table(layout, tables)
    ids = tokens if isinstance(tokens, np.ndarray) and tokens.dtype.kind == "i" else table.index(tokens)
    ids = np.broadcast_to(ids, (B, n))
    parts = [embed_tokens(ids, table)]

    dt_enc = sinusoidal_encode(_per_sample(dt, B), layout.dt_encoding)
    t_enc = sinusoidal_encode(_per_sample(temperature, B), layout.temperature_encoding)
    scalars = np.concatenate([dt_enc, t_enc], axis=-1).astype(dtype)
    parts.append(ag.Tensor(np.broadcast_to(scalars[:, None, :], (B, n, scalars.shape[-1]))))

    if external is not None:
        ext = external.matrix if isinstance(external, ExternalEmbedding) else np.asarray(external)
        if ext.shape[-1] != layout.external_dim:
            raise LayoutMismatchError(
                f"external embedding width {ext.shape[-1]} but layout expects {layout.external_dim}"
            )
        if ext.shape[-2] != n:
            raise InputError(f"external embedding has {ext.shape[-2]} rows for {n} particles")
        parts.append(ag.Tensor(np.broadcast_to(ext, (B, n, layout.external_dim)).astype(dtype)))
    elif layout.external_dim:
        raise LayoutMismatchError("layout expects an external embedding channel but none was given")

    if layout.annotation_dim:
        ann = DEFAULT_ANNOTATIONS if annotations is None else annotations
        ann = np.broadcast_to(np.asarray(ann, dtype=object), (B, 2))
        suit = NominalTable(SUITABILITY_VOCAB, tables[SUITABILITY_TABLE])
        conf = NominalTable(CONFIDENCE_VOCAB, tables[CONFIDENCE_TABLE])
        for tab, col in ((suit, 0), (conf, 1)):
            rows = embed_tokens(tab.index(ann[:, col]), tab)  # (B, a)
            parts.append(ag.broadcast_to(ag.reshape(rows, (B, 1, layout.annotation_dim)),
                                         (B, n, layout.annotation_dim)))
    elif annotations is not None:
        raise LayoutMismatchError("annotations given but layout has no annotation channel")

    feats = ag.concat(parts, axis=-1)
    if feats.shape[-1] != layout.width:
        raise LayoutMismatchError(f"assembled width {feats.shape[-1]} != layout width {layout.width}")
    return feats
