"""Two-stage transition model: conditioning network and velocity network.

``cond_forward`` maps the current configuration and its conditioning features
to a per-particle representation ``c``; ``velocity_forward`` maps a noisy
configuration ``z_s`` at flow time ``s`` together with ``c`` to a velocity.
Both networks share one block design::

    h <- h + Linear(Attention(act(Linear(LayerNorm(h))), pair_bias))

where the attention bias is built from pairwise distances (radial basis) and
signed sequence separation.  Translation is removed upstream by centering;
nothing else is made equivariant.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from . import autograd as ag
from .conditioning import (CONFIDENCE_TABLE, CONFIDENCE_VOCAB, SUITABILITY_TABLE, SUITABILITY_VOCAB,
                           TOKEN_TABLE, FeatureLayout, SinusoidalSpec, sinusoidal_encode)
from .errors import (BadMagicError, ChecksumError, InputError, LayoutMismatchError, NumericError,
                     TruncatedFileError, UnsupportedVersionError)

GradientSet = dict  # parameter name -> gradient array, same shapes as the parameters

_LN_EPS = 1e-5
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    coord_dim: int = 1
    residue_repr_dim: int = 64
    cond_dim: int = 32
    hidden_dim: int = 64
    n_attention_heads: int = 4
    n_layers_fc: int = 2
    n_layers_fv: int = 3
    s_encoding_dim: int = 16
    use_pair_bias: bool = True
    n_rbf: int = 8
    r_max: float = 4.0
    max_seq_sep: int = 8
    precision: str = "float32"

    def problems(self) -> list[str]:
        out = []
        for name in ("coord_dim", "residue_repr_dim", "cond_dim", "hidden_dim", "n_attention_heads",
                     "n_layers_fc", "n_layers_fv", "n_rbf", "max_seq_sep"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.n_attention_heads >= 1 and self.hidden_dim % self.n_attention_heads:
            out.append("n_attention_heads must divide hidden_dim")
        if self.s_encoding_dim < 2 or self.s_encoding_dim % 2:
            out.append("s_encoding_dim must be even and >= 2")
        if not self.r_max > 0:
            out.append("r_max must be > 0")
        if self.precision not in _DTYPES:
            out.append(f"precision must be one of {sorted(_DTYPES)}")
        return out

    def __post_init__(self):
        bad = self.problems()
        if bad:
            raise InputError("; ".join(bad))

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    @property
    def s_encoding(self) -> SinusoidalSpec:
        return SinusoidalSpec(self.s_encoding_dim, 2.0)

    @property
    def n_pair_features(self) -> int:
        return self.n_rbf + 2 * self.max_seq_sep + 1


class ModelParams(Mapping):
    """Ordered named parameter tensors plus the architecture they belong to."""

    def __init__(self, config: ModelConfig, layout: FeatureLayout, tensors: dict[str, ag.Tensor]):
        self.config = config
        self.layout = layout
        self.tensors = dict(tensors)
        for name, t in self.tensors.items():
            t.requires_grad = True
            t.name = name

    def __getitem__(self, name: str) -> ag.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        if set(arrays) != set(self.tensors):
            raise InputError("parameter names do not match")
        out = {}
        for k, t in self.tensors.items():
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise InputError(f"shape mismatch for {k}: {a.shape} vs {t.shape}")
            out[k] = ag.Tensor(a.copy())
        return ModelParams(self.config, self.layout, out)

    def astype(self, dtype) -> "ModelParams":
        return self.with_arrays({k: v.astype(dtype) for k, v in self.arrays().items()})

    def copy(self) -> "ModelParams":
        return self.with_arrays(self.arrays())


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _block_shapes(prefix: str, width: int, hidden: int) -> dict[str, tuple]:
    return {
        f"{prefix}.norm.g": (width,), f"{prefix}.norm.b": (width,),
        f"{prefix}.pre.w": (width, hidden), f"{prefix}.pre.b": (hidden,),
        f"{prefix}.attn.q": (hidden, hidden), f"{prefix}.attn.k": (hidden, hidden),
        f"{prefix}.attn.v": (hidden, hidden),
        f"{prefix}.post.w": (hidden, width), f"{prefix}.post.b": (width,),
    }


def parameter_shapes(config: ModelConfig, layout: FeatureLayout) -> dict[str, tuple]:
    R, C, H, d = config.residue_repr_dim, config.cond_dim, config.hidden_dim, config.coord_dim
    shapes: dict[str, tuple] = {TOKEN_TABLE: (len(layout.vocabulary), layout.token_dim)}
    if layout.annotation_dim:
        shapes[SUITABILITY_TABLE] = (len(SUITABILITY_VOCAB), layout.annotation_dim)
        shapes[CONFIDENCE_TABLE] = (len(CONFIDENCE_VOCAB), layout.annotation_dim)
    for net, n_layers, n_in in (("cond", config.n_layers_fc, d + layout.width),
                                ("vel", config.n_layers_fv, d + config.s_encoding_dim + C)):
        shapes[f"{net}.in.w"] = (n_in, R)
        shapes[f"{net}.in.b"] = (R,)
        if config.use_pair_bias:
            shapes[f"{net}.pair.w"] = (config.n_pair_features, config.n_attention_heads)
        for i in range(n_layers):
            shapes.update(_block_shapes(f"{net}.block{i}", R, H))
        shapes[f"{net}.out.norm.g"] = (R,)
        shapes[f"{net}.out.norm.b"] = (R,)
        shapes[f"{net}.out.w"] = (R, C if net == "cond" else d)
        shapes[f"{net}.out.b"] = (C if net == "cond" else d,)
    return shapes


def init_params(config: ModelConfig, layout: FeatureLayout, seed: int = 0) -> ModelParams:
    """Fan-in uniform weights, unit norms, zero biases; velocity head starts at zero."""
    rng = np.random.default_rng(seed)
    dtype = config.dtype
    tensors = {}
    for name, shape in parameter_shapes(config, layout).items():
        if name.startswith("embed."):
            a = rng.standard_normal(shape)
        elif name.endswith(".norm.g"):
            a = np.ones(shape)
        elif name.startswith("vel.out.") or len(shape) == 1:
            a = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            a = rng.uniform(-bound, bound, size=shape)
        tensors[name] = ag.Tensor(a.astype(dtype))
    return ModelParams(config, layout, tensors)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _linear(params, prefix: str, x: ag.Tensor) -> ag.Tensor:
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def _layer_norm(params, prefix: str, x: ag.Tensor) -> ag.Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = ag.square(xc).mean(axis=-1, keepdims=True)
    return xc / ag.sqrt(var + _LN_EPS) * params[f"{prefix}.g"] + params[f"{prefix}.b"]


def pair_features(config: ModelConfig, x) -> ag.Tensor:
    """Radial-basis distances and one-hot sequence separation, ``(B, n, n, n_pair_features)``."""
    x = ag.as_tensor(x)
    B, n, d = x.shape
    diff = ag.reshape(x, (B, n, 1, d)) - ag.reshape(x, (B, 1, n, d))
    dist = ag.sqrt(ag.square(diff).sum(axis=-1) + 1e-12)  # smooth at i == j
    centers = np.linspace(0.0, config.r_max, config.n_rbf).astype(x.dtype)
    width = config.r_max / max(config.n_rbf - 1, 1)
    rbf = ag.exp(ag.square(ag.reshape(dist, (B, n, n, 1)) - centers) * (-0.5 / width ** 2))
    S = config.max_seq_sep
    idx = np.arange(n)
    sep = np.clip(idx[None, :] - idx[:, None], -S, S) + S
    onehot = np.eye(2 * S + 1, dtype=x.dtype)[sep]
    return ag.concat([rbf, ag.Tensor(np.broadcast_to(onehot, (B, n, n, 2 * S + 1)))], axis=-1)


def pair_bias(params: ModelParams, net: str, x) -> ag.Tensor | None:
    """Per-head additive attention bias ``(B, n, n, heads)`` for network ``net``."""
    cfg = params.config
    if not cfg.use_pair_bias:
        return None
    feats = pair_features(cfg, x)
    return feats @ params[f"{net}.pair.w"]


def _attention(params, prefix: str, u: ag.Tensor, bias: ag.Tensor | None, heads: int) -> ag.Tensor:
    B, n, H = u.shape
    v = u @ params[f"{prefix}.v"]
    if n == 1:
        return v  # softmax over a single key is exactly 1
    dh = H // heads
    q = (u @ params[f"{prefix}.q"]).reshape(B, n, heads, dh).transpose(0, 2, 1, 3)
    k = (u @ params[f"{prefix}.k"]).reshape(B, n, heads, dh).transpose(0, 2, 3, 1)
    vh = v.reshape(B, n, heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / np.sqrt(dh))
    if bias is not None:
        scores = scores + bias.transpose(0, 3, 1, 2)
    att = ag.softmax(scores, axis=-1)
    return (att @ vh).transpose(0, 2, 1, 3).reshape(B, n, H)


def _block(params, prefix: str, h: ag.Tensor, bias, heads: int) -> ag.Tensor:
    u = ag.silu(_linear(params, f"{prefix}.pre", _layer_norm(params, f"{prefix}.norm", h)))
    a = _attention(params, f"{prefix}.attn", u, bias, heads)
    return h + _linear(params, f"{prefix}.post", a)


def _check_finite(t: ag.Tensor, where: str) -> None:
    if not np.isfinite(t.data).all():
        raise NumericError("non-finite activation", where)


def _trunk(params: ModelParams, net: str, n_layers: int, inp: ag.Tensor, coords) -> ag.Tensor:
    cfg = params.config
    h = _linear(params, f"{net}.in", inp)
    bias = pair_bias(params, net, coords) if inp.shape[1] > 1 else None
    for i in range(n_layers):
        h = _block(params, f"{net}.block{i}", h, bias, cfg.n_attention_heads)
        _check_finite(h, f"{net}.block{i}")
    out = _linear(params, f"{net}.out", _layer_norm(params, f"{net}.out.norm", h))
    _check_finite(out, f"{net}.out")
    return out


def _batched(x, dtype) -> tuple[ag.Tensor, bool]:
    if isinstance(x, ag.Tensor):
        return (x, False) if x.ndim == 3 else (ag.reshape(x, (1,) + x.shape), True)
    a = np.asarray(x, dtype=dtype)
    return (ag.Tensor(a), False) if a.ndim == 3 else (ag.Tensor(a[None]), True)


def cond_forward(params: ModelParams, x_t, features: ag.Tensor) -> ag.Tensor:
    """Per-particle conditioning representation ``c`` of shape ``(B, n, cond_dim)``."""
    cfg = params.config
    x, _ = _batched(x_t, params.dtype)
    if x.shape[-1] != cfg.coord_dim:
        raise InputError(f"coordinates have dim {x.shape[-1]}, model expects {cfg.coord_dim}")
    if features.shape[-1] != params.layout.width:
        raise LayoutMismatchError(
            f"feature width {features.shape[-1]} does not match layout width {params.layout.width}"
        )
    if features.shape[:2] != x.shape[:2]:
        raise InputError(f"features {features.shape[:2]} and coordinates {x.shape[:2]} disagree")
    inp = ag.concat([x, features], axis=-1)
    return _trunk(params, "cond", cfg.n_layers_fc, inp, x)


def velocity_forward(params: ModelParams, z_s, s, c: ag.Tensor) -> ag.Tensor:
    """Velocity at flow time ``s`` (scalar or one per sample), same shape as ``z_s``."""
    cfg = params.config
    z, squeeze = _batched(z_s, params.dtype)
    B, n, _ = z.shape
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0) or np.any(s_arr > 1):
        raise InputError("flow time s must lie in [0, 1]")
    s_enc = sinusoidal_encode(np.broadcast_to(s_arr, (B,)), cfg.s_encoding).astype(params.dtype)
    s_feat = ag.Tensor(np.broadcast_to(s_enc[:, None, :], (B, n, cfg.s_encoding_dim)))
    if c.shape[:2] != (B, n) and c.shape[0] == 1:
        c = ag.broadcast_to(c, (B, n, c.shape[-1]))
    inp = ag.concat([z, s_feat, c], axis=-1)
    v = _trunk(params, "vel", cfg.n_layers_fv, inp, z)
    return ag.reshape(v, v.shape[1:]) if squeeze else v


def backward(params: ModelParams, loss: ag.Tensor) -> GradientSet:
    """Gradient of a scalar loss w.r.t. every parameter; frees the graph."""
    names = list(params)
    grads = ag.grad(loss, [params[k] for k in names])
    return dict(zip(names, grads))


VelocityFn = Callable[[np.ndarray, float | np.ndarray, ag.Tensor], ag.Tensor]


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"ITOCKPT1"
CKPT_VERSION = 1
OPT_MAGIC = b"ITOOPT01"
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def _pack_tensor(name: str, a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    head = _pack_str(name) + _U32.pack(a.ndim) + b"".join(_U64.pack(n) for n in a.shape)
    return head + a.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what):
        return _U64.unpack(self.take(8, what))[0]

    def string(self, what):
        return self.take(self.u32(what), what).decode("utf-8")

    def tensor(self):
        name = self.string("tensor name")
        ndim = self.u32(f"{name} ndim")
        shape = tuple(self.u64(f"{name} dims") for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.take(4 * count, f"{name} payload"), dtype="<f4").reshape(shape)
        return name, data.astype(np.float32)


def write_checkpoint(path, params: ModelParams, optimizer: dict | None = None) -> None:
    """Serialize parameters (as float32) and optionally optimizer moments.

    ``optimizer`` holds ``step``, ``seed``, ``m`` and ``v`` (dicts keyed by
    parameter name).
    """
    parts = [CKPT_MAGIC, _U32.pack(CKPT_VERSION),
             _pack_str(json.dumps(config_to_dict(params.config), sort_keys=True)),
             _pack_str(params.layout.to_json()), _U32.pack(len(params))]
    parts += [_pack_tensor(k, t.data) for k, t in params.tensors.items()]
    if optimizer is None:
        parts.append(_U32.pack(0))
    else:
        parts += [_U32.pack(1), OPT_MAGIC, _U64.pack(int(optimizer["step"])),
                  _U64.pack(int(optimizer["seed"]))]
        for k in params:
            parts.append(_pack_tensor(k, optimizer["m"][k]))
            parts.append(_pack_tensor(k, optimizer["v"][k]))
    body = b"".join(parts)
    Path(path).write_bytes(body + _U32.pack(zlib.crc32(body)))


def read_checkpoint(path, expect_layout: FeatureLayout | None = None) -> tuple[ModelParams, dict | None]:
    buf = Path(path).read_bytes()
    if len(buf) >= 8 and buf[:8] != CKPT_MAGIC:
        raise BadMagicError(f"expected magic {CKPT_MAGIC!r}, found {buf[:8]!r}")
    if len(buf) < 16:
        raise TruncatedFileError("checkpoint truncated")
    body, (crc,) = buf[:-4], _U32.unpack(buf[-4:])
    r = _Reader(body)
    r.take(8, "magic")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} (supported: {CKPT_VERSION})")
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    config = ModelConfig(**json.loads(r.string("config")))
    layout = FeatureLayout.from_json(r.string("layout"))
    if expect_layout is not None:
        expect_layout.check_compatible(layout)
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name, data = r.tensor()
        tensors[name] = ag.Tensor(data.astype(config.dtype))
    expected = parameter_shapes(config, layout)
    got = {k: t.shape for k, t in tensors.items()}
    if got != expected:
        raise LayoutMismatchError("checkpoint tensors do not match the stored architecture")
    params = ModelParams(config, layout, tensors)
    optimizer = None
    if r.u32("optimizer flag"):
        if r.take(8, "optimizer magic") != OPT_MAGIC:
            raise BadMagicError(f"expected optimizer section magic {OPT_MAGIC!r}")
        step, seed = r.u64("step"), r.u64("seed")
        m, v = {}, {}
        for _ in range(len(tensors)):
            k, a = r.tensor()
            _, b = r.tensor()
            m[k], v[k] = a, b
        optimizer = {"step": step, "seed": seed, "m": m, "v": v}
    return params, optimizer
