"""Small shared builders for tests."""

import numpy as np

from itolab.conditioning import make_layout
from itolab.data import Dataset, SystemMeta
from itolab.model import ModelConfig, init_params
from itolab.systems import Trajectory

TINY = dict(residue_repr_dim=8, cond_dim=8, hidden_dim=8, n_attention_heads=2, n_layers_fc=1,
            n_layers_fv=1, s_encoding_dim=4, n_rbf=4, max_seq_sep=2)


def tiny_params(n_tokens=1, coord_dim=1, center=False, precision="float64", seed=0, **kw):
    vocab = tuple("ABCD"[:n_tokens])
    lay = make_layout(vocab, max_lag=1.0, temperature_range=(1.0, 2.0), token_dim=4,
                      encoding_dim=4, center=center, **kw)
    cfg = ModelConfig(coord_dim=coord_dim, precision=precision, **TINY)
    return init_params(cfg, lay, seed=seed)


def toy_dataset(n=1, d=1, M=200, T=(1.0,), seed=0):
    rng = np.random.default_rng(seed)
    trajs, metas = [], []
    for temp in T:
        x = np.cumsum(rng.normal(scale=0.1, size=(M, n, d)), axis=0)
        trajs.append(Trajectory(x, 0.1, "toy", temp))
        metas.append(SystemMeta(("A",) * n))
    return Dataset(trajs, metas)


# acceptance results, printed once per session by the terminal-summary hook
ACCEPTANCE: dict[str, tuple[str, bool, str]] = {}


def report(number, name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[str(number)] = (name, bool(ok), detail)
    print(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return bool(ok)
