"""Time-lagged independent component analysis on trajectory features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConditioningError, InputError


def pairwise_distance_features(frames) -> np.ndarray:
    """Euclidean distances of all particle pairs ``i < j`` in row-major order.

    Parameters
    ----------
    frames : array_like, shape (M, n, dim)

    Returns
    -------
    ndarray, shape (M, n (n - 1) / 2)
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 3:
        raise InputError(f"frames must be (M, n, dim), got {x.shape}")
    n = x.shape[1]
    if n < 2:
        raise InputError("pairwise distances need at least 2 particles")
    i, j = np.triu_indices(n, k=1)
    return np.linalg.norm(x[:, i] - x[:, j], axis=-1)


def default_features(frames) -> np.ndarray:
    """Pairwise distances, or raw coordinates for single-particle systems."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 3 and x.shape[1] == 1:
        return x[:, 0, :]
    return pairwise_distance_features(x)


@dataclass(frozen=True)
class TICAModel:
    mean: np.ndarray
    c0: np.ndarray              # regularised instantaneous covariance
    ctau: np.ndarray            # symmetrised lagged covariance
    eigenvalues: np.ndarray     # all eigenvalues, descending
    eigenvectors: np.ndarray    # all eigenvectors as columns, C0-orthonormal
    n_components: int
    lag: int

    @property
    def projection(self) -> np.ndarray:
        return self.eigenvectors[:, :self.n_components]

    @property
    def dim(self) -> int:
        return len(self.mean)


def _fix_signs(v: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive
    idx = np.argmax(np.abs(v), axis=0)
    s = np.sign(v[idx, np.arange(v.shape[1])])
    s[s == 0] = 1.0
    return v * s


def solve_tica(c0, ctau) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``ctau v = lambda c0 v`` for symmetric ``ctau`` and SPD ``c0``.

    Eigenvalues are returned in descending order and eigenvectors are
    normalised so that ``V.T @ c0 @ V = I``.
    """
    c0 = np.asarray(c0, dtype=np.float64)
    ctau = np.asarray(ctau, dtype=np.float64)
    try:
        L = np.linalg.cholesky(c0)
    except np.linalg.LinAlgError:
        raise ConditioningError(
            "instantaneous covariance is not positive definite; use a regularization > 0"
        ) from None
    Linv = np.linalg.solve(L, np.eye(len(c0)))
    A = Linv @ ctau @ Linv.T
    w, U = np.linalg.eigh((A + A.T) / 2)
    order = np.argsort(w)[::-1]
    V = Linv.T @ U[:, order]
    return w[order], _fix_signs(V)


def tica_fit(features, lag: int, n_components: int = 4, regularization: float | None = None) -> TICAModel:
    """Fit TICA to one feature matrix ``(M, f)`` or a list of them.

    Both covariances use the time-reversal symmetric estimator over all
    ``(t, t + lag)`` pairs.  ``regularization=None`` adds
    ``1e-6 * trace(C0) / f`` to the diagonal of C0; ``0`` disables it.
    """
    parts = [np.asarray(features, dtype=np.float64)] if not isinstance(features, (list, tuple)) \
        else [np.asarray(f, dtype=np.float64) for f in features]
    parts = [p[:, None] if p.ndim == 1 else p for p in parts]
    if lag < 1:
        raise InputError("lag must be >= 1")
    if regularization is not None and regularization < 0:
        raise InputError("regularization must be >= 0")
    if any(len(p) <= lag for p in parts):
        raise InputError(f"every feature trajectory needs more than lag={lag} frames")
    dim = parts[0].shape[1]
    if any(p.shape[1] != dim for p in parts):
        raise InputError("feature trajectories differ in width")
    mean = np.concatenate(parts).mean(axis=0)
    c00 = np.zeros((dim, dim))
    c0t = np.zeros((dim, dim))
    n_pairs = 0
    for p in parts:
        a, b = p[:-lag] - mean, p[lag:] - mean
        c00 += a.T @ a + b.T @ b
        c0t += a.T @ b
        n_pairs += len(a)
    c0 = c00 / (2 * n_pairs)
    ctau = (c0t + c0t.T) / (2 * n_pairs)
    eps = 1e-6 * np.trace(c0) / dim if regularization is None else regularization
    c0 = c0 + eps * np.eye(dim)
    w, V = solve_tica(c0, ctau)
    return TICAModel(mean, c0, ctau, w, V, min(n_components, dim), lag)


def tica_transform(model: TICAModel, features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[-1] != model.dim:
        raise InputError(f"feature width {f.shape[-1]} but model was fit on width {model.dim}")
    return (f - model.mean) @ model.projection


def tica_project(trajectories: Sequence[np.ndarray], lag: int, n_components: int = 4,
                 regularization: float | None = None) -> tuple[TICAModel, list[np.ndarray]]:
    """Featurize frame arrays, fit TICA and project every trajectory."""
    feats = [default_features(t) for t in trajectories]
    model = tica_fit(feats, lag, n_components, regularization)
    return model, [tica_transform(model, f) for f in feats]
