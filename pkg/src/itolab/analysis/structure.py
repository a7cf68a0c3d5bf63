"""Optimal rigid superposition and local RMSD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import AlignmentError, InputError


@dataclass(frozen=True)
class Alignment:
    aligned: np.ndarray       # mobile after R x + t, all points
    rotation: np.ndarray
    translation: np.ndarray
    rmsd: float               # over the fitting subset


def _subset(n: int, subset) -> np.ndarray:
    if subset is None:
        return np.arange(n)
    idx = np.asarray(subset, dtype=np.int64)
    if idx.ndim != 1 or len(idx) == 0 or idx.min() < -n or idx.max() >= n:
        raise InputError("subset indices out of range")
    return idx


def kabsch_align(mobile, reference, subset=None) -> Alignment:
    """Rotate and translate ``mobile`` onto ``reference`` using the points in ``subset``.

    The rotation is proper (det = +1).  Raises :class:`AlignmentError` when the
    subset does not pin down a rotation (fewer than ``dim`` points, or points
    spanning fewer than ``dim - 1`` directions).
    """
    X = np.asarray(mobile, dtype=np.float64)
    Y = np.asarray(reference, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2:
        raise InputError(f"mobile {X.shape} and reference {Y.shape} must be equal (n, dim)")
    d = X.shape[1]
    idx = _subset(len(X), subset)
    if len(idx) < d:
        raise AlignmentError(f"need at least {d} points to align in {d} dimensions, got {len(idx)}")
    cx, cy = X[idx].mean(0), Y[idx].mean(0)
    P, Q = X[idx] - cx, Y[idx] - cy
    scale = max(np.abs(P).max(), np.abs(Q).max(), 1e-300)
    sv_p = np.linalg.svd(P / scale, compute_uv=False)
    sv_q = np.linalg.svd(Q / scale, compute_uv=False)
    if min(np.sum(sv_p > 1e-10), np.sum(sv_q > 1e-10)) < d - 1:
        raise AlignmentError("subset points are degenerate (collinear or coincident)")
    U, _, Vt = np.linalg.svd(P.T @ Q)
    D = np.eye(d)
    D[-1, -1] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    t = cy - R @ cx
    out = X @ R.T + t
    rmsd = float(np.sqrt(np.mean(np.sum((out[idx] - Y[idx]) ** 2, axis=1))))
    return Alignment(out, R, t, rmsd)


def rmsd(a, b, subset=None) -> float:
    """Plain RMSD without superposition."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    idx = _subset(len(a), subset)
    return float(np.sqrt(np.mean(np.sum((a[idx] - b[idx]) ** 2, axis=1))))


def local_rmsd(x, reference, subset) -> float:
    """RMSD over ``subset`` after superimposing on that subset alone."""
    return kabsch_align(x, reference, subset).rmsd
