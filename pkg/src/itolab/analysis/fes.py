"""Histogram free-energy surfaces and surface comparison metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InputError


@dataclass(frozen=True)
class FESGrid:
    """Free energies ``G = -kB T ln p`` on a histogram grid.

    ``G`` is NaN on unoccupied bins.  ``n_samples`` is the number of samples
    that fell inside the grid.
    """

    edges: tuple[np.ndarray, ...]
    p: np.ndarray
    G: np.ndarray
    temperature: float
    kB: float
    occupied: np.ndarray
    n_samples: int

    @property
    def kT(self) -> float:
        return self.kB * self.temperature

    @property
    def shape(self) -> tuple[int, ...]:
        return self.p.shape


def _select(projections, components: int) -> np.ndarray:
    x = np.asarray(projections, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InputError(f"projections must be (M, k), got {x.shape}")
    return x[:, :min(components, x.shape[1])]


def common_edges(samples: Sequence, bins: int = 50, components: int = 2,
                 margin: float = 0.0) -> tuple[np.ndarray, ...]:
    """Shared bin edges spanning every sample set (optionally padded by ``margin``)."""
    if bins < 2:
        raise InputError("need at least 2 bins per axis")
    xs = [_select(s, components) for s in samples]
    if not xs or all(len(x) == 0 for x in xs):
        raise InputError("no samples")
    allx = np.concatenate([x for x in xs if len(x)])
    lo, hi = allx.min(axis=0) - margin, allx.max(axis=0) + margin
    hi = np.where(hi > lo, hi, lo + 1.0)
    return tuple(np.linspace(a, b, bins + 1) for a, b in zip(lo, hi))


def fes_from_probabilities(p, edges, temperature: float, kB: float = 1.0, n_samples: int = 0,
                           threshold: float = 0.0) -> FESGrid:
    """Wrap bin probabilities (e.g. from quadrature) as a surface.

    Bins with ``p <= threshold`` count as unoccupied; the rest are renormalised.
    """
    if not temperature > 0:
        raise InputError("temperature must be positive")
    p = np.asarray(p, dtype=np.float64)
    occ = p > threshold
    if not occ.any():
        raise InputError("no occupied bins")
    p = np.where(occ, p, 0.0)
    p = p / p.sum()
    with np.errstate(divide="ignore"):
        G = np.where(occ, -kB * temperature * np.log(np.where(occ, p, 1.0)), np.nan)
    return FESGrid(tuple(np.asarray(e) for e in edges), p, G, float(temperature), float(kB), occ, int(n_samples))


def free_energy_surface(projections, bins=50, temperature: float = 1.0, kB: float = 1.0,
                        components: int = 2) -> FESGrid:
    """Histogram the first ``components`` columns and convert to free energies.

    Parameters
    ----------
    projections : array_like, shape (M, k)
    bins : int or sequence of edge arrays
        Integer bins span the data range; explicit edges allow comparing surfaces.
    temperature, kB : float
        Energies are in units of ``kB``; ``G_i = -kB T ln p_i``.
    """
    x = _select(projections, components)
    if len(x) == 0:
        raise InputError("cannot build a free-energy surface from no samples")
    if not temperature > 0:
        raise InputError("temperature must be positive")
    if isinstance(bins, (int, np.integer)):
        edges = common_edges([x], int(bins), components)
    else:
        edges = tuple(np.asarray(e, dtype=np.float64) for e in bins)
        if len(edges) != x.shape[1] or any(len(e) < 3 for e in edges):
            raise InputError("need one edge array with at least 2 bins per component")
    H, _ = np.histogramdd(x, bins=edges)
    n_in = int(H.sum())
    if n_in == 0:
        raise InputError("no samples fall inside the bin edges")
    return fes_from_probabilities(H / n_in, edges, temperature, kB, n_in)


def aligned(G: np.ndarray, occupied: np.ndarray) -> np.ndarray:
    return G - np.min(G[occupied])


def fes_metrics(reference: FESGrid, model: FESGrid) -> tuple[float, float, float]:
    """(MAE, RMSE, coverage) of ``model`` against ``reference``.

    Both surfaces are shifted so their minimum is 0.  Reference-occupied bins
    that the model never visits take the capped value
    ``-kT ln(1 / (10 n_model))`` (a tenth of one count) before the shift.
    Errors are averaged over reference-occupied bins only.
    """
    if len(reference.edges) != len(model.edges) or any(
            a.shape != b.shape or not np.array_equal(a, b) for a, b in zip(reference.edges, model.edges)):
        raise InputError("surfaces were built on different grids")
    ref_occ = reference.occupied
    n_ref = int(ref_occ.sum())
    if n_ref == 0:
        raise InputError("reference surface has no occupied bins")
    hit = ref_occ & model.occupied
    coverage = hit.sum() / n_ref
    g_cap = -model.kT * np.log(1.0 / (10.0 * max(model.n_samples, 1)))
    g_model = np.where(model.occupied, model.G, g_cap)
    g_model = g_model - np.min(model.G[model.occupied])
    g_ref = aligned(reference.G, ref_occ)
    diff = (g_model - g_ref)[ref_occ]
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.mean(diff ** 2))), float(coverage)


def boltzmann_bin_probabilities(energy, edges, temperature: float, kB: float = 1.0,
                                points_per_bin: int = 64) -> np.ndarray:
    """Exact bin probabilities of ``exp(-U / kT)`` by Gauss-Legendre quadrature.

    ``energy`` maps an array of shape ``(..., k)`` to energies of shape ``(...)``.
    Mass outside the edges is ignored (probabilities are normalised over the grid).
    """
    nodes, weights = np.polynomial.legendre.leggauss(points_per_bin)
    axes, wts = [], []
    for e in edges:
        e = np.asarray(e, dtype=np.float64)
        half = np.diff(e)[:, None] / 2
        mid = (e[:-1] + e[1:])[:, None] / 2
        axes.append(mid + half * nodes)       # (bins, q)
        wts.append(half * weights)
    if len(edges) == 1:
        u = energy(axes[0][..., None])
        w = np.exp(-(u - np.min(u)) / (kB * temperature)) * wts[0]
        p = w.sum(axis=1)
    elif len(edges) == 2:
        X = axes[0][:, None, :, None]
        Y = axes[1][None, :, None, :]
        X, Y = np.broadcast_arrays(X, Y)
        u = energy(np.stack([X, Y], axis=-1))
        W = wts[0][:, None, :, None] * wts[1][None, :, None, :]
        w = np.exp(-(u - np.min(u)) / (kB * temperature)) * W
        p = w.sum(axis=(2, 3))
    else:
        raise InputError("quadrature supports 1 or 2 dimensions")
    return p / p.sum()
