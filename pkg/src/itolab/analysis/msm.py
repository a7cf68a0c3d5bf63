"""k-means discretisation, Markov state models, PCCA and mean first-passage times."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

from ..errors import AmbiguityError, InputError
from ..seeding import stream

# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: list[float]                      # after each Lloyd iteration
    reseeded: list[tuple[int, int]] = field(default_factory=list)  # (iteration, cluster)
    n_iter: int = 0


def _sqdist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points ** 2).sum(1)[:, None] - 2 * points @ centers.T + (centers ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign(points, centers, chunk: int = 65536) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centre labels and squared distances, computed in chunks."""
    x = np.asarray(points, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    c = np.asarray(centers, dtype=np.float64)
    c = c[:, None] if c.ndim == 1 else c
    lab = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for a in range(0, len(x), chunk):
        d = _sqdist(x[a:a + chunk], c)
        lab[a:a + chunk] = np.argmin(d, axis=1)
        dist[a:a + chunk] = d[np.arange(len(d)), lab[a:a + chunk]]
    return lab, dist


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding.

    An empty cluster is re-seeded with the point farthest from its current
    centre; such events are listed in ``reseeded``.
    """
    x = np.asarray(points, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    if k < 1:
        raise InputError("k must be >= 1")
    if len(np.unique(x, axis=0)) < k:
        raise InputError(f"k={k} exceeds the number of distinct points")
    rng = stream(seed, "kmeans")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    d2 = _sqdist(x, centers[:1])[:, 0]
    for i in range(1, k):
        centers[i] = x[rng.choice(len(x), p=d2 / d2.sum())]
        d2 = np.minimum(d2, _sqdist(x, centers[i:i + 1])[:, 0])
    res = KMeansResult(centers, np.zeros(len(x), dtype=np.int64), [])
    lab, dist = assign(x, centers)
    for it in range(max_iter):
        counts = np.bincount(lab, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist))
            res.reseeded.append((it, int(j)))
            lab[far] = j
            dist[far] = 0.0
            counts = np.bincount(lab, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, lab, x)
        centers = sums / counts[:, None]
        new_lab, dist = assign(x, centers)
        res.inertia.append(float(dist.sum()))
        res.n_iter = it + 1
        if np.array_equal(new_lab, lab):
            break
        lab = new_lab
    res.centers, res.assignments = centers, lab
    return res


# ---------------------------------------------------------------------------
# MSM estimation
# ---------------------------------------------------------------------------


@dataclass
class MSMModel:
    counts: np.ndarray          # full count matrix over all observed states
    active_set: np.ndarray      # original state ids of the largest strongly connected set
    P: np.ndarray               # row-stochastic on the active set
    pi: np.ndarray              # stationary distribution on the active set
    lag: int
    centers: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return len(self.active_set)

    @property
    def active_counts(self) -> np.ndarray:
        a = self.active_set
        return self.counts[np.ix_(a, a)]

    def to_active(self, states) -> np.ndarray:
        """Map original state ids to active indices (states outside the set dropped)."""
        lookup = {s: i for i, s in enumerate(self.active_set)}
        return np.array([lookup[s] for s in np.atleast_1d(states) if s in lookup], dtype=np.int64)


def count_matrix(dtrajs: Sequence[np.ndarray], lag: int, n_states: int | None = None) -> np.ndarray:
    """Sliding-window transition counts at ``lag`` frames."""
    if lag < 1:
        raise InputError("lag must be >= 1 frames")
    dtrajs = [np.asarray(d, dtype=np.int64) for d in dtrajs]
    if any(d.ndim != 1 or (len(d) and d.min() < 0) for d in dtrajs):
        raise InputError("discrete trajectories must be 1-D non-negative integer arrays")
    n = n_states or (max(int(d.max()) for d in dtrajs if len(d)) + 1)
    C = np.zeros((n, n))
    for d in dtrajs:
        if len(d) > lag:
            np.add.at(C, (d[:-lag], d[lag:]), 1.0)
    return C


def largest_connected_set(C: np.ndarray) -> np.ndarray:
    """Largest strongly connected set of the count graph (ties go to the lowest ids)."""
    n_comp, labels = connected_components(csr_matrix(C > 0), directed=True, connection="strong")
    visited = np.zeros(len(C), dtype=bool)
    visited[np.flatnonzero(C.sum(axis=1) + C.sum(axis=0) > 0)] = True
    best, best_size = None, 0
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        if not visited[members].any():
            continue
        if len(members) > best_size:
            best, best_size = members, len(members)
    if best is None:
        raise InputError("empty active set: no transitions observed")
    return np.sort(best)


def stationary_distribution(P) -> np.ndarray:
    """Stationary vector of a row-stochastic, irreducible ``P`` (least squares)."""
    P = np.asarray(P, dtype=np.float64)
    n = len(P)
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(A, b, rcond=None)[0]
    # one refinement step removes residual roundoff
    pi = pi @ P
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def msm_estimate(dtrajs: Sequence[np.ndarray] | np.ndarray, lag: int, n_states: int | None = None,
                 centers=None) -> MSMModel:
    """Row-normalised count MSM on the largest strongly connected set."""
    if isinstance(dtrajs, np.ndarray) and dtrajs.ndim == 1:
        dtrajs = [dtrajs]
    C = count_matrix(dtrajs, lag, n_states)
    active = largest_connected_set(C)
    Ca = C[np.ix_(active, active)]
    rows = Ca.sum(axis=1)
    if np.any(rows == 0):
        raise InputError("empty active set: no transitions observed")
    P = Ca / rows[:, None]
    return MSMModel(C, active, P, stationary_distribution(P), lag, centers)


# ---------------------------------------------------------------------------
# first-passage times
# ---------------------------------------------------------------------------


def mfpt_vector(P, target, lag_time: float = 1.0) -> np.ndarray:
    """Mean first-passage time to ``target`` from every state (inf if unreachable)."""
    P = np.asarray(P, dtype=np.float64)
    n = len(P)
    B = np.zeros(n, dtype=bool)
    B[np.asarray(target, dtype=np.int64)] = True
    if not B.any():
        raise InputError("target set is empty")
    # states that can reach B: reverse search from B
    rev = csr_matrix((P > 0).T)
    reach = np.zeros(n, dtype=bool)
    for b in np.flatnonzero(B):
        reach[breadth_first_order(rev, b, directed=True, return_predecessors=False)] = True
    m = np.full(n, np.inf)
    m[B] = 0.0
    free = reach & ~B
    if free.any():
        idx = np.flatnonzero(free)
        A = np.eye(len(idx)) - P[np.ix_(idx, idx)]
        m[idx] = np.linalg.solve(A, np.full(len(idx), float(lag_time)))
    return m


def mfpt(P, source, target, lag_time: float = 1.0, pi=None) -> float:
    """Stationary-weighted mean first-passage time from ``source`` to ``target``.

    Returns ``inf`` when some source state cannot reach the target.
    """
    P = np.asarray(P, dtype=np.float64)
    A = np.asarray(source, dtype=np.int64)
    if len(A) == 0:
        raise InputError("source set is empty")
    m = mfpt_vector(P, target, lag_time)
    if np.isinf(m[A]).any():
        return float("inf")
    w = stationary_distribution(P)[A] if pi is None else np.asarray(pi, dtype=np.float64)[A]
    if w.sum() <= 0:
        w = np.ones(len(A))
    return float(np.dot(w, m[A]) / w.sum())


# ---------------------------------------------------------------------------
# PCCA (two clusters)
# ---------------------------------------------------------------------------


def pcca_two_state(P, pi=None, gap_tol: float = 0.1) -> np.ndarray:
    """Split states into two metastable sets by the sign of the second right eigenvector.

    Label 0 is the set holding the most probable state.  States on the zero
    crossing join the set with the larger stationary mass.  Raises
    :class:`AmbiguityError` unless ``lambda_2`` is real and
    ``lambda_2 - |lambda_3| > gap_tol``.
    """
    P = np.asarray(P, dtype=np.float64)
    n = len(P)
    if n < 2:
        raise AmbiguityError("need at least two states")
    pi = stationary_distribution(P) if pi is None else np.asarray(pi, dtype=np.float64)
    w, V = np.linalg.eig(P)
    order = np.argsort(-w.real)
    w, V = w[order], V[:, order]
    lam2 = w[1]
    lam3 = abs(w[2]) if n > 2 else 0.0
    if abs(lam2.imag) > 1e-10 or lam2.real - lam3 <= gap_tol:
        raise AmbiguityError(
            f"no clear two-state split: lambda_2={lam2.real:.4g}, |lambda_3|={lam3:.4g}, gap tol {gap_tol}"
        )
    v = V[:, 1].real
    v = v / np.max(np.abs(v))
    tol = 1e-12
    pos, neg = v > tol, v < -tol
    mass_pos, mass_neg = pi[pos].sum(), pi[neg].sum()
    labels = np.where(pos, 1, 0)
    zero = ~pos & ~neg
    labels[zero] = 1 if mass_pos > mass_neg else 0
    top = int(np.argmax(pi))
    if labels[top] == 1:
        labels = 1 - labels
    return labels


# ---------------------------------------------------------------------------
# Bayesian posterior
# ---------------------------------------------------------------------------


@dataclass
class PosteriorSummary:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    samples: dict[str, np.ndarray]
    n_samples: int


def _default_observables(P: np.ndarray) -> dict:
    return {"pi": stationary_distribution(P)}


def bayesian_msm(counts, n_samples: int, rng: np.random.Generator,
                 observables: Callable[[np.ndarray], dict] | None = None,
                 prior: float | None = None) -> PosteriorSummary:
    """Posterior over transition matrices with independent Dirichlet rows.

    Row ``i`` is drawn from ``Dirichlet(C_i + prior)``; ``prior`` defaults to
    ``1 / n_states``.  ``observables(P)`` returns a dict of scalars or arrays
    that are collected per sample; the default collects ``pi``.
    """
    C = np.asarray(counts, dtype=np.float64)
    if n_samples < 2:
        raise InputError("n_samples must be >= 2")
    n = len(C)
    alpha = C + (1.0 / n if prior is None else prior)
    obs = observables or _default_observables
    collected: dict[str, list] = {}
    for _ in range(n_samples):
        P = np.stack([rng.dirichlet(alpha[i]) for i in range(n)])
        for k, v in obs(P).items():
            collected.setdefault(k, []).append(np.asarray(v, dtype=np.float64))
    samples = {k: np.stack(v) for k, v in collected.items()}
    mean = {k: s.mean(axis=0) for k, s in samples.items()}
    std = {k: s.std(axis=0, ddof=1) for k, s in samples.items()}
    return PosteriorSummary(mean, std, samples, n_samples)
