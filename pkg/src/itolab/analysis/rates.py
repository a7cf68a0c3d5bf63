"""Arrhenius fits and two-state rate estimates from discretised trajectories."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InputError
from ..seeding import stream
from .msm import (MSMModel, assign, bayesian_msm, kmeans, mfpt, msm_estimate, pcca_two_state,
                  stationary_distribution)


@dataclass(frozen=True)
class ArrheniusFit:
    ln_A: float
    E_a: float
    residuals: np.ndarray
    curvature: float          # quadratic coefficient of ln k in 1/(kB T); 0 for < 3 points

    def predict(self, temperature, kB: float = 1.0):
        return np.exp(self.ln_A - self.E_a / (kB * np.asarray(temperature, dtype=np.float64)))


def arrhenius_fit(rates, temperatures, kB: float = 1.0) -> ArrheniusFit:
    """Least-squares line ``ln k = ln A - E_a / (kB T)``.

    Residuals are ``ln k`` minus the fitted line.  ``curvature`` is the
    leading coefficient of a quadratic fit in ``1/(kB T)``, a simple measure
    of non-Arrhenius behaviour.
    """
    k = np.asarray(rates, dtype=np.float64)
    T = np.asarray(temperatures, dtype=np.float64)
    if k.shape != T.shape or k.ndim != 1:
        raise InputError("rates and temperatures must be 1-D and equally long")
    if len(k) < 2:
        raise InputError("need at least 2 temperatures")
    if np.any(~(k > 0)) or not np.isfinite(k).all():
        raise InputError("rates must be positive and finite")
    if np.any(T <= 0):
        raise InputError("temperatures must be positive")
    x = 1.0 / (kB * T)
    y = np.log(k)
    xm, ym = x.mean(), y.mean()
    slope = np.dot(x - xm, y - ym) / np.dot(x - xm, x - xm)
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    curv = 0.0
    if len(k) >= 3:
        xs = (x - xm) / np.std(x)
        curv = float(np.polyfit(xs, y, 2)[0] / np.var(x))
    return ArrheniusFit(float(intercept), float(-slope), resid, curv)


@dataclass(frozen=True)
class RateEstimate:
    """Two-state kinetics: MFPT from macrostate 0 to 1 and back, with posterior spread."""

    mfpt_01: float
    mfpt_10: float
    std_01: float
    std_10: float
    temperature: float
    membership: np.ndarray
    msm: MSMModel

    @property
    def rate_01(self) -> float:
        return 1.0 / self.mfpt_01

    @property
    def rate_10(self) -> float:
        return 1.0 / self.mfpt_10

    @property
    def mean_mfpt(self) -> float:
        return 0.5 * (self.mfpt_01 + self.mfpt_10)


def two_state_rates(features: Sequence[np.ndarray], lag: int, frame_interval: float,
                    temperature: float = 1.0, n_clusters: int = 20, centers=None, seed: int = 0,
                    n_posterior: int = 100, order_by: int | None = 0,
                    gap_tol: float = 0.1) -> RateEstimate:
    """Cluster, build an MSM, split it with PCCA and compute both MFPTs.

    ``features`` holds one ``(M, f)`` array per trajectory.  ``centers`` reuses
    an existing discretisation; otherwise k-means is fit on all frames.  With
    ``order_by`` set, macrostate 0 is the one whose stationary-weighted mean of
    that feature column is smaller, which keeps labels consistent across
    temperatures.
    """
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    feats = [f[:, None] if f.ndim == 1 else f for f in feats]
    if centers is None:
        centers = kmeans(np.concatenate(feats), n_clusters, seed).centers
    dtrajs = [assign(f, centers)[0] for f in feats]
    model = msm_estimate(dtrajs, lag, n_states=len(centers), centers=centers)
    labels = pcca_two_state(model.P, model.pi, gap_tol)
    if order_by is not None:
        c = np.asarray(centers)[model.active_set][:, order_by]
        m0 = np.average(c[labels == 0], weights=model.pi[labels == 0])
        m1 = np.average(c[labels == 1], weights=model.pi[labels == 1])
        if m0 > m1:
            labels = 1 - labels
    A, B = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    tau = lag * frame_interval
    t01 = mfpt(model.P, A, B, tau, model.pi)
    t10 = mfpt(model.P, B, A, tau, model.pi)

    def obs(P):
        pi = stationary_distribution(P)
        return {"mfpt_01": mfpt(P, A, B, tau, pi), "mfpt_10": mfpt(P, B, A, tau, pi)}

    post = bayesian_msm(model.active_counts, n_posterior, stream(seed, "posterior"), obs)
    return RateEstimate(t01, t10, float(post.std["mfpt_01"]), float(post.std["mfpt_10"]),
                        float(temperature), labels, model)
