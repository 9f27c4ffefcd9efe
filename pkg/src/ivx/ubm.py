"""Diagonal-covariance GMM (universal background model).

Training is k-means++ seeding, a few Lloyd rounds, then EM.  The model is
also the aligner for the i-vector extractor: :func:`accumulate_stats`
returns zeroth- and centered first-order Baum-Welch statistics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import logsumexp

from .dsp import FeatureSequence
from .errors import (ConfigurationError, DataError, InsufficientDataError,
                     ShapeError)

log = logging.getLogger(__name__)

CHUNK = 65536
PRUNE_WEIGHT = 1e-8


@dataclass(frozen=True, eq=False)
class DiagGmm:
    weights: np.ndarray  # (C,)
    means: np.ndarray  # (C, d)
    variances: np.ndarray  # (C, d)
    var_floor: np.ndarray  # (d,) absolute floor
    llh_history: tuple = ()
    n_resets: int = 0

    def __post_init__(self):
        C, d = self.means.shape
        if self.weights.shape != (C,) or self.variances.shape != (C, d):
            raise ShapeError("inconsistent GMM parameter shapes")
        if self.var_floor.shape != (d,):
            raise ShapeError("var_floor must have one entry per dimension")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True, eq=False)
class BaumWelchStats:
    N: np.ndarray  # (C,) soft counts
    F: np.ndarray  # (C, d) first-order stats centered on the UBM means
    n_frames: int
    track_id: str = ""

    def __add__(self, other: "BaumWelchStats") -> "BaumWelchStats":
        return BaumWelchStats(self.N + other.N, self.F + other.F,
                              self.n_frames + other.n_frames, self.track_id)


@dataclass(frozen=True)
class UbmTrainConfig:
    n_components: int = 256
    n_iters: int = 10
    var_floor: float = 1e-3  # relative to the global per-dimension variance
    seed: int = 0
    init: int = 10  # k-means rounds

    def __post_init__(self):
        if self.n_components < 1 or self.n_iters < 1 or self.init < 0:
            raise ConfigurationError("n_components and n_iters must be >= 1")
        if not self.var_floor > 0:
            raise ConfigurationError("var_floor must be positive")


def _as_frames(frames) -> np.ndarray:
    if isinstance(frames, FeatureSequence):
        return frames.frames
    if isinstance(frames, np.ndarray):
        return np.atleast_2d(np.asarray(frames, dtype=np.float64))
    seqs = list(frames)
    if not seqs:
        return np.empty((0, 0))
    return np.concatenate([s.frames if isinstance(s, FeatureSequence) else np.atleast_2d(s)
                           for s in seqs], axis=0).astype(np.float64, copy=False)


def _component_terms(gmm: DiagGmm):
    precision = 1.0 / gmm.variances
    const = (np.log(gmm.weights)
             - 0.5 * np.sum(np.log(2.0 * np.pi * gmm.variances), axis=1)
             - 0.5 * np.sum(gmm.means ** 2 * precision, axis=1))
    return precision, gmm.means * precision, const


def weighted_log_densities(gmm: DiagGmm, X: np.ndarray) -> np.ndarray:
    """log(weight_c) + log N(x | m_c, diag(var_c)) for every frame, shape (n, C)."""
    X = np.atleast_2d(X)
    if X.shape[1] != gmm.dim:
        raise ShapeError(f"frame dim {X.shape[1]} != model dim {gmm.dim}")
    precision, mp, const = _component_terms(gmm)
    return const - 0.5 * (X ** 2) @ precision.T + X @ mp.T


def responsibilities(gmm: DiagGmm, frame) -> np.ndarray:
    """Posterior over components for a single frame."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (gmm.dim,):
        raise ShapeError(f"frame shape {frame.shape} != ({gmm.dim},)")
    lp = weighted_log_densities(gmm, frame[None, :])[0]
    return np.exp(lp - logsumexp(lp))


def posteriors(gmm: DiagGmm, X: np.ndarray):
    """Per-frame posteriors (n, C) and per-frame log-likelihoods (n,)."""
    lp = weighted_log_densities(gmm, X)
    ll = logsumexp(lp, axis=1)
    return np.exp(lp - ll[:, None]), ll


def _check_seq(gmm: DiagGmm, seq) -> np.ndarray:
    X = seq.frames if isinstance(seq, FeatureSequence) else np.atleast_2d(np.asarray(seq, float))
    if X.shape[0] == 0 or X.size == 0:
        raise InsufficientDataError("empty feature sequence")
    if X.shape[1] != gmm.dim:
        raise ShapeError(f"feature dim {X.shape[1]} != model dim {gmm.dim}")
    return X


def accumulate_stats(gmm: DiagGmm, seq) -> BaumWelchStats:
    X = _check_seq(gmm, seq)
    N = np.zeros(gmm.n_components)
    S1 = np.zeros((gmm.n_components, gmm.dim))
    for start in range(0, X.shape[0], CHUNK):
        chunk = X[start:start + CHUNK]
        gamma, _ = posteriors(gmm, chunk)
        N += gamma.sum(axis=0)
        S1 += gamma.T @ chunk
    F = S1 - N[:, None] * gmm.means
    track_id = seq.clip_id if isinstance(seq, FeatureSequence) else ""
    return BaumWelchStats(N, F, X.shape[0], track_id)


def log_likelihood(gmm: DiagGmm, seq) -> float:
    """Mean per-frame log-likelihood."""
    X = _check_seq(gmm, seq)
    total = 0.0
    for start in range(0, X.shape[0], CHUNK):
        total += logsumexp(weighted_log_densities(gmm, X[start:start + CHUNK]), axis=1).sum()
    return float(total / X.shape[0])


def _sq_dist(X, centers):
    return (np.sum(X ** 2, axis=1)[:, None] - 2.0 * X @ centers.T
            + np.sum(centers ** 2, axis=1)[None, :])


def _nearest(X, centers):
    labels = np.empty(X.shape[0], dtype=np.intp)
    for start in range(0, X.shape[0], CHUNK):
        labels[start:start + CHUNK] = np.argmin(_sq_dist(X[start:start + CHUNK], centers), axis=1)
    return labels


def kmeans(X: np.ndarray, k: int, rounds: int, rng: np.random.Generator):
    """k-means++ seeding followed by ``rounds`` Lloyd iterations."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[i]) ** 2, axis=1))
    labels = _nearest(X, centers)
    for _ in range(rounds):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
        labels = _nearest(X, centers)
    return centers, labels


def _init_from_kmeans(X, config, rng, floor):
    k = config.n_components
    centers, labels = kmeans(X, k, config.init, rng)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    global_var = X.var(axis=0)
    variances = np.tile(global_var, (k, 1))
    for c in np.flatnonzero(counts > 1):
        variances[c] = X[labels == c].var(axis=0)
    variances = np.maximum(variances, floor)
    weights = np.maximum(counts, 1.0)
    return weights / weights.sum(), centers, variances


def _em_pass(gmm: DiagGmm, X: np.ndarray):
    C, d = gmm.n_components, gmm.dim
    N = np.zeros(C)
    S1 = np.zeros((C, d))
    S2 = np.zeros((C, d))
    total_ll = 0.0
    for start in range(0, X.shape[0], CHUNK):
        chunk = X[start:start + CHUNK]
        gamma, ll = posteriors(gmm, chunk)
        total_ll += ll.sum()
        N += gamma.sum(axis=0)
        S1 += gamma.T @ chunk
        S2 += gamma.T @ (chunk ** 2)
    return total_ll / X.shape[0], N, S1, S2


def _maximize(N, S1, S2, n_frames, floor, rng):
    weights = N / n_frames
    safe = np.maximum(N, np.finfo(float).tiny)[:, None]
    means = S1 / safe
    variances = np.maximum(S2 / safe - means ** 2, floor)
    resets = 0
    for c in np.flatnonzero(weights < PRUNE_WEIGHT):
        # split the heaviest component in two, slightly displaced
        heavy = int(np.argmax(weights))
        shift = 0.01 * np.sqrt(variances[heavy]) * rng.standard_normal(means.shape[1])
        means[c] = means[heavy] + shift
        means[heavy] = means[heavy] - shift
        variances[c] = variances[heavy]
        weights[c] = weights[heavy] = weights[heavy] / 2.0
        resets += 1
    weights = weights / weights.sum()
    return weights, means, variances, resets


def train_ubm(frames, config: UbmTrainConfig | None = None) -> DiagGmm:
    """Train a diagonal GMM on pooled frames.

    Args:
        frames: an (n, d) array, a FeatureSequence, or an iterable of either.
        config: training options; ``n_components`` defaults to 256.

    Returns:
        The trained model.  ``llh_history`` holds the mean per-frame
        log-likelihood of the initial model and after every EM iteration.
    """
    config = config or UbmTrainConfig()
    X = _as_frames(frames)
    if X.size == 0 or X.shape[0] < 10 * config.n_components:
        raise InsufficientDataError(
            f"{X.shape[0]} frames is too few for {config.n_components} components "
            f"(need >= {10 * config.n_components})")
    if not np.all(np.isfinite(X)):
        raise DataError("training frames contain non-finite values")
    rng = np.random.default_rng(config.seed)
    floor = config.var_floor * np.maximum(X.var(axis=0), np.finfo(float).tiny)
    weights, means, variances = _init_from_kmeans(X, config, rng, floor)
    gmm = DiagGmm(weights, means, variances, floor)
    history = []
    resets = 0
    for it in range(config.n_iters):
        ll, N, S1, S2 = _em_pass(gmm, X)
        history.append(ll)
        log.debug("ubm iter %d mean llh %.6f", it, ll)
        weights, means, variances, n_reset = _maximize(N, S1, S2, X.shape[0], floor, rng)
        resets += n_reset
        gmm = DiagGmm(weights, means, variances, floor)
    history.append(log_likelihood(gmm, X))
    return DiagGmm(gmm.weights, gmm.means, gmm.variances, floor, tuple(history), resets)


def pooled_stats(gmm: DiagGmm, seqs: Iterable) -> list[BaumWelchStats]:
    return [accumulate_stats(gmm, s) for s in seqs]
