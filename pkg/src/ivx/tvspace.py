"""Total-variability subspace training and i-vector extraction.

The supervector of a track is modelled as ``M = m + T w`` with a standard
normal prior on ``w``.  Given Baum-Welch statistics against the UBM, the
posterior of ``w`` is Gaussian with precision ``L = I + T' S^-1 N T`` and
mean ``L^-1 T' S^-1 F``; the i-vector is that mean.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import (ConfigurationError, DegenerateError, NumericalError,
                     ShapeError)
from .ubm import BaumWelchStats, DiagGmm

log = logging.getLogger(__name__)

KINDS = ("ivector", "deep", "fused")


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    kind: str
    track_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError("embedding must be a 1-D vector")
        if not np.all(np.isfinite(values)):
            raise NumericalError(f"embedding {self.track_id!r} has non-finite entries")
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown embedding kind {self.kind!r}")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class TotalVariabilityModel:
    T: np.ndarray  # (C*d, r), rows ordered component-major
    ubm_ref: str = ""
    objective_history: tuple = ()

    def __post_init__(self):
        if self.T.ndim != 2 or self.T.shape[1] < 1 or self.T.shape[1] > self.T.shape[0]:
            raise ConfigurationError(f"bad T shape {self.T.shape}")
        if not np.all(np.isfinite(self.T)):
            raise NumericalError("T has non-finite entries")

    @property
    def rank(self) -> int:
        return self.T.shape[1]


def ubm_fingerprint(ubm: DiagGmm) -> str:
    """Short content hash identifying the UBM a T matrix was trained against."""
    h = hashlib.sha256()
    for arr in (ubm.weights, ubm.means, ubm.variances):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _stack(ubm: DiagGmm, stats_list: Sequence[BaumWelchStats]):
    C, d = ubm.n_components, ubm.dim
    for s in stats_list:
        if s.N.shape != (C,) or s.F.shape != (C, d):
            raise ShapeError(f"stats shape ({s.N.shape}, {s.F.shape}) does not match UBM ({C}, {d})")
    N = np.array([s.N for s in stats_list], dtype=np.float64).reshape(len(stats_list), C)
    F = np.array([s.F.reshape(-1) for s in stats_list], dtype=np.float64).reshape(len(stats_list), C * d)
    return N, F


def _posteriors(T, precision, N, F, C, d, want_cov=True):
    """Posterior means, covariances and per-track log-evidence terms."""
    r = T.shape[1]
    Tc = T.reshape(C, d, r)
    # T_c' S_c^-1 T_c for every component
    tst = np.einsum("cdi,cd,cdj->cij", Tc, precision.reshape(C, d), Tc)
    L = np.eye(r)[None] + np.tensordot(N, tst, axes=(1, 0))
    b = (F * precision[None, :]) @ T
    try:
        chol = np.linalg.cholesky(L)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("posterior precision is not positive definite") from exc
    eye = np.broadcast_to(np.eye(r), L.shape)
    L_inv = np.linalg.solve(L, eye) if want_cov else None
    w = np.linalg.solve(L, b[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    objective = 0.5 * np.sum(b * w, axis=1) - 0.5 * logdet
    return w, L_inv, objective


def train_tv(ubm: DiagGmm, stats_list: Sequence[BaumWelchStats], r: int = 64,
             n_iters: int = 10, seed: int = 0) -> TotalVariabilityModel:
    """EM estimation of the total-variability matrix.

    ``objective_history`` records, before every update and once at the end,
    the T-dependent part of the marginal log-likelihood of all statistics
    (sum over tracks of ``b'L^-1 b / 2 - log|L| / 2``).  EM never decreases it.
    """
    C, d = ubm.n_components, ubm.dim
    if r < 1 or r > C * d:
        raise ConfigurationError(f"i-vector dim {r} must be in [1, {C * d}]")
    if not stats_list:
        raise ConfigurationError("no statistics to train on")
    N, F = _stack(ubm, stats_list)
    precision = (1.0 / ubm.variances).reshape(-1)
    rng = np.random.default_rng(seed)
    scale = 0.1 * np.sqrt(np.mean(ubm.variances))
    T = scale * rng.standard_normal((C * d, r))
    history = []
    for it in range(n_iters):
        w, L_inv, objective = _posteriors(T, precision, N, F, C, d)
        history.append(float(objective.sum()))
        log.debug("tv iter %d objective %.6f", it, history[-1])
        Eww = L_inv + w[:, :, None] * w[:, None, :]
        A = np.einsum("tc,tij->cij", N, Eww)
        acc = (F.T @ w).reshape(C, d, r)
        T_new = np.empty((C, d, r))
        for c in range(C):
            try:
                factor = scipy.linalg.cho_factor(A[c], lower=True)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(
                    f"M-step system for component {c} is singular "
                    f"(total occupancy {N[:, c].sum():.3g})") from exc
            T_new[c] = scipy.linalg.cho_solve(factor, acc[c].T).T
        T = T_new.reshape(C * d, r)
    _, _, objective = _posteriors(T, precision, N, F, C, d, want_cov=False)
    history.append(float(objective.sum()))
    return TotalVariabilityModel(T, ubm_fingerprint(ubm), tuple(history))


def _check_dims(tv: TotalVariabilityModel, ubm: DiagGmm):
    if tv.T.shape[0] != ubm.n_components * ubm.dim:
        raise ShapeError(f"T has {tv.T.shape[0]} rows, UBM supervector has "
                         f"{ubm.n_components * ubm.dim}")


def extract_ivector(tv: TotalVariabilityModel, ubm: DiagGmm,
                    stats: BaumWelchStats) -> EmbeddingVector:
    _check_dims(tv, ubm)
    N, F = _stack(ubm, [stats])
    precision = (1.0 / ubm.variances).reshape(-1)
    w, _, _ = _posteriors(tv.T, precision, N, F, ubm.n_components, ubm.dim, want_cov=False)
    return EmbeddingVector(w[0], "ivector", stats.track_id)


def extract_ivectors(tv: TotalVariabilityModel, ubm: DiagGmm,
                     stats_list: Sequence[BaumWelchStats]) -> list[EmbeddingVector]:
    """Batched :func:`extract_ivector`."""
    _check_dims(tv, ubm)
    if not stats_list:
        return []
    N, F = _stack(ubm, stats_list)
    precision = (1.0 / ubm.variances).reshape(-1)
    w, _, _ = _posteriors(tv.T, precision, N, F, ubm.n_components, ubm.dim, want_cov=False)
    return [EmbeddingVector(row, "ivector", s.track_id) for row, s in zip(w, stats_list)]


def length_normalize(v: EmbeddingVector) -> EmbeddingVector:
    norm = np.linalg.norm(v.values)
    if norm == 0.0:
        raise DegenerateError(f"cannot length-normalize zero vector {v.track_id!r}")
    return EmbeddingVector(v.values / norm, v.kind, v.track_id)
