"""Gaussian PLDA scoring, enrollment by averaging, early and late fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import (DegenerateError, EmptyInputError, FusionError,
                     InsufficientDataError, KindMismatchError, NumericalError,
                     ShapeError)
from .tvspace import EmbeddingVector, length_normalize

WITHIN_REG = 1e-6
RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class PldaModel:
    """Two-covariance PLDA with its preprocessing chain.

    Vectors are centered at ``mean``, multiplied by ``whitener`` and
    length-normalized; ``B`` and ``W`` live in that preprocessed space.
    """

    mean: np.ndarray
    whitener: np.ndarray
    B: np.ndarray
    W: np.ndarray
    kind: str = "ivector"

    def __post_init__(self):
        p = self.mean.size
        for name in ("whitener", "B", "W"):
            if getattr(self, name).shape != (p, p):
                raise ShapeError(f"PLDA {name} must be {p}x{p}")

    @property
    def dim(self) -> int:
        return self.mean.size

    def preprocess(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ShapeError(f"vector dim {X.shape[1]} != PLDA dim {self.dim}")
        Y = (X - self.mean) @ self.whitener.T
        norms = np.linalg.norm(Y, axis=1, keepdims=True)
        return Y / np.where(norms > 0, norms, 1.0)

    @cached_property
    def _scoring(self):
        p = self.dim
        total = self.B + self.W
        joint = np.block([[total, self.B], [self.B, total]])
        try:
            chol_total = np.linalg.cholesky(total)
            chol_joint = np.linalg.cholesky(joint)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("PLDA covariance blocks are not positive definite") from exc
        joint_inv = np.linalg.inv(joint)
        A, C = joint_inv[:p, :p], joint_inv[:p, p:]
        Q = np.linalg.inv(total) - A
        const = (2.0 * np.sum(np.log(np.diag(chol_total)))
                 - np.sum(np.log(np.diag(chol_joint))))
        return 0.5 * (Q + Q.T), 0.5 * (C + C.T), const

    def llr_matrix(self, E: np.ndarray, T: np.ndarray, preprocessed: bool = False) -> np.ndarray:
        """Scores between every row of ``E`` (enrollment) and of ``T`` (test)."""
        if not preprocessed:
            E, T = self.preprocess(E), self.preprocess(T)
        Q, C, const = self._scoring
        qe = 0.5 * np.einsum("ij,jk,ik->i", E, Q, E)
        qt = 0.5 * np.einsum("ij,jk,ik->i", T, Q, T)
        return qe[:, None] + qt[None, :] - E @ C @ T.T + const


@dataclass(frozen=True, eq=False)
class ArtistModel:
    artist_id: str
    vector: EmbeddingVector
    n_enrolled: int


def _matrix(vectors: Sequence[EmbeddingVector]) -> tuple[np.ndarray, str]:
    if not vectors:
        raise EmptyInputError("no vectors")
    kinds = {v.kind for v in vectors}
    if len(kinds) != 1:
        raise KindMismatchError(f"mixed embedding kinds {sorted(kinds)}")
    dims = {v.dim for v in vectors}
    if len(dims) != 1:
        raise ShapeError(f"mixed embedding dims {sorted(dims)}")
    return np.stack([v.values for v in vectors]), kinds.pop()


def _covariance(X: np.ndarray, mean: np.ndarray) -> np.ndarray:
    D = X - mean
    return D.T @ D / X.shape[0]


def _whitener(cov: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of ``cov`` restricted to its range."""
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    keep = evals > RANK_TOL * max(evals.max(), 0.0)
    if not np.any(keep):
        raise DegenerateError("training vectors have zero total variance")
    V = evecs[:, keep]
    return (V / np.sqrt(evals[keep])) @ V.T


def train_plda(vectors: Sequence[EmbeddingVector], labels: Sequence) -> PldaModel:
    """Fit preprocessing and closed-form between/within class covariances.

    All covariances are maximum-likelihood (divide by the number of
    vectors), so duplicating the training set leaves the model unchanged.
    """
    X, kind = _matrix(vectors)
    labels = np.asarray(labels)
    if labels.shape != (X.shape[0],):
        raise ShapeError("one label per vector required")
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise DegenerateError("PLDA needs at least two classes")
    if counts.max() < 2:
        raise InsufficientDataError("PLDA needs a class with at least two vectors")
    n, p = X.shape
    if p > n:
        raise InsufficientDataError(f"embedding dim {p} exceeds number of vectors {n}")
    mean = X.mean(axis=0)
    whitener = _whitener(_covariance(X, mean))
    stub = PldaModel(mean, whitener, np.zeros((p, p)), np.eye(p), kind)
    Y = stub.preprocess(X)
    class_means = np.zeros((len(classes), p))
    np.add.at(class_means, inverse, Y)
    class_means /= counts[:, None]
    grand = counts @ class_means / n
    D = class_means - grand
    B = (D * counts[:, None]).T @ D / n
    R = Y - class_means[inverse]
    W = R.T @ R / n
    scale = np.trace(W) / p
    if scale <= 0:
        scale = np.trace(B) / p if np.trace(B) > 0 else 1.0
    W = W + WITHIN_REG * scale * np.eye(p)
    return PldaModel(mean, whitener, 0.5 * (B + B.T), 0.5 * (W + W.T), kind)


def _check_pair(plda: PldaModel, a: EmbeddingVector, b: EmbeddingVector):
    if a.dim != plda.dim or b.dim != plda.dim:
        raise ShapeError(f"vector dims ({a.dim}, {b.dim}) != PLDA dim {plda.dim}")


def plda_score(plda: PldaModel, enroll: EmbeddingVector, test: EmbeddingVector) -> float:
    """Same-identity vs different-identity log-likelihood ratio."""
    _check_pair(plda, enroll, test)
    return float(plda.llr_matrix(enroll.values[None], test.values[None])[0, 0])


def enroll_artist(artist_id: str, vectors: Sequence[EmbeddingVector]) -> ArtistModel:
    """Artist model = length-normalized mean of the enrollment vectors.

    The mean uses exactly rounded sums, so it does not depend on the order
    of ``vectors``.
    """
    if not vectors:
        raise EmptyInputError(f"no enrollment vectors for {artist_id!r}")
    X, kind = _matrix(vectors)
    mean = np.array([math.fsum(col) for col in X.T]) / X.shape[0]
    vector = length_normalize(EmbeddingVector(mean, kind, artist_id))
    return ArtistModel(artist_id, vector, X.shape[0])


def early_fuse(ivec: EmbeddingVector, deep: EmbeddingVector) -> EmbeddingVector:
    """Concatenate [normalized i-vector | normalized deep feature]."""
    if ivec.kind != "ivector" or deep.kind != "deep":
        raise FusionError(f"early fusion needs (ivector, deep), got ({ivec.kind}, {deep.kind})")
    if ivec.track_id != deep.track_id:
        raise FusionError(f"track mismatch: {ivec.track_id!r} vs {deep.track_id!r}")
    values = np.concatenate([length_normalize(ivec).values, length_normalize(deep).values])
    return EmbeddingVector(values, "fused", ivec.track_id)


def late_fuse(score_iv: float, score_deep: float) -> float:
    if not (math.isfinite(score_iv) and math.isfinite(score_deep)):
        raise NumericalError("late fusion of non-finite scores")
    return (score_iv + score_deep) / 2.0


def znorm(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    std = scores.std()
    return (scores - scores.mean()) / (std if std > 0 else 1.0)


def late_fuse_scores(scores_iv, scores_deep, use_znorm: bool = False) -> np.ndarray:
    """Elementwise late fusion over a whole trial set.

    With ``use_znorm`` each system's scores are first standardized over the
    full set, which matters when the two score scales differ.
    """
    a = np.asarray(scores_iv, dtype=np.float64)
    b = np.asarray(scores_deep, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("score arrays must align")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericalError("late fusion of non-finite scores")
    if use_znorm:
        a, b = znorm(a), znorm(b)
    return (a + b) / 2.0
