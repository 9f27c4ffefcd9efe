import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from ivx.backend import (PldaModel, early_fuse, enroll_artist, late_fuse,
                         late_fuse_scores, plda_score, train_plda, znorm)
from ivx.errors import (DegenerateError, EmptyInputError, FusionError,
                        InsufficientDataError, KindMismatchError,
                        NumericalError, ShapeError)
from ivx.tvspace import EmbeddingVector


def vec(values, kind="ivector", track_id=""):
    return EmbeddingVector(np.asarray(values, dtype=float), kind, track_id)


def direct_llr(B, W, e, t):
    """log N([e;t]; 0, [[B+W, B], [B, B+W]]) - log N(e; 0, B+W) - log N(t; 0, B+W)."""
    total = B + W
    joint = np.block([[total, B], [B, total]])
    return (multivariate_normal(np.zeros(2 * len(e)), joint).logpdf(np.concatenate([e, t]))
            - multivariate_normal(np.zeros(len(e)), total).logpdf(e)
            - multivariate_normal(np.zeros(len(e)), total).logpdf(t))


def identity_model(B, W):
    p = B.shape[0]
    return PldaModel(np.zeros(p), np.eye(p), B, W)


def clustered(rng, n_classes, per_class, p, spread=3.0):
    centers = rng.standard_normal((n_classes, p)) * spread
    X = np.repeat(centers, per_class, axis=0) + rng.standard_normal((n_classes * per_class, p))
    labels = np.repeat([f"a{i}" for i in range(n_classes)], per_class)
    return [vec(x) for x in X], list(labels)


@pytest.mark.parametrize("e,t", [(0.3, -1.2), (2.0, 2.0), (-0.7, 0.1), (1.0, -1.0)])
def test_one_dimensional_llr_matches_density(e, t):
    B, W = np.eye(1), np.eye(1)
    plda = identity_model(B, W)
    got = plda.llr_matrix(np.array([[e]]), np.array([[t]]), preprocessed=True)[0, 0]
    assert got == pytest.approx(direct_llr(B, W, np.array([e]), np.array([t])), abs=1e-10)


def test_one_dimensional_full_scoring_path():
    plda = identity_model(np.eye(1), np.eye(1))
    # preprocessing sends any nonzero 1-D value to its sign
    for e, t in [(0.4, 3.0), (-2.0, 5.0)]:
        expected = direct_llr(np.eye(1), np.eye(1), np.sign([e]), np.sign([t]))
        assert plda_score(plda, vec([e]), vec([t])) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_multivariate_llr_matches_density(seed):
    rng = np.random.default_rng(seed)
    p = 3
    A = rng.standard_normal((p, p))
    Wm = rng.standard_normal((p, p))
    B, W = A @ A.T, Wm @ Wm.T + 0.5 * np.eye(p)
    plda = identity_model(B, W)
    E, T = rng.standard_normal((4, p)), rng.standard_normal((5, p))
    S = plda.llr_matrix(E, T, preprocessed=True)
    for i, j in itertools.product(range(4), range(5)):
        assert S[i, j] == pytest.approx(direct_llr(B, W, E[i], T[j]), abs=1e-10)


def test_zero_between_class_gives_zero_scores(rng):
    plda = identity_model(np.zeros((3, 3)), np.diag([1.0, 2.0, 0.5]))
    S = plda.llr_matrix(rng.standard_normal((6, 3)), rng.standard_normal((6, 3)))
    assert np.all(np.abs(S) <= 1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_scores_are_symmetric(seed):
    rng = np.random.default_rng(seed)
    vectors, labels = clustered(rng, 4, 5, 3)
    plda = train_plda(vectors, labels)
    a, b = vec(rng.standard_normal(3)), vec(rng.standard_normal(3))
    assert abs(plda_score(plda, a, b) - plda_score(plda, b, a)) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(e=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-6), b=st.floats(0.01, 5), w=st.floats(0.01, 5))
def test_self_score_beats_opposite(e, b, w):
    plda = identity_model(np.array([[b]]), np.array([[w]]))
    same = plda.llr_matrix(np.array([[e]]), np.array([[e]]), preprocessed=True)[0, 0]
    opposite = plda.llr_matrix(np.array([[e]]), np.array([[-e]]), preprocessed=True)[0, 0]
    assert same > opposite


def test_two_point_classes_hand_case():
    plda = train_plda([vec([-1.0]), vec([-1.0]), vec([1.0]), vec([1.0])], ["a", "a", "b", "b"])
    assert plda.mean[0] == 0.0 and plda.whitener[0, 0] == pytest.approx(1.0)
    assert plda.B[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert plda.W[0, 0] == pytest.approx(1e-6, rel=1e-9)  # zero scatter plus the regularizer


def test_whitener_maps_total_covariance_to_identity(rng):
    vectors, labels = clustered(rng, 6, 10, 4)
    plda = train_plda(vectors, labels)
    X = np.stack([v.values for v in vectors])
    D = X - plda.mean
    cov = D.T @ D / len(X)
    np.testing.assert_allclose(plda.whitener @ cov @ plda.whitener.T, np.eye(4), atol=1e-6)
    assert np.all(np.linalg.eigvalsh(plda.B) >= -1e-12)
    assert np.all(np.linalg.eigvalsh(plda.W) > 0)


def test_duplication_and_permutation_invariance(rng):
    vectors, labels = clustered(rng, 5, 6, 3)
    base = train_plda(vectors, labels)
    dup = train_plda(vectors + vectors, labels + labels)
    for name in ("mean", "B", "W"):
        np.testing.assert_allclose(getattr(dup, name), getattr(base, name), atol=1e-10)
    order = rng.permutation(len(vectors))
    perm = train_plda([vectors[i] for i in order], [labels[i] for i in order])
    for name in ("mean", "whitener", "B", "W"):
        np.testing.assert_allclose(getattr(perm, name), getattr(base, name), atol=1e-12)


def test_training_errors(rng):
    vectors, labels = clustered(rng, 3, 4, 2)
    with pytest.raises(DegenerateError):
        train_plda(vectors, ["x"] * len(vectors))
    with pytest.raises(InsufficientDataError):
        train_plda(vectors[:3], ["a", "b", "c"])
    with pytest.raises(InsufficientDataError):
        train_plda([vec(rng.standard_normal(5)) for _ in range(4)], ["a", "a", "b", "b"])
    with pytest.raises(KindMismatchError):
        train_plda(vectors[:-1] + [vec(vectors[-1].values, "deep")], labels)


def test_score_dimension_mismatch(rng):
    vectors, labels = clustered(rng, 3, 4, 2)
    plda = train_plda(vectors, labels)
    with pytest.raises(ShapeError):
        plda_score(plda, vec([1.0, 2.0, 3.0]), vec([1.0, 2.0]))


def test_non_pd_model_raises():
    plda = identity_model(np.eye(2), -2 * np.eye(2))
    with pytest.raises(NumericalError):
        plda_score(plda, vec([1.0, 0.0]), vec([0.0, 1.0]))


def test_enrollment_cases():
    v = np.array([3.0, -1.0, 2.0])
    model = enroll_artist("a", [vec(v)] * 15)
    np.testing.assert_allclose(model.vector.values, v / np.linalg.norm(v), atol=1e-15)
    assert model.n_enrolled == 15
    two = enroll_artist("b", [vec([1.0, 0.0]), vec([0.0, 1.0])])
    np.testing.assert_allclose(two.vector.values, [2 ** -0.5, 2 ** -0.5], atol=1e-15)
    with pytest.raises(EmptyInputError):
        enroll_artist("c", [])
    with pytest.raises(KindMismatchError):
        enroll_artist("d", [vec([1.0, 0.0]), vec([0.0, 1.0], "deep")])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 15))
def test_enrollment_is_order_independent(seed, n):
    rng = np.random.default_rng(seed)
    vectors = [vec(rng.standard_normal(6) * 10 ** rng.uniform(-3, 3)) for _ in range(n)]
    a = enroll_artist("x", vectors).vector.values
    b = enroll_artist("x", [vectors[i] for i in rng.permutation(n)]).vector.values
    assert a.tobytes() == b.tobytes()


def test_early_fusion_layout(rng):
    r = 64
    iv = vec(rng.standard_normal(r), "ivector", "t1")
    deep = vec(np.abs(rng.standard_normal(256)), "deep", "t1")
    fused = early_fuse(iv, deep)
    assert fused.dim == 320 and fused.kind == "fused"
    np.testing.assert_allclose(fused.values[:r], iv.values / np.linalg.norm(iv.values), atol=1e-12)
    e1_iv, e1_deep = np.zeros(r), np.zeros(256)
    e1_iv[0] = e1_deep[0] = 1.0
    out = early_fuse(vec(e1_iv, "ivector", "t"), vec(e1_deep, "deep", "t")).values
    assert list(np.flatnonzero(out)) == [0, r]


def test_early_fusion_errors():
    with pytest.raises(FusionError):
        early_fuse(vec([1.0], "deep", "t"), vec([1.0], "deep", "t"))
    with pytest.raises(FusionError):
        early_fuse(vec([1.0], "ivector", "t1"), vec([1.0], "deep", "t2"))


def test_late_fusion_mean():
    assert late_fuse(7.0, 3.0) == 5.0
    assert late_fuse(-2.5, -2.5) == -2.5
    with pytest.raises(NumericalError):
        late_fuse(float("nan"), 1.0)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-1e6, 1e6), b=st.floats(-1e6, 1e6), d=st.floats(1e-3, 1e3))
def test_late_fusion_monotone(a, b, d):
    assert late_fuse(a + d, b) > late_fuse(a, b)
    assert late_fuse(a, b + d) > late_fuse(a, b)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 8), use_z=st.booleans())
def test_late_fusion_preserves_shared_argmax(seed, n, use_z):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, 6))
    b = rng.standard_normal((n, 6)) * 10
    star = rng.integers(n)
    for j in range(6):  # put model `star` on top of both systems for every test column
        a[star, j] = a[:, j].max() + 1.0
        b[star, j] = b[:, j].max() + 1.0
    fused = late_fuse_scores(a, b, use_z)
    assert np.all(np.argmax(fused, axis=0) == star)


def test_znorm_standardizes(rng):
    z = znorm(rng.standard_normal(50) * 4 + 7)
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12
    assert np.all(znorm(np.full(5, 3.0)) == 0.0)
