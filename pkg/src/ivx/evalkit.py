"""Verification and identification metrics, score matrices and the training-size sweep."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import backend, pipeline
from .backend import ArtistModel, PldaModel
from .corpus.manifest import CorpusManifest
from .errors import (ConfigurationError, InsufficientDataError, ProtocolError,
                     ShapeError)
from .tvspace import EmbeddingVector

log = logging.getLogger(__name__)

REPORT_HEADER = ["n_train", "system", "eer", "accuracy", "seed"]


@dataclass(frozen=True)
class TrialScore:
    model_id: str
    test_track_id: str
    score: float
    is_target: bool


@dataclass
class TrialSet:
    trials: list
    n_models: int
    n_tests: int

    def __post_init__(self):
        pairs = {(t.model_id, t.test_track_id) for t in self.trials}
        if len(pairs) != len(self.trials):
            raise ProtocolError("duplicate (model, test) trial")

    def split_scores(self) -> tuple[np.ndarray, np.ndarray]:
        tar = np.array([t.score for t in self.trials if t.is_target])
        non = np.array([t.score for t in self.trials if not t.is_target])
        return tar, non


@dataclass(eq=False)
class ScoreMatrix:
    ids: list
    values: np.ndarray

    def diagonal_gap(self) -> float:
        """Mean diagonal minus mean off-diagonal score."""
        n = len(self.ids)
        diag = np.trace(self.values) / n
        if n == 1:
            return 0.0
        off = (self.values.sum() - np.trace(self.values)) / (n * n - n)
        return float(diag - off)


@dataclass(frozen=True)
class EvalReport:
    system: str
    eer: float
    accuracy: float
    n_train_artists: int
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.eer <= 1.0 and 0.0 <= self.accuracy <= 1.0):
            raise ValueError("eer and accuracy must lie in [0, 1]")


def compute_eer(target_scores, nontarget_scores) -> float:
    """Equal error rate with linear interpolation between ROC operating points.

    Thresholds run over the sorted union of scores (plus +inf).  At threshold
    t a non-target is accepted when its score is >= t and a target rejected
    when its score is < t.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise InsufficientDataError("EER needs at least one target and one non-target score")
    if not (np.all(np.isfinite(tar)) and np.all(np.isfinite(non))):
        raise ValueError("scores must be finite")
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    gap = far - frr
    i = int(np.argmax(gap <= 0))
    if gap[i] == 0 or i == 0:
        return float(far[i])
    lam = gap[i - 1] / (gap[i - 1] - gap[i])
    return float(far[i - 1] + lam * (far[i] - far[i - 1]))


def identify_from_scores(ids: Sequence[str], scores) -> str:
    """Argmax over ``scores``; ties go to the lexicographically smallest id."""
    scores = np.asarray(scores, dtype=np.float64)
    best = scores.max()
    return min(i for i, s in zip(ids, scores) if s == best)


def identify(models: Sequence[ArtistModel], test: EmbeddingVector, plda: PldaModel) -> str:
    if not models:
        raise ConfigurationError("no enrolled models to identify against")
    M = np.stack([m.vector.values for m in models])
    scores = plda.llr_matrix(M, test.values[None])[:, 0]
    return identify_from_scores([m.artist_id for m in models], scores)


def accuracy(predictions: Sequence[str], truth: Sequence[str]) -> float:
    if len(predictions) != len(truth) or len(truth) == 0:
        raise ShapeError("predictions and truth must have equal, nonzero length")
    return sum(p == t for p, t in zip(predictions, truth)) / len(truth)


def score_matrix(models: Sequence[ArtistModel], test_vectors: Sequence[EmbeddingVector],
                 plda: PldaModel) -> ScoreMatrix:
    """Entry (i, j) scores artist i's model against artist j's aggregated test vector.

    Test vectors are matched to models through their ``track_id``, which
    must carry the artist id.
    """
    ids = [m.artist_id for m in models]
    by_id = {v.track_id: v for v in test_vectors}
    if set(by_id) != set(ids) or len(by_id) != len(test_vectors):
        raise ConfigurationError("model and test-vector artist ids differ")
    M = np.stack([m.vector.values for m in models])
    T = np.stack([by_id[i].values for i in ids])
    return ScoreMatrix(ids, plda.llr_matrix(M, T))


def trial_set(model_ids, test_ids, test_owner, scores) -> TrialSet:
    trials = [TrialScore(m, t, float(scores[i, j]), test_owner[j] == m)
              for i, m in enumerate(model_ids) for j, t in enumerate(test_ids)]
    return TrialSet(trials, len(model_ids), len(test_ids))


# -- experiment ----------------------------------------------------------------

@dataclass
class SystemResult:
    report: EvalReport
    trials: TrialSet
    matrix: ScoreMatrix


@dataclass
class ExperimentResult:
    n_train: int
    train_ids: list
    systems: dict = field(default_factory=dict)  # name -> SystemResult
    ivector_branch: pipeline.IvectorBranch | None = None
    deep_branch: pipeline.DeepBranch | None = None
    early_plda: PldaModel | None = None

    @property
    def reports(self) -> list[EvalReport]:
        return [r.report for r in self.systems.values()]


def _normalize_systems(systems) -> list[str]:
    systems = [s.strip() for s in systems]
    bad = [s for s in systems if s not in pipeline.SYSTEMS]
    if bad or not systems:
        raise ConfigurationError(f"unknown systems {bad}; choose from {pipeline.SYSTEMS}")
    return [s for s in pipeline.SYSTEMS if s in systems]


def select_train_artists(manifest: CorpusManifest, n_train: int, seed: int) -> list:
    pool = sorted(manifest.train_artists, key=lambda a: a.artist_id)
    if n_train > len(pool) or n_train < 2:
        raise ConfigurationError(f"requested {n_train} training artists, {len(pool)} available")
    rng = np.random.default_rng([seed, n_train])
    chosen = np.sort(rng.choice(len(pool), size=n_train, replace=False))
    return [pool[i] for i in chosen]


def _check_protocol(train_artists, eval_artists):
    overlap = {a.artist_id for a in train_artists} & {a.artist_id for a in eval_artists}
    if overlap:
        raise ProtocolError(f"artists in both train and eval sets: {sorted(overlap)}")
    for a in eval_artists:
        enroll = {t.track_id for t in a.tracks if t.split == "enroll"}
        test = {t.track_id for t in a.tracks if t.split == "test"}
        if enroll & test:
            raise ProtocolError(f"artist {a.artist_id}: enroll and test tracks overlap")
        if not enroll or not test:
            raise ProtocolError(f"artist {a.artist_id} lacks enroll or test tracks")


def _evaluate(name, ids, test_ids, owners, scores, matrix, n_train, seed) -> SystemResult:
    trials = trial_set(ids, test_ids, owners, scores)
    tar, non = trials.split_scores()
    eer = compute_eer(tar, non)
    preds = [identify_from_scores(ids, scores[:, j]) for j in range(len(test_ids))]
    acc = accuracy(preds, owners)
    log.info("n_train=%d %s: EER %.4f accuracy %.4f", n_train, name, eer, acc)
    return SystemResult(EvalReport(name, eer, acc, n_train, seed), trials, matrix)


def run_experiment(manifest: CorpusManifest, n_train: int, systems, seed: int,
                   config: pipeline.RunConfig | None = None,
                   cache: pipeline.FeatureCache | None = None) -> ExperimentResult:
    """Train every requested branch on ``n_train`` artists and evaluate on the eval set."""
    config = (config or pipeline.RunConfig()).with_seed(seed)
    systems = _normalize_systems(systems)
    cache = cache or pipeline.FeatureCache(manifest, config)
    train = select_train_artists(manifest, n_train, seed)
    evals = sorted(manifest.eval_artists, key=lambda a: a.artist_id)
    _check_protocol(train, evals)
    result = ExperimentResult(n_train, [a.artist_id for a in train])

    ids = [a.artist_id for a in evals]
    enroll_pairs = pipeline.tracks_of(evals, ("enroll",))
    test_pairs = pipeline.tracks_of(evals, ("test",))
    test_ids = [t.track_id for _, t in test_pairs]
    owners = [aid for aid, _ in test_pairs]

    need_iv = any(s in systems for s in ("ivec", "early", "late"))
    need_deep = any(s in systems for s in ("dcnn", "early", "late"))
    vectors = {}
    if need_iv:
        branch = pipeline.train_ivector_branch(cache, train, config)
        result.ivector_branch = branch
        vectors["ivec"] = (pipeline.ivectors(cache, branch.ubm, branch.tv, enroll_pairs),
                           pipeline.ivectors(cache, branch.ubm, branch.tv, test_pairs),
                           branch.plda)
    if need_deep:
        branch = pipeline.train_deep_branch(cache, train, config)
        result.deep_branch = branch
        vectors["dcnn"] = (pipeline.deep_vectors(cache, branch.net, enroll_pairs, config),
                           pipeline.deep_vectors(cache, branch.net, test_pairs, config),
                           branch.plda)
    if "early" in systems:
        train_pairs = pipeline.tracks_of(train)
        iv_b, deep_b = result.ivector_branch, result.deep_branch
        fused_train = pipeline.fuse_all(
            pipeline.ivectors(cache, iv_b.ubm, iv_b.tv, train_pairs),
            pipeline.deep_vectors(cache, deep_b.net, train_pairs, config))
        result.early_plda = backend.train_plda(fused_train, [aid for aid, _ in train_pairs])
        vectors["early"] = (pipeline.fuse_all(vectors["ivec"][0], vectors["dcnn"][0]),
                            pipeline.fuse_all(vectors["ivec"][1], vectors["dcnn"][1]),
                            result.early_plda)

    raw = {}
    for name, (enroll_vecs, test_vecs, plda) in vectors.items():
        models = _enroll_all(ids, enroll_pairs, enroll_vecs)
        M = np.stack([m.vector.values for m in models])
        scores = plda.llr_matrix(M, np.stack([v.values for v in test_vecs]))
        matrix = score_matrix(models, _enroll_all(ids, test_pairs, test_vecs, as_vectors=True), plda)
        raw[name] = (scores, matrix)
    if "late" in systems:
        s_iv, m_iv = raw["ivec"]
        s_dp, m_dp = raw["dcnn"]
        fused = backend.late_fuse_scores(s_iv, s_dp, config.late_znorm)
        fused_matrix = ScoreMatrix(ids, backend.late_fuse_scores(m_iv.values, m_dp.values,
                                                                 config.late_znorm))
        raw["late"] = (fused, fused_matrix)
    for name in systems:
        scores, matrix = raw["ivec" if name == "ivec" else name]
        result.systems[name] = _evaluate(name, ids, test_ids, owners, scores, matrix,
                                         n_train, seed)
    return result


def _enroll_all(ids, pairs, vecs, as_vectors=False):
    grouped = {i: [] for i in ids}
    for (aid, _), v in zip(pairs, vecs):
        grouped[aid].append(v)
    models = [backend.enroll_artist(i, grouped[i]) for i in ids]
    return [m.vector for m in models] if as_vectors else models


def run_sweep(manifest: CorpusManifest, train_counts: Sequence[int], systems, seed: int,
              config: pipeline.RunConfig | None = None, out_dir=None) -> list[EvalReport]:
    """One experiment per training-set size; one report per (count, system).

    With ``out_dir`` set, writes ``report.csv`` and per-system score matrices
    ``scores-{system}-n{count}.csv``; ``scores-{system}.csv`` holds the
    matrix of the last count.
    """
    config = config or pipeline.RunConfig()
    systems = _normalize_systems(systems)
    available = len(manifest.train_artists)
    for n in train_counts:
        if n > available:
            raise ConfigurationError(f"count {n} exceeds {available} training artists")
    cache = pipeline.FeatureCache(manifest, config)
    reports, results = [], []
    for n in train_counts:
        res = run_experiment(manifest, n, systems, seed, config, cache)
        results.append(res)
        reports.extend(res.reports)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report_csv(reports))
        for res in results:
            for name, sr in res.systems.items():
                (out / f"scores-{name}-n{res.n_train}.csv").write_text(matrix_csv(sr.matrix))
        if results:
            for name, sr in results[-1].systems.items():
                (out / f"scores-{name}.csv").write_text(matrix_csv(sr.matrix))
    return reports


# -- serialization -----------------------------------------------------------

def fmt(x: float) -> str:
    return format(float(x), ".9g")


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in reports:
        writer.writerow([r.n_train_artists, r.system, fmt(r.eer), fmt(r.accuracy), r.seed])
    return buf.getvalue()


def matrix_csv(matrix: ScoreMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id"] + list(matrix.ids))
    for i, row in zip(matrix.ids, matrix.values):
        writer.writerow([i] + [fmt(v) for v in row])
    return buf.getvalue()


def trials_csv(trials: TrialSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model_id", "test_track_id", "score", "is_target"])
    for t in trials.trials:
        writer.writerow([t.model_id, t.test_track_id, fmt(t.score), int(t.is_target)])
    return buf.getvalue()


def read_trials_csv(text: str) -> TrialSet:
    rows = list(csv.DictReader(io.StringIO(text)))
    trials = [TrialScore(r["model_id"], r["test_track_id"], float(r["score"]),
                         r["is_target"] in ("1", "True", "true")) for r in rows]
    return TrialSet(trials, len({t.model_id for t in trials}),
                    len({t.test_track_id for t in trials}))


def report_from_trials(system: str, trials: TrialSet, n_train: int, seed: int) -> EvalReport:
    """EER over all trials; identification by argmax over each test track's model scores."""
    tar, non = trials.split_scores()
    by_test: dict = {}
    for t in trials.trials:
        by_test.setdefault(t.test_track_id, []).append(t)
    preds, truth = [], []
    for rows in by_test.values():
        owners = [t.model_id for t in rows if t.is_target]
        if len(owners) != 1:
            raise ProtocolError(f"test track {rows[0].test_track_id} needs exactly one target model")
        truth.append(owners[0])
        preds.append(identify_from_scores([t.model_id for t in rows], [t.score for t in rows]))
    return EvalReport(system, compute_eer(tar, non), accuracy(preds, truth), n_train, seed)
