"""Acceptance gate: one test per headline criterion, each reporting PASS or FAIL.

The end-to-end run trains every branch on a 100-artist synthetic corpus and
takes a few minutes on one core.
"""

import contextlib
import json
import struct
import time

import numpy as np
import pytest
from scipy.stats import norm

from conftest import ACCEPTANCE_LINES
from ivx.backend import (PldaModel, enroll_artist, plda_score, train_plda)
from ivx.cli import main
from ivx.corpus import (SynthSpec, dumps_model, generate_corpus, load_model,
                        loads_model, save_model, split_corpus, validate_manifest)
from ivx.corpus.manifest import Artist, CorpusManifest, Track
from ivx.deepnet import NetConfig, build_network, gradient_errors
from ivx.errors import CorruptionError, ProtocolError, UnsupportedVersionError
from ivx.evalkit import compute_eer, run_experiment
from ivx.pipeline import RunConfig
from ivx.tvspace import (EmbeddingVector, TotalVariabilityModel, extract_ivector,
                         train_tv, ubm_fingerprint)
from ivx.ubm import BaumWelchStats, DiagGmm, UbmTrainConfig, train_ubm


@contextlib.contextmanager
def criterion(name):
    """Record PASS/FAIL for one criterion; failures still propagate."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        line = f"FAIL {name} ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    detail = "; ".join(notes + [f"{time.perf_counter() - start:.1f}s"])
    line = f"PASS {name} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


# -- EM monotonicity --------------------------------------------------------------

def test_em_monotonicity():
    with criterion("EM monotonicity (UBM and T matrix, 20 seeds)") as notes:
        start = time.perf_counter()
        worst = np.inf
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X = np.concatenate([rng.standard_normal((250, 3)) * s + c
                                for s, c in [(0.5, -2), (1.0, 0), (0.3, 3), (0.8, 6)]])
            gmm = train_ubm(X, UbmTrainConfig(n_components=6, n_iters=12, seed=seed))
            h = np.array(gmm.llh_history)
            steps = np.diff(h) / np.abs(h[:-1])
            assert gmm.n_resets == 0, f"seed {seed}: component reset"
            assert np.all(steps >= -1e-9), f"UBM seed {seed}: step {steps.min():.3e}"

            C, d, r = 4, 3, 3
            ubm = DiagGmm(np.full(C, 0.25), rng.standard_normal((C, d)),
                          rng.uniform(0.5, 2, (C, d)), np.full(d, 1e-6))
            T_true = rng.standard_normal((C * d, r))
            stats = []
            for i in range(50):
                N = rng.integers(20, 60, size=C).astype(float)
                shift = (T_true @ rng.standard_normal(r)).reshape(C, d)
                F = N[:, None] * shift + np.sqrt(N[:, None] * ubm.variances) * rng.standard_normal((C, d))
                stats.append(BaumWelchStats(N, F, int(N.sum()), f"t{i}"))
            tv = train_tv(ubm, stats, r=r, n_iters=8, seed=seed)
            o = np.array(tv.objective_history)
            tv_steps = np.diff(o) / np.abs(o[:-1])
            assert np.all(tv_steps >= -1e-9), f"TV seed {seed}: step {tv_steps.min():.3e}"
            worst = min(worst, steps.min(), tv_steps.min())
        elapsed = time.perf_counter() - start
        notes.append(f"smallest relative step {worst:.2e}")
        assert elapsed < 60


# -- i-vector closed form ---------------------------------------------------------

def test_ivector_closed_form():
    with criterion("i-vector closed form and dense oracle") as notes:
        ubm = DiagGmm(np.ones(1), np.zeros((1, 1)), np.ones((1, 1)), np.full(1, 1e-6))
        tv = TotalVariabilityModel(np.ones((1, 1)), ubm_fingerprint(ubm))
        for x in (1.0, -3.5, 0.25, 7.0):
            w = extract_ivector(tv, ubm, BaumWelchStats(np.ones(1), np.array([[x]]), 1)).values[0]
            assert abs(w - x / 2) <= 1e-12
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            C, d = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            r = int(rng.integers(1, C * d + 1))
            var = rng.uniform(0.5, 2.0, (C, d))
            ubm = DiagGmm(np.full(C, 1.0 / C), rng.standard_normal((C, d)), var, np.full(d, 1e-6))
            T = rng.standard_normal((C * d, r))
            N = rng.uniform(0, 30, C)
            F = rng.standard_normal((C, d)) * 5
            got = extract_ivector(TotalVariabilityModel(T, ubm_fingerprint(ubm)), ubm,
                                  BaumWelchStats(N, F, 0)).values
            S_inv = np.diag(1.0 / var.reshape(-1))
            L = np.eye(r) + T.T @ S_inv @ np.diag(np.repeat(N, d)) @ T
            expected = np.linalg.solve(L, T.T @ S_inv @ F.reshape(-1))
            worst = max(worst, np.max(np.abs(got - expected)))
        notes.append(f"max oracle deviation {worst:.1e}")
        assert worst <= 1e-10


# -- convnet gradients -------------------------------------------------------------

def test_convnet_gradients():
    with criterion("convnet gradients vs central differences") as notes:
        start = time.perf_counter()
        net = build_network(4, NetConfig(channels=(3, 4, 4, 6, 8)), seed=0)
        x = np.random.default_rng(0).standard_normal((128, 128))
        errors = gradient_errors(net, x, 2, epsilon=1e-5, n_params=400, seed=0)
        assert all(n > 0 for _, n in errors.values()), "a tensor was never checked"
        worst = max(e for e, _ in errors.values())
        elapsed = time.perf_counter() - start
        notes.append(f"max relative error {worst:.2e} over {sum(n for _, n in errors.values())} params")
        assert worst <= 1e-4
        assert elapsed < 120


# -- PLDA ----------------------------------------------------------------------------

def test_plda_oracle():
    with criterion("PLDA oracle, symmetry, B=0") as notes:
        worst = 0.0
        for B, W, e, t in [(1.0, 1.0, 0.3, -1.2), (2.5, 0.4, 1.0, 1.0), (0.1, 3.0, -2.0, 0.7)]:
            plda = PldaModel(np.zeros(1), np.eye(1), np.array([[B]]), np.array([[W]]))
            got = plda.llr_matrix(np.array([[e]]), np.array([[t]]), preprocessed=True)[0, 0]
            # same-identity joint density factors as p(e) p(t | e)
            tot = B + W
            cond = norm(loc=B / tot * e, scale=np.sqrt(tot - B * B / tot))
            direct = cond.logpdf(t) - norm(scale=np.sqrt(tot)).logpdf(t)
            worst = max(worst, abs(got - direct))
        assert worst <= 1e-10
        rng = np.random.default_rng(0)
        centers = rng.standard_normal((5, 4)) * 3
        X = np.repeat(centers, 6, axis=0) + rng.standard_normal((30, 4))
        plda = train_plda([EmbeddingVector(x, "ivector") for x in X], np.repeat(np.arange(5), 6))
        asym = max(abs(plda_score(plda, EmbeddingVector(a, "ivector"), EmbeddingVector(b, "ivector"))
                       - plda_score(plda, EmbeddingVector(b, "ivector"), EmbeddingVector(a, "ivector")))
                   for a, b in rng.standard_normal((20, 2, 4)))
        assert asym <= 1e-10
        zero = PldaModel(np.zeros(3), np.eye(3), np.zeros((3, 3)), np.diag([1.0, 2.0, 0.5]))
        b0 = np.abs(zero.llr_matrix(rng.standard_normal((6, 3)), rng.standard_normal((6, 3)))).max()
        assert b0 <= 1e-8
        notes.append(f"density {worst:.1e}, symmetry {asym:.1e}, B=0 {b0:.1e}")


# -- EER -----------------------------------------------------------------------------

def enumerate_eer(tar, non):
    points = []
    for t in sorted(set(tar) | set(non)) + [np.inf]:
        points.append((sum(s >= t for s in non) / len(non), sum(s < t for s in tar) / len(tar)))
    for k, (far, frr) in enumerate(points):
        if far <= frr:
            if far == frr or k == 0:
                return far
            (f0, r0) = points[k - 1]
            return f0 + (f0 - r0) / ((f0 - r0) - (far - frr)) * (far - f0)


def test_eer_oracle():
    with criterion("EER oracle (200 sets) and monotone-transform invariance") as notes:
        rng = np.random.default_rng(0)
        worst = inv = 0.0
        for _ in range(200):
            n_tar = int(rng.integers(1, 500))
            n_non = int(rng.integers(1, 1000 - n_tar))
            tar = rng.standard_normal(n_tar) + rng.uniform(-1, 3)
            non = rng.standard_normal(n_non)
            if rng.random() < 0.3:
                tar, non = np.round(tar, 1), np.round(non, 1)
            eer = compute_eer(tar, non)
            worst = max(worst, abs(eer - enumerate_eer(list(tar), list(non))))
            for f in (lambda s: 3.0 * s - 2.0, lambda s: s ** 3):
                inv = max(inv, abs(compute_eer(f(tar), f(non)) - eer))
        notes.append(f"oracle {worst:.1e}, transform {inv:.1e}")
        assert worst <= 1e-9
        assert inv <= 1e-12


# -- end-to-end recognition ----------------------------------------------------------

E2E_CONFIG = {
    "ubm": {"n_components": 32, "n_iters": 5},
    "tv_rank": 32, "tv_iters": 5,
    "net": {"channels": [4, 8, 16, 32, 64], "epochs": 10, "learning_rate": 0.005,
            "batch_size": 8},
}


@pytest.fixture(scope="module")
def e2e():
    start = time.perf_counter()
    spec = SynthSpec(n_train_artists=100, n_eval_artists=20, tracks_per_artist=20,
                     track_seconds=3.0, within_artist_spread=0.1, between_artist_spread=1.0)
    corpus = generate_corpus(spec, seed=0)
    result = run_experiment(corpus, 100, ["ivec", "dcnn", "early", "late"], seed=0,
                            config=RunConfig.from_dict(E2E_CONFIG))
    return result, time.perf_counter() - start


@pytest.mark.slow
def test_end_to_end_recognition(e2e):
    with criterion("end-to-end synthetic recognition") as notes:
        result, elapsed = e2e
        r = {name: sr.report for name, sr in result.systems.items()}
        notes.extend(f"{n} EER {rep.eer:.4f} acc {rep.accuracy:.3f}" for n, rep in r.items())
        notes.append(f"run {elapsed:.0f}s")
        assert r["ivec"].eer <= 0.10
        assert r["ivec"].accuracy >= 0.80
        assert r["dcnn"].eer <= 0.15
        assert r["late"].eer <= min(r["ivec"].eer, r["dcnn"].eer) + 0.01
        assert elapsed <= 600


@pytest.mark.slow
def test_score_matrix_structure(e2e):
    with criterion("score-matrix diagonal exceeds off-diagonal") as notes:
        result, _ = e2e
        for name, sr in result.systems.items():
            gap = sr.matrix.diagonal_gap()
            notes.append(f"{name} gap {gap:.1f}")
            assert sr.matrix.values.shape == (20, 20)
            assert np.all(np.isfinite(sr.matrix.values))
            assert gap > 0, name


# -- protocol -----------------------------------------------------------------------

def _tracks(aid, splits):
    return [Track(f"{aid}_{k:02d}", s) for k, s in enumerate(splits)]


def test_protocol_invariants():
    with criterion("protocol invariants and violations") as notes:
        corpus = generate_corpus(SynthSpec(n_train_artists=5, n_eval_artists=4, track_seconds=3.0), seed=1)
        for a in corpus.artists:
            assert len(a.tracks) == 20
        for a in corpus.eval_artists:
            enroll = {t.track_id for t in a.tracks if t.split == "enroll"}
            test = {t.track_id for t in a.tracks if t.split == "test"}
            assert len(enroll) == 15 and len(test) == 5 and not enroll & test
        assert not {a.artist_id for a in corpus.train_artists} & {a.artist_id for a in corpus.eval_artists}

        ok = ["enroll"] * 15 + ["test"] * 5
        violations = {
            "train/eval overlap": [Artist("x", "train", False, _tracks("x", ["train"] * 20)),
                                   Artist("x", "eval", False, _tracks("y", ok))],
            "19 tracks": [Artist("e", "eval", False, _tracks("e", ok[:-1]))],
            "16/4 split": [Artist("e", "eval", False, _tracks("e", ["enroll"] * 16 + ["test"] * 4))],
            "shared track": [Artist("e", "eval", False, _tracks("e", ok)),
                             Artist("f", "eval", False, _tracks("e", ok))],
        }
        for label, artists in violations.items():
            with pytest.raises(ProtocolError):
                validate_manifest(CorpusManifest(artists))
        with pytest.raises(ProtocolError):
            split_corpus(CorpusManifest([Artist("s", "eval", False, _tracks("s", ["train"] * 19))]))
        notes.append(f"{len(violations) + 1} violations rejected")


# -- determinism ---------------------------------------------------------------------

def test_determinism(tmp_path):
    with criterion("determinism: byte-identical report.csv over two runs") as notes:
        config = {"ubm": {"n_components": 8, "n_iters": 3}, "tv_rank": 8, "tv_iters": 3,
                  "net": {"channels": [2, 2, 2, 2, 2], "epochs": 1}}
        (tmp_path / "config.json").write_text(json.dumps(config))
        reports = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["synth", "--out", str(out), "--seed", "7", "--quiet",
                         "--train-artists", "14", "--eval-artists", "3", "--seconds", "3"]) == 0
            assert main(["sweep", "--manifest", str(out / "manifest.json"), "--out", str(out),
                         "--config", str(tmp_path / "config.json"), "--seed", "7", "--quiet",
                         "--counts", "14", "--systems", "ivec,dcnn,early,late"]) == 0
            reports.append((out / "report.csv").read_bytes())
        assert reports[0] == reports[1]
        assert len(reports[0].decode().splitlines()) == 5
        notes.append(f"{len(reports[0])} bytes")


# -- persistence ---------------------------------------------------------------------

def test_persistence(tmp_path):
    with criterion("persistence round trip, corruption and version rejection") as notes:
        rng = np.random.default_rng(0)
        gmm = train_ubm(rng.standard_normal((200, 3)), UbmTrainConfig(n_components=3, n_iters=2))
        tv = TotalVariabilityModel(rng.standard_normal((9, 2)), ubm_fingerprint(gmm), (1.0, 2.0))
        net = build_network(3, NetConfig(input_shape=(32, 32), channels=(2, 3, 2, 3, 2)), seed=1)
        X = rng.standard_normal((12, 3))
        plda = train_plda([EmbeddingVector(x, "ivector") for x in X], np.repeat([0, 1, 2], 4))
        artists = [enroll_artist(f"a{i}", [EmbeddingVector(x, "ivector")]) for i, x in enumerate(X[:3])]
        for name, model in [("gmm", gmm), ("tv", tv), ("convnet", net), ("plda", plda),
                            ("artists", artists)]:
            path = tmp_path / f"{name}.ivxm"
            save_model(path, model)
            blob = path.read_bytes()
            back = load_model(path)
            assert dumps_model(back) == blob, name
            if name == "convnet":
                assert all(back.params[k].tobytes() == v.tobytes() for k, v in net.params.items())
            elif name == "artists":
                assert [m.vector.values.tobytes() for m in back] == [m.vector.values.tobytes() for m in artists]
            else:
                for key, value in vars(model).items():
                    if isinstance(value, np.ndarray):
                        assert getattr(back, key).tobytes() == value.tobytes(), (name, key)
            for cut in (3, len(blob) // 2, len(blob) - 1):
                with pytest.raises(CorruptionError):
                    loads_model(blob[:cut])
            bumped = bytearray(blob)
            bumped[4:6] = struct.pack("<H", 99)
            with pytest.raises(UnsupportedVersionError):
                loads_model(bytes(bumped))
            with pytest.raises(CorruptionError):
                loads_model(b"JUNK" + blob[4:])
        notes.append("5 kinds")
