"""Command-line entry point: one verb per pipeline stage.

Stages chain through the ``--out`` directory, e.g.::

    ivx synth --out run
    ivx train-ubm --manifest run/manifest.json --out run
    ivx train-tv --manifest run/manifest.json --out run
    ivx extract --manifest run/manifest.json --kind ivec --out run
    ...

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend, deepnet, evalkit, pipeline
from .corpus import (EmbeddingSet, SynthSpec, generate_corpus, load_manifest,
                     load_model, save_model)
from .corpus import container
from .errors import ConfigurationError, IvxError
from .tvspace import EmbeddingVector

log = logging.getLogger("ivx")

VERBS = ("synth", "train-ubm", "train-tv", "train-dcnn", "train-plda", "extract",
         "enroll", "score", "eval", "sweep", "grad-check")
KINDS = ("ivec", "deep", "early")
KIND_OF_SYSTEM = {"ivec": "ivec", "dcnn": "deep", "early": "early"}


@dataclass
class Command:
    verb: str
    options: dict = field(default_factory=dict)
    seed: int | None = None
    config: Path | None = None
    out: Path = Path(".")
    quiet: bool = False


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _systems(text: str) -> list[str]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in values if v not in pipeline.SYSTEMS]
    if bad or not values:
        raise argparse.ArgumentTypeError(f"unknown system {bad[0] if bad else text!r}; "
                                         f"choose from {','.join(pipeline.SYSTEMS)}")
    return values


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (falls back to $IVX_SEED)")
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, help="output directory (default: .)")
    common.add_argument("--quiet", action="store_true", help="suppress progress lines")

    parser = argparse.ArgumentParser(prog="ivx", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", metavar="verb")
    sub.required = True

    def verb(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    p = verb("synth", "generate a synthetic corpus and its manifest")
    p.add_argument("--train-artists", type=int)
    p.add_argument("--eval-artists", type=int)
    p.add_argument("--tracks", type=int, help="tracks per artist")
    p.add_argument("--seconds", type=float, help="track duration")
    p.add_argument("--within", type=float, help="within-artist spread")
    p.add_argument("--between", type=float, help="between-artist spread")
    p.add_argument("--vocal-fraction", type=float)
    p.add_argument("--mode", choices=("feature", "audio"))

    p = verb("train-ubm", "train the universal background model")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--components", type=int)
    p.add_argument("--iters", type=int)

    p = verb("train-tv", "train the total-variability matrix")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ubm", type=Path, help="default: OUT/ubm.ivxm")
    p.add_argument("--rank", type=int)
    p.add_argument("--iters", type=int)

    p = verb("train-dcnn", "train the convnet on 3 s training segments")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--channels", type=_int_list)
    p.add_argument("--tracks-per-artist", type=int)

    p = verb("extract", "extract per-track embeddings of one kind")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--kind", choices=KINDS, required=True)

    p = verb("train-plda", "train PLDA on training-artist embeddings")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--kind", choices=KINDS, required=True)

    p = verb("enroll", "build artist models from enrollment tracks")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--kind", choices=KINDS, required=True)

    p = verb("score", "score every artist model against every test track")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--system", choices=pipeline.SYSTEMS, required=True)
    p.add_argument("--znorm", action="store_true", default=None,
                   help="z-normalize branch scores before late fusion")

    p = verb("eval", "EER and identification accuracy from scored trials")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--systems", type=_systems)

    p = verb("sweep", "train and evaluate at several training-set sizes")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--counts", type=_int_list)
    p.add_argument("--systems", type=_systems)
    p.add_argument("--znorm", action="store_true", default=None)

    p = verb("grad-check", "compare convnet gradients with finite differences")
    p.add_argument("--channels", type=_int_list, default=[2, 2, 2, 2, 2])
    p.add_argument("--size", type=int, default=32, help="input height and width")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--params", type=int, default=200)
    return parser


def parse_args(argv) -> Command:
    """Parse a command line; usage errors exit with status 2."""
    ns = vars(_build_parser().parse_args(list(argv)))
    verb = ns.pop("verb")
    seed, config, out, quiet = ns.pop("seed"), ns.pop("config"), ns.pop("out"), ns.pop("quiet")
    options = {k: v for k, v in ns.items() if v is not None}
    return Command(verb, options, seed, config, out or Path("."), quiet)


# -- configuration -----------------------------------------------------------

_OVERRIDES = {
    "components": ("ubm", "n_components"),
    "epochs": ("net", "epochs"),
    "lr": ("net", "learning_rate"),
    "batch_size": ("net", "batch_size"),
    "channels": ("net", "channels"),
    "tracks_per_artist": (None, "dcnn_tracks_per_artist"),
    "rank": (None, "tv_rank"),
    "znorm": (None, "late_znorm"),
    "counts": (None, "counts"),
    "systems": (None, "systems"),
}


def _read_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return data


def resolve(cmd: Command) -> tuple[pipeline.RunConfig, int]:
    """Merge defaults, config file and flags (flags win); pick the seed."""
    raw = _read_config_file(cmd.config)
    file_seed = raw.pop("seed", None)
    for key, value in cmd.options.items():
        target = _OVERRIDES.get(key)
        if key == "iters":
            target = ("ubm", "n_iters") if cmd.verb == "train-ubm" else (None, "tv_iters")
        if target is None:
            continue
        section, name = target
        if section is None:
            raw[name] = value
        else:
            raw[section] = dict(raw.get(section, {}), **{name: value})
    try:
        config = pipeline.RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    if cmd.seed is not None:
        seed = cmd.seed
    elif os.environ.get("IVX_SEED"):
        try:
            seed = int(os.environ["IVX_SEED"])
        except ValueError:
            raise ConfigurationError(f"IVX_SEED must be an integer, got {os.environ['IVX_SEED']!r}")
    elif file_seed is not None:
        seed = int(file_seed)
    else:
        seed = 0
    return config.with_seed(seed), seed


# -- verbs -------------------------------------------------------------------

def _embeddings_path(out: Path, kind: str) -> Path:
    return out / f"embeddings-{kind}.ivxm"


def _track_index(manifest):
    return {t.track_id: (a, t) for a in manifest.artists for t in a.tracks}


def _synth(cmd, config, seed):
    names = {"train_artists": "n_train_artists", "eval_artists": "n_eval_artists",
             "tracks": "tracks_per_artist", "seconds": "track_seconds",
             "within": "within_artist_spread", "between": "between_artist_spread",
             "vocal_fraction": "vocal_fraction", "mode": "mode"}
    spec = SynthSpec(**{names[k]: v for k, v in cmd.options.items() if k in names})
    manifest = generate_corpus(spec, seed, cmd.out)
    log.info("wrote %d artists to %s", len(manifest.artists), cmd.out / "manifest.json")


def _train_ubm(cmd, config, seed):
    manifest = load_manifest(cmd.options["manifest"])
    cache = pipeline.FeatureCache(manifest, config)
    ubm = pipeline.fit_ubm(cache, manifest.train_artists, config)
    save_model(cmd.out / "ubm.ivxm", ubm)
    log.info("ubm: %d components, mean llh per iteration %s", ubm.n_components,
             " ".join(f"{v:.4f}" for v in ubm.llh_history))


def _train_tv(cmd, config, seed):
    manifest = load_manifest(cmd.options["manifest"])
    ubm = load_model(cmd.options.get("ubm", cmd.out / "ubm.ivxm"), container.KIND_GMM)
    cache = pipeline.FeatureCache(manifest, config)
    tv = pipeline.fit_tv(cache, manifest.train_artists, ubm, config)
    save_model(cmd.out / "tv.ivxm", tv)
    log.info("tv: rank %d, objective %s", tv.rank,
             " ".join(f"{v:.4f}" for v in tv.objective_history))


def _train_dcnn(cmd, config, seed):
    manifest = load_manifest(cmd.options["manifest"])
    cache = pipeline.FeatureCache(manifest, config)
    artists = manifest.train_artists
    X, y = pipeline.training_segments(cache, artists, config)
    net = deepnet.build_network(len(artists), config.net, seed)

    def progress(epoch, loss, acc):
        log.info("epoch %d: loss %.5f accuracy %.4f", epoch + 1, loss, acc)

    net, _ = deepnet.train_network(net, X, y, config.net, progress=progress)
    save_model(cmd.out / "dcnn.ivxm", net)


def _extract(cmd, config, seed):
    manifest = load_manifest(cmd.options["manifest"])
    kind = cmd.options["kind"]
    pairs = pipeline.tracks_of(manifest.artists)
    labels = [aid for aid, _ in pairs]
    if kind == "early":
        iv = load_model(_embeddings_path(cmd.out, "ivec"), container.KIND_EMBEDDINGS)
        dp = load_model(_embeddings_path(cmd.out, "deep"), container.KIND_EMBEDDINGS)
        deep_by_id = {v.track_id: v for v in dp.vectors}
        missing = [v.track_id for v in iv.vectors if v.track_id not in deep_by_id]
        if missing:
            raise IvxError(f"deep embeddings missing for tracks such as {missing[0]}")
        vectors = pipeline.fuse_all(iv.vectors, [deep_by_id[v.track_id] for v in iv.vectors])
        labels = iv.labels
    else:
        cache = pipeline.FeatureCache(manifest, config)
        if kind == "ivec":
            ubm = load_model(cmd.out / "ubm.ivxm", container.KIND_GMM)
            tv = load_model(cmd.out / "tv.ivxm", container.KIND_TV)
            vectors = pipeline.ivectors(cache, ubm, tv, pairs)
        else:
            net = load_model(cmd.out / "dcnn.ivxm", container.KIND_CONVNET)
            vectors = pipeline.deep_vectors(cache, net, pairs, config)
    save_model(_embeddings_path(cmd.out, kind), EmbeddingSet(vectors, labels))
    log.info("extracted %d %s embeddings", len(vectors), kind)


def _select(embeddings: EmbeddingSet, manifest, role: str, split: str):
    index = _track_index(manifest)
    chosen = []
    for v, label in zip(embeddings.vectors, embeddings.labels):
        artist, track = index.get(v.track_id, (None, None))
        if artist is None:
            raise IvxError(f"embedding for unknown track {v.track_id}")
        if artist.role == role and track.split == split:
            chosen.append((label, v))
    if not chosen:
        raise IvxError(f"no {role}/{split} embeddings found")
    return chosen


def _train_plda(cmd, config, seed):
    manifest = load_manifest(cmd.options["manifest"])
    kind = cmd.options["kind"]
    emb = load_model(_embeddings_path(cmd.out, kind), container.KIND_EMBEDDINGS)
    chosen = _select(emb, manifest, "train", "train")
    plda = backend.train_plda([v for _, v in chosen], [label for label, _ in chosen])
    save_model(cmd.out / f"plda-{kind}.ivxm", plda)
    log.info("plda-%s trained on %d vectors", kind, len(chosen))


def _enroll(cmd, config, seed):
    manifest = load_manifest(cmd.options["manifest"])
    kind = cmd.options["kind"]
    emb = load_model(_embeddings_path(cmd.out, kind), container.KIND_EMBEDDINGS)
    grouped: dict = {}
    for label, v in _select(emb, manifest, "eval", "enroll"):
        grouped.setdefault(label, []).append(v)
    models = [backend.enroll_artist(aid, grouped[aid]) for aid in sorted(grouped)]
    save_model(cmd.out / f"artists-{kind}.ivxm", models)
    log.info("enrolled %d artists (%s)", len(models), kind)


def _branch_scores(out: Path, manifest, kind: str):
    models = load_model(out / f"artists-{kind}.ivxm", container.KIND_ARTISTS)
    plda = load_model(out / f"plda-{kind}.ivxm", container.KIND_PLDA)
    emb = load_model(_embeddings_path(out, kind), container.KIND_EMBEDDINGS)
    tests = sorted(_select(emb, manifest, "eval", "test"), key=lambda p: p[1].track_id)
    ids = [m.artist_id for m in models]
    M = np.stack([m.vector.values for m in models])
    T = np.stack([v.values for _, v in tests])
    scores = plda.llr_matrix(M, T)
    grouped: dict = {}
    for label, v in tests:
        grouped.setdefault(label, []).append(v)
    aggregated = [backend.enroll_artist(aid, grouped[aid]).vector for aid in sorted(grouped)]
    aggregated = [EmbeddingVector(v.values, v.kind, aid)
                  for v, aid in zip(aggregated, sorted(grouped))]
    matrix = evalkit.score_matrix(models, aggregated, plda)
    return ids, [v.track_id for _, v in tests], [label for label, _ in tests], scores, matrix


def _score(cmd, config, seed):
    manifest = load_manifest(cmd.options["manifest"])
    system = cmd.options["system"]
    if system == "late":
        ids, test_ids, owners, s_iv, m_iv = _branch_scores(cmd.out, manifest, "ivec")
        ids2, test_ids2, _, s_dp, m_dp = _branch_scores(cmd.out, manifest, "deep")
        if ids != ids2 or test_ids != test_ids2:
            raise IvxError("ivec and deep trials do not line up")
        scores = backend.late_fuse_scores(s_iv, s_dp, config.late_znorm)
        matrix = evalkit.ScoreMatrix(ids, backend.late_fuse_scores(m_iv.values, m_dp.values,
                                                                   config.late_znorm))
    else:
        ids, test_ids, owners, scores, matrix = _branch_scores(cmd.out, manifest,
                                                               KIND_OF_SYSTEM[system])
    trials = evalkit.trial_set(ids, test_ids, owners, scores)
    (cmd.out / f"trials-{system}.csv").write_text(evalkit.trials_csv(trials))
    (cmd.out / f"scores-{system}.csv").write_text(evalkit.matrix_csv(matrix))
    log.info("%s: %d trials scored, diagonal gap %.4f", system, len(trials.trials),
             matrix.diagonal_gap())


def _eval(cmd, config, seed):
    manifest = load_manifest(cmd.options["manifest"])
    systems = cmd.options.get("systems") or [
        s for s in pipeline.SYSTEMS if (cmd.out / f"trials-{s}.csv").is_file()]
    if not systems:
        raise IvxError(f"no scored trials found in {cmd.out}")
    reports = []
    for system in systems:
        path = cmd.out / f"trials-{system}.csv"
        if not path.is_file():
            raise FileNotFoundError(f"trials file not found: {path}")
        trials = evalkit.read_trials_csv(path.read_text())
        reports.append(evalkit.report_from_trials(system, trials,
                                                  len(manifest.train_artists), seed))
    text = evalkit.report_csv(reports)
    (cmd.out / "report.csv").write_text(text)
    sys.stdout.write(text)


def _sweep(cmd, config, seed):
    manifest = load_manifest(cmd.options["manifest"])
    counts = list(config.counts) or [len(manifest.train_artists)]
    reports = evalkit.run_sweep(manifest, counts, config.systems, seed, config, cmd.out)
    sys.stdout.write(evalkit.report_csv(reports))


def _grad_check(cmd, config, seed):
    o = cmd.options
    net_config = deepnet.NetConfig(input_shape=(o["size"], o["size"]), channels=tuple(o["channels"]))
    net = deepnet.build_network(o["classes"], net_config, seed)
    sample = np.random.default_rng(seed).standard_normal((o["size"], o["size"]))
    errors = deepnet.gradient_errors(net, sample, 0, o["epsilon"], o["params"], seed)
    for name, (err, n) in errors.items():
        log.info("%-8s max relative error %.3e over %d parameters", name, err, n)
    worst = max(err for err, _ in errors.values())
    print(f"max relative error {worst:.3e}")
    return 0 if worst <= 1e-4 else 1


HANDLERS = {"synth": _synth, "train-ubm": _train_ubm, "train-tv": _train_tv,
            "train-dcnn": _train_dcnn, "extract": _extract, "train-plda": _train_plda,
            "enroll": _enroll, "score": _score, "eval": _eval, "sweep": _sweep,
            "grad-check": _grad_check}


def run(cmd: Command) -> int:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.WARNING if cmd.quiet else logging.INFO)
    try:
        config, seed = resolve(cmd)
        cmd.out.mkdir(parents=True, exist_ok=True)
        status = HANDLERS[cmd.verb](cmd, config, seed)
        return status or 0
    except (IvxError, OSError, ValueError, ArithmeticError) as exc:
        print(f"ivx {cmd.verb}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        log.removeHandler(handler)


def main(argv=None) -> int:
    try:
        cmd = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return run(cmd)


if __name__ == "__main__":
    sys.exit(main())
