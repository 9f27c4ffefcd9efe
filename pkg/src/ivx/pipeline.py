"""Stage wiring shared by the sweep experiment and the command line.

A :class:`FeatureCache` memoizes per-track front-end features so that a sweep
over several training-set sizes computes MFCCs and mel images only once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import backend, deepnet
from .corpus.manifest import CorpusManifest, Track, track_mel, track_mfcc
from .dsp import DspConfig, FeatureSequence, cmvn
from .errors import ConfigurationError
from .tvspace import (EmbeddingVector, TotalVariabilityModel, extract_ivectors,
                      train_tv)
from .ubm import DiagGmm, UbmTrainConfig, accumulate_stats, train_ubm

log = logging.getLogger(__name__)

SYSTEMS = ("ivec", "dcnn", "early", "late")


@dataclass(frozen=True)
class RunConfig:
    mfcc: DspConfig = field(default_factory=DspConfig.for_mfcc)
    mel: DspConfig = field(default_factory=DspConfig.for_mel)
    ubm: UbmTrainConfig = field(default_factory=UbmTrainConfig)
    tv_rank: int = 64
    tv_iters: int = 10
    net: deepnet.NetConfig = field(default_factory=deepnet.NetConfig)
    # train the convnet on this many tracks per training artist (None: all)
    dcnn_tracks_per_artist: int | None = None
    late_znorm: bool = False
    counts: tuple = ()
    systems: tuple = ("ivec", "dcnn", "early", "late")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, ubm=replace(self.ubm, seed=seed), net=replace(self.net, seed=seed))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Build from nested plain values, e.g. a parsed JSON config file."""
        nested = {"mfcc": DspConfig, "mel": DspConfig, "ubm": UbmTrainConfig,
                  "net": deepnet.NetConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kwargs = {}
        for key, value in d.items():
            if key in nested:
                try:
                    kwargs[key] = replace(getattr(base, key), **value)
                except TypeError as exc:
                    raise ConfigurationError(f"bad '{key}' section: {exc}") from exc
            elif key in ("counts", "systems"):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return replace(base, **kwargs)


class FeatureCache:
    def __init__(self, manifest: CorpusManifest, config: RunConfig):
        self.manifest = manifest
        self.config = config
        self._mfcc = {}
        self._mel = {}

    def mfcc(self, track: Track) -> FeatureSequence:
        if track.track_id not in self._mfcc:
            raw = track_mfcc(self.manifest, track, self.config.mfcc)
            self._mfcc[track.track_id] = cmvn(raw)
        return self._mfcc[track.track_id]

    def mel(self, track: Track) -> np.ndarray:
        if track.track_id not in self._mel:
            self._mel[track.track_id] = track_mel(self.manifest, track, self.config.mel)
        return self._mel[track.track_id]


@dataclass
class IvectorBranch:
    ubm: DiagGmm
    tv: TotalVariabilityModel
    plda: backend.PldaModel | None = None


@dataclass
class DeepBranch:
    net: deepnet.ConvNet
    history: deepnet.TrainHistory | None = None
    plda: backend.PldaModel | None = None


def tracks_of(artists, splits=("train", "enroll", "test")) -> list[tuple[str, Track]]:
    return [(a.artist_id, t) for a in artists for t in a.tracks if t.split in splits]


def fit_ubm(cache: FeatureCache, artists, config: RunConfig) -> DiagGmm:
    frames = [cache.mfcc(t) for _, t in tracks_of(artists)]
    return train_ubm(frames, config.ubm)


def fit_tv(cache: FeatureCache, artists, ubm: DiagGmm, config: RunConfig) -> TotalVariabilityModel:
    stats = [accumulate_stats(ubm, cache.mfcc(t)) for _, t in tracks_of(artists)]
    return train_tv(ubm, stats, config.tv_rank, config.tv_iters, config.ubm.seed)


def ivectors(cache: FeatureCache, ubm, tv, pairs) -> list[EmbeddingVector]:
    stats = [accumulate_stats(ubm, cache.mfcc(t)) for _, t in pairs]
    return extract_ivectors(tv, ubm, stats)


def train_ivector_branch(cache: FeatureCache, artists, config: RunConfig) -> IvectorBranch:
    ubm = fit_ubm(cache, artists, config)
    log.info("ubm trained: %d components, final mean llh %.4f",
             ubm.n_components, ubm.llh_history[-1])
    tv = fit_tv(cache, artists, ubm, config)
    log.info("total-variability matrix trained: rank %d", tv.rank)
    pairs = tracks_of(artists)
    vecs = ivectors(cache, ubm, tv, pairs)
    plda = backend.train_plda(vecs, [aid for aid, _ in pairs])
    return IvectorBranch(ubm, tv, plda)


def training_segments(cache: FeatureCache, artists, config: RunConfig):
    """3 s segments with artist labels (index into ``artists``)."""
    length = config.net.input_shape[1]
    _, hop = deepnet.segment_frames(config.mel)
    X, y = [], []
    for label, artist in enumerate(artists):
        tracks = [t for t in artist.tracks if t.split == "train"]
        if config.dcnn_tracks_per_artist is not None:
            tracks = tracks[:config.dcnn_tracks_per_artist]
        for t in tracks:
            values = cache.mel(t)
            if values.shape[1] < length:
                values = np.pad(values, ((0, 0), (0, length - values.shape[1])),
                                constant_values=values.min())
            segs = deepnet.split_segments(values, length, hop)
            X.append(segs)
            y.extend([label] * len(segs))
    return np.concatenate(X), np.array(y)


def deep_vectors(cache: FeatureCache, net: deepnet.ConvNet, pairs, config: RunConfig):
    _, hop = deepnet.segment_frames(config.mel)
    return [deepnet.embed_mel(net, cache.mel(t), hop, t.track_id) for _, t in pairs]


def train_deep_branch(cache: FeatureCache, artists, config: RunConfig, progress=None) -> DeepBranch:
    X, y = training_segments(cache, artists, config)
    net = deepnet.build_network(len(artists), config.net, config.net.seed)
    net, history = deepnet.train_network(net, X, y, config.net, progress=progress)
    log.info("dcnn trained: final loss %.4f, accuracy %.3f",
             history.loss[-1] if history.loss else float("nan"),
             history.accuracy[-1] if history.accuracy else float("nan"))
    pairs = tracks_of(artists)
    vecs = deep_vectors(cache, net, pairs, config)
    plda = backend.train_plda(vecs, [aid for aid, _ in pairs])
    return DeepBranch(net, history, plda)


def fuse_all(ivecs, deeps) -> list[EmbeddingVector]:
    return [backend.early_fuse(a, b) for a, b in zip(ivecs, deeps)]
