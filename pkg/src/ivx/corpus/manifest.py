"""Corpus manifests and the 15 enroll / 5 test evaluation protocol."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dsp import AudioClip, DspConfig, FeatureSequence, mfcc, log_mel_spectrogram
from ..errors import ConfigurationError, ProtocolError
from .wav import load_wav

TRACKS_PER_EVAL_ARTIST = 20
N_ENROLL = 15
N_TEST = 5
SPLITS = ("train", "enroll", "test")
ROLES = ("train", "eval")
MODES = ("audio", "feature")


@dataclass
class Track:
    track_id: str
    split: str = "train"
    path: str | None = None  # audio mode: WAV file relative to the manifest
    features: dict | None = None  # feature mode: {"mfcc": npy, "mel": npy}
    latent: list | None = None


@dataclass
class Artist:
    artist_id: str
    role: str
    is_vocal: bool = False
    tracks: list = field(default_factory=list)
    latent: list | None = None


@dataclass
class CorpusManifest:
    artists: list
    seed: int = 0
    mode: str = "feature"
    spec: dict = field(default_factory=dict)
    root: Path | None = None
    # in-memory track data for corpora generated without an output directory
    store: dict | None = field(default=None, repr=False)

    def by_role(self, role: str) -> list:
        return [a for a in self.artists if a.role == role]

    @property
    def train_artists(self) -> list:
        return self.by_role("train")

    @property
    def eval_artists(self) -> list:
        return self.by_role("eval")

    def artist(self, artist_id: str) -> Artist:
        for a in self.artists:
            if a.artist_id == artist_id:
                return a
        raise KeyError(artist_id)

    def to_dict(self) -> dict:
        def track(t: Track) -> dict:
            d = {"track_id": t.track_id, "split": t.split}
            for key in ("path", "features", "latent"):
                if getattr(t, key) is not None:
                    d[key] = getattr(t, key)
            return d

        artists = []
        for a in self.artists:
            d = {"artist_id": a.artist_id, "role": a.role, "is_vocal": a.is_vocal,
                 "tracks": [track(t) for t in a.tracks]}
            if a.latent is not None:
                d["latent"] = a.latent
            artists.append(d)
        return {"seed": self.seed, "mode": self.mode, "spec": self.spec, "artists": artists}

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "CorpusManifest":
        try:
            artists = [Artist(a["artist_id"], a["role"], bool(a.get("is_vocal", False)),
                              [Track(t["track_id"], t.get("split", "train"), t.get("path"),
                                     t.get("features"), t.get("latent"))
                               for t in a["tracks"]], a.get("latent"))
                       for a in d["artists"]]
            return cls(artists, int(d.get("seed", 0)), d.get("mode", "feature"),
                       d.get("spec", {}), Path(root) if root is not None else None)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed manifest: {exc}") from exc


def dumps_manifest(manifest: CorpusManifest) -> str:
    return json.dumps(manifest.to_dict(), sort_keys=True, indent=1) + "\n"


def save_manifest(manifest: CorpusManifest, path) -> None:
    Path(path).write_text(dumps_manifest(manifest))


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = CorpusManifest.from_dict(json.loads(path.read_text()), root=path.parent)
    validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: CorpusManifest) -> CorpusManifest:
    if manifest.mode not in MODES:
        raise ConfigurationError(f"unknown corpus mode {manifest.mode!r}")
    roles = {}
    track_ids = set()
    for a in manifest.artists:
        if a.role not in ROLES:
            raise ProtocolError(f"artist {a.artist_id}: unknown role {a.role!r}")
        if a.artist_id in roles:
            if roles[a.artist_id] != a.role:
                raise ProtocolError(f"artist {a.artist_id} appears in both train and eval sets")
            raise ProtocolError(f"artist {a.artist_id} listed twice")
        roles[a.artist_id] = a.role
        for t in a.tracks:
            if t.track_id in track_ids:
                raise ProtocolError(f"track {t.track_id} listed twice")
            track_ids.add(t.track_id)
            if t.split not in SPLITS:
                raise ProtocolError(f"track {t.track_id}: unknown split {t.split!r}")
        splits = [t.split for t in a.tracks]
        if a.role == "train":
            if any(s != "train" for s in splits):
                raise ProtocolError(f"train artist {a.artist_id} has enroll/test tracks")
        else:
            n_enroll, n_test = splits.count("enroll"), splits.count("test")
            if len(splits) != TRACKS_PER_EVAL_ARTIST or n_enroll != N_ENROLL or n_test != N_TEST:
                raise ProtocolError(
                    f"eval artist {a.artist_id} has {len(splits)} tracks "
                    f"({n_enroll} enroll / {n_test} test), expected "
                    f"{TRACKS_PER_EVAL_ARTIST} ({N_ENROLL} / {N_TEST})")
    return manifest


def _artist_rng(seed: int, artist_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(artist_id.encode())])


def split_corpus(manifest: CorpusManifest, seed: int | None = None) -> CorpusManifest:
    """Assign splits: seeded 15 enroll / 5 test per eval artist, train otherwise.

    Eval artists with more than 20 tracks keep the first 20 after shuffling.
    Returns a new manifest; the input is not modified.
    """
    seed = manifest.seed if seed is None else seed
    artists = []
    for a in manifest.artists:
        tracks = sorted(a.tracks, key=lambda t: t.track_id)
        if a.role == "eval":
            if len(tracks) < TRACKS_PER_EVAL_ARTIST:
                raise ProtocolError(
                    f"eval artist {a.artist_id} has {len(tracks)} tracks, "
                    f"needs {TRACKS_PER_EVAL_ARTIST}")
            order = _artist_rng(seed, a.artist_id).permutation(len(tracks))
            chosen = [tracks[i] for i in order[:TRACKS_PER_EVAL_ARTIST]]
            new_tracks = [Track(t.track_id, "enroll" if k < N_ENROLL else "test",
                                t.path, t.features, t.latent) for k, t in enumerate(chosen)]
            new_tracks.sort(key=lambda t: t.track_id)
        else:
            new_tracks = [Track(t.track_id, "train", t.path, t.features, t.latent) for t in tracks]
        artists.append(Artist(a.artist_id, a.role, a.is_vocal, new_tracks, a.latent))
    out = CorpusManifest(artists, seed, manifest.mode, manifest.spec, manifest.root, manifest.store)
    return validate_manifest(out)


# -- track data access ---------------------------------------------------------

def _resolve(manifest: CorpusManifest, rel: str) -> Path:
    root = manifest.root or Path(".")
    return root / rel


def track_audio(manifest: CorpusManifest, track: Track) -> AudioClip:
    if manifest.mode != "audio":
        raise ConfigurationError("feature-mode corpora carry no audio")
    if manifest.store is not None and track.track_id in manifest.store:
        return manifest.store[track.track_id]
    if track.path is None:
        raise ConfigurationError(f"track {track.track_id} has no audio path")
    clip = load_wav(_resolve(manifest, track.path))
    return AudioClip(clip.samples, clip.sample_rate, track.track_id)


def _feature_array(manifest: CorpusManifest, track: Track, key: str) -> np.ndarray:
    if manifest.store is not None and track.track_id in manifest.store:
        return manifest.store[track.track_id][key]
    if not track.features or key not in track.features:
        raise ConfigurationError(f"track {track.track_id} has no {key} features")
    return np.load(_resolve(manifest, track.features[key]))


def track_mfcc(manifest: CorpusManifest, track: Track,
               dsp: DspConfig | None = None) -> FeatureSequence:
    """Raw (un-normalized) cepstral frames of a track."""
    if manifest.mode == "feature":
        return FeatureSequence(_feature_array(manifest, track, "mfcc"), track.track_id)
    return mfcc(track_audio(manifest, track), dsp or DspConfig.for_mfcc())


def track_mel(manifest: CorpusManifest, track: Track, dsp: DspConfig | None = None) -> np.ndarray:
    """Log-mel matrix (n_mels x n_frames) of a track."""
    if manifest.mode == "feature":
        return _feature_array(manifest, track, "mel")
    return log_mel_spectrogram(track_audio(manifest, track), dsp or DspConfig()).values
