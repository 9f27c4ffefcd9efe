"""Synthetic artist corpora standing in for real song collections.

Each artist owns a latent identity vector; every track perturbs it.  The
latent drives two views of a track:

* cepstral frames drawn from a diagonal GMM whose component means shift
  linearly with the latent (the structure the total-variability model
  assumes), and
* a log-mel "image" made of a smooth spectral envelope plus spectro-temporal
  ripples whose amplitudes depend on the latent, i.e. texture a convnet
  with global pooling can pick up.

In audio mode the latent instead shapes the spectral envelope and pitch
range of harmonic tones, rendered to 16 kHz PCM and fed through the real
DSP chain.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..dsp import SAMPLE_RATE, AudioClip, DspConfig, hz_to_mel
from ..errors import ConfigurationError
from .manifest import Artist, CorpusManifest, Track, save_manifest, split_corpus
from .wav import quantize, write_wav

MFCC_RATE = 100  # cepstral frames per second (10 ms hop)
N_MELS = 128
ROLE_CODE = {"train": 1, "eval": 2}


@dataclass(frozen=True)
class SynthSpec:
    n_train_artists: int = 100
    n_eval_artists: int = 20
    tracks_per_artist: int = 20
    track_seconds: float = 12.0
    within_artist_spread: float = 0.1
    between_artist_spread: float = 1.0
    vocal_fraction: float = 0.3
    mode: str = "feature"
    latent_dim: int = 8
    n_mfcc: int = 20
    n_true_components: int = 16

    def __post_init__(self):
        if self.within_artist_spread <= 0 or self.between_artist_spread <= 0:
            raise ConfigurationError("spreads must be positive")
        if self.between_artist_spread <= self.within_artist_spread:
            raise ConfigurationError("between-artist spread must exceed within-artist spread")
        if not 0.0 <= self.vocal_fraction <= 1.0:
            raise ConfigurationError("vocal_fraction must lie in [0, 1]")
        if self.mode not in ("audio", "feature"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.n_train_artists < 0 or self.n_eval_artists < 0 or self.tracks_per_artist < 1:
            raise ConfigurationError("artist and track counts must be positive")
        if self.track_seconds < 3.0:
            raise ConfigurationError("tracks must last at least 3 seconds")

    @property
    def ratio(self) -> float:
        return self.between_artist_spread / self.within_artist_spread


class _World:
    """Parameters shared by all artists of one corpus."""

    def __init__(self, spec: SynthSpec, seed: int):
        rng = np.random.default_rng([seed, 0])
        L, d, K = spec.latent_dim, spec.n_mfcc, spec.n_true_components
        self.weights = rng.dirichlet(np.full(K, 5.0))
        self.means = 3.0 * rng.standard_normal((K, d))
        self.variances = rng.uniform(0.5, 1.5, size=(K, d))
        shared = rng.standard_normal((d, L)) / np.sqrt(L)
        self.loadings = shared[None] + rng.standard_normal((K, d, L)) / np.sqrt(L)
        self.vocal_shift = rng.standard_normal((K, d)) * 0.5
        # mel ripples: one (frequency, time) wave-number pair per latent dim
        self.ripples = [(4 + 3 * j, (j % 4) * 2 + (j // 4)) for j in range(L)]
        self.envelope = rng.standard_normal((4, L)) * 0.5
        self.vocal_ripple = (29, 5)
        # audio mode: cepstral-like envelope in the mel domain
        self.audio_env = rng.standard_normal((L, L)) / np.sqrt(L)


def _mfcc_frames(world: _World, z: np.ndarray, vocal: bool, n: int, rng) -> np.ndarray:
    comp = rng.choice(len(world.weights), size=n, p=world.weights)
    means = world.means + world.loadings @ z
    if vocal:
        means = means + world.vocal_shift
    noise = rng.standard_normal((n, means.shape[1])) * np.sqrt(world.variances[comp])
    return means[comp] + noise


def _mel_image(world: _World, z: np.ndarray, vocal: bool, n_frames: int, rng) -> np.ndarray:
    f = np.arange(N_MELS)[:, None] / N_MELS
    t = np.arange(n_frames)[None, :] / N_MELS
    coeffs = world.envelope @ z
    env = sum(c * np.cos(np.pi * (m + 1) * f) for m, c in enumerate(coeffs))
    image = -6.0 + env + 0.3 * rng.standard_normal((N_MELS, n_frames))
    amps = np.exp(0.5 * z)
    ripples = list(zip(world.ripples, amps))
    if vocal:
        ripples.append((world.vocal_ripple, 1.5))
    for (nu, tau), amp in ripples:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        image = image + amp * np.cos(2.0 * np.pi * (nu * f + tau * t) + phase)
    return image


def _audio(world: _World, z: np.ndarray, vocal: bool, seconds: float, rng) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    out = np.zeros(n)
    env_coef = world.audio_env @ z
    max_mel = hz_to_mel(SAMPLE_RATE / 2)
    base_f0 = 110.0 * 2.0 ** (0.5 * np.tanh(z[0]))
    note_len = SAMPLE_RATE // 4
    t_note = np.arange(note_len) / SAMPLE_RATE
    fade = np.minimum(1.0, np.minimum(t_note, t_note[::-1]) / 0.01)
    for start in range(0, n, note_len):
        f0 = base_f0 * 2.0 ** (rng.integers(0, 12) / 12.0)
        if vocal:
            inst = f0 * (1.0 + 0.01 * np.sin(2 * np.pi * 5.5 * t_note))
            phase = 2 * np.pi * np.cumsum(inst) / SAMPLE_RATE
        else:
            phase = 2 * np.pi * f0 * t_note
        harmonics = np.arange(1, int(7600 // (f0 * 1.02)) + 1)
        m = hz_to_mel(harmonics * f0) / max_mel
        log_amp = sum(c * np.cos(np.pi * (k + 1) * m) for k, c in enumerate(env_coef))
        if vocal:
            log_amp = log_amp + 1.5 * np.exp(-((harmonics * f0 - 2800.0) / 400.0) ** 2)
        amps = np.exp(log_amp) / harmonics
        tone = (amps[:, None] * np.sin(harmonics[:, None] * phase[None, :]
                                      + rng.uniform(0, 2 * np.pi, size=(len(harmonics), 1)))).sum(0)
        seg = out[start:start + note_len]
        seg += (tone * fade)[:seg.size]
    out += 0.01 * np.std(out) * rng.standard_normal(n)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.8 / peak
    return quantize(out).astype(np.float64) / 32768.0


def generate_corpus(spec: SynthSpec, seed: int = 0, out_dir=None) -> CorpusManifest:
    """Generate a corpus, split it 15/5 for evaluation artists, and return the manifest.

    Without ``out_dir`` the track data stays in memory (``manifest.store``);
    with it, data is written under ``out_dir`` next to ``manifest.json``.
    """
    world = _World(spec, seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "data").mkdir(parents=True, exist_ok=True)
    store = {} if out is None else None
    n_mel_frames = int(round(spec.track_seconds * SAMPLE_RATE / DspConfig().hop))
    n_frames = int(round(spec.track_seconds * MFCC_RATE))
    artists = []
    for role, count in (("train", spec.n_train_artists), ("eval", spec.n_eval_artists)):
        for i in range(count):
            artist_id = f"{'tr' if role == 'train' else 'ev'}{i:04d}"
            rng = np.random.default_rng([seed, ROLE_CODE[role], i])
            z_artist = spec.between_artist_spread * rng.standard_normal(spec.latent_dim)
            vocal = bool(rng.random() < spec.vocal_fraction)
            tracks = []
            for k in range(spec.tracks_per_artist):
                track_id = f"{artist_id}_t{k:02d}"
                z = z_artist + spec.within_artist_spread * rng.standard_normal(spec.latent_dim)
                track = Track(track_id, latent=z.tolist())
                if spec.mode == "feature":
                    data = {"mfcc": _mfcc_frames(world, z, vocal, n_frames, rng),
                            "mel": _mel_image(world, z, vocal, n_mel_frames, rng)}
                    if out is None:
                        store[track_id] = data
                    else:
                        track.features = {}
                        for key, arr in data.items():
                            rel = f"data/{track_id}.{key}.npy"
                            np.save(out / rel, arr)
                            track.features[key] = rel
                else:
                    samples = _audio(world, z, vocal, spec.track_seconds, rng)
                    clip = AudioClip(samples, SAMPLE_RATE, track_id)
                    if out is None:
                        store[track_id] = clip
                    else:
                        track.path = f"data/{track_id}.wav"
                        write_wav(out / track.path, clip)
                tracks.append(track)
            artists.append(Artist(artist_id, role, vocal, tracks, z_artist.tolist()))
    manifest = CorpusManifest(artists, seed, spec.mode, asdict(spec), out, store)
    manifest = split_corpus(manifest, seed)
    if out is not None:
        save_manifest(manifest, out / "manifest.json")
    return manifest
