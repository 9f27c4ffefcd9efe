"""Frame-level audio features: log-mel spectrograms and MFCCs.

Two geometries are used by the engine.  The convnet branch consumes
128-band log-mel spectrograms with a 375-sample hop, which turns a
3 second clip at 16 kHz into a square 128 x 128 image.  The i-vector
branch consumes 20 MFCCs on 25 ms / 10 ms frames.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.fft

from .errors import ConfigurationError, EmptyInputError, InsufficientDataError

SAMPLE_RATE = 16000


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise EmptyInputError(f"clip {self.id!r} has no samples")
        if not np.all(np.isfinite(samples)):
            raise ConfigurationError(f"clip {self.id!r} has non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise ConfigurationError(
                f"sample rate {self.sample_rate} not supported (expected {SAMPLE_RATE})")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class DspConfig:
    frame_len: int = 1024
    hop: int = 375
    n_fft: int = 1024
    n_mels: int = 128
    n_mfcc: int = 20
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_len <= self.n_fft:
            raise ConfigurationError(
                f"need 0 < hop <= frame_len <= n_fft, got {self.hop}, {self.frame_len}, {self.n_fft}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigurationError(f"bad frequency range [{self.fmin}, {self.fmax}]")
        if self.n_mels < 1 or not 1 <= self.n_mfcc <= self.n_mels:
            raise ConfigurationError(f"need 1 <= n_mfcc <= n_mels, got {self.n_mfcc}, {self.n_mels}")
        if not self.log_floor > 0:
            raise ConfigurationError("log_floor must be positive")

    @classmethod
    def for_mfcc(cls, **overrides) -> "DspConfig":
        """25 ms frames, 10 ms hop, 40 mel bands feeding 20 cepstra."""
        base = cls(frame_len=400, hop=160, n_fft=512, n_mels=40, n_mfcc=20)
        return replace(base, **overrides)

    @classmethod
    def for_mel(cls, **overrides) -> "DspConfig":
        return replace(cls(), **overrides)


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    values: np.ndarray  # n_mels x n_frames, natural-log power
    clip_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    frames: np.ndarray  # n_frames x dim
    clip_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise EmptyInputError(f"feature sequence {self.clip_id!r} has no frames")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(config: DspConfig) -> np.ndarray:
    """Center frequencies (Hz) of the mel bands, excluding the two edges."""
    mels = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(config: DspConfig) -> np.ndarray:
    """Triangular filters on the power-spectrum bins, shape (n_mels, n_fft//2 + 1).

    Filters have unit peak at their center frequency and reach zero at the
    neighbouring centers.  Narrow low-frequency filters can fall between
    FFT bins and come out all-zero; their bands then sit at the log floor.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax),
                                  config.n_mels + 2))
    bin_freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT choice
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, hop: int) -> int:
    return n_samples // hop


def power_spectrogram(samples: np.ndarray, config: DspConfig) -> np.ndarray:
    """Center-padded, Hann-windowed power spectra, shape (n_frames, n_fft//2 + 1)."""
    samples = np.asarray(samples, dtype=np.float64)
    n_frames = frame_count(samples.size, config.hop)
    if n_frames < 1:
        raise EmptyInputError(
            f"clip of {samples.size} samples is shorter than one hop ({config.hop})")
    pad = config.n_fft // 2
    mode = "reflect" if samples.size > 1 else "edge"
    padded = np.pad(samples, pad, mode=mode)
    window = np.zeros(config.n_fft)
    offset = (config.n_fft - config.frame_len) // 2
    window[offset:offset + config.frame_len] = hann(config.frame_len)
    starts = np.arange(n_frames) * config.hop
    frames = padded[starts[:, None] + np.arange(config.n_fft)[None, :]] * window
    spectrum = np.fft.rfft(frames, n=config.n_fft, axis=1)
    return spectrum.real ** 2 + spectrum.imag ** 2


def _log_mel(samples: np.ndarray, config: DspConfig) -> np.ndarray:
    power = power_spectrogram(samples, config)
    mel_power = power @ mel_filterbank(config).T
    return np.log(np.maximum(mel_power, config.log_floor))


def log_mel_spectrogram(clip: AudioClip, config: DspConfig | None = None) -> MelSpectrogram:
    config = config or DspConfig()
    return MelSpectrogram(_log_mel(clip.samples, config).T.copy(), clip.id)


def mfcc(clip: AudioClip, config: DspConfig | None = None) -> FeatureSequence:
    """Static MFCCs (coefficient 0 included) via an orthonormal DCT-II."""
    config = config or DspConfig.for_mfcc()
    log_mel = _log_mel(clip.samples, config)
    cepstra = scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, :config.n_mfcc]
    return FeatureSequence(cepstra, clip.id)


def cmvn(seq: FeatureSequence) -> FeatureSequence:
    """Per-track mean and variance normalization.

    Dimensions whose population variance is below 1e-12 are only centered.
    """
    if seq.n_frames < 2:
        raise InsufficientDataError(f"cmvn needs at least 2 frames, got {seq.n_frames}")
    frames = seq.frames
    mean = frames.mean(axis=0)
    var = frames.var(axis=0)
    scale = np.sqrt(np.where(var < 1e-12, 1.0, var))
    return FeatureSequence((frames - mean) / scale, seq.clip_id)
