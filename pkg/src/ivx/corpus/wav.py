"""Minimal RIFF/WAVE reader and writer: PCM 16-bit little-endian, mono, 16 kHz."""

from __future__ import annotations

import os
import struct

import numpy as np

from ..dsp import SAMPLE_RATE, AudioClip
from ..errors import FormatError


def _chunks(data: bytes, path):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def load_wav(path) -> AudioClip:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file (header)")
    fmt = None
    pcm = None
    for cid, body in _chunks(data, path):
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            pcm = body
    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if pcm is None:
        raise FormatError(f"{path}: missing data chunk")
    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format != 1:
        raise FormatError(f"{path}: audio_format {audio_format} is not PCM")
    if channels != 1:
        raise FormatError(f"{path}: channel count {channels}, expected mono")
    if bits != 16:
        raise FormatError(f"{path}: bit depth {bits}, expected 16")
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if block_align != 2 or len(pcm) % 2:
        raise FormatError(f"{path}: block alignment inconsistent with 16-bit mono")
    samples = np.frombuffer(pcm, dtype="<i2").astype(np.float64) / 32768.0
    clip_id = os.path.splitext(os.path.basename(str(path)))[0]
    return AudioClip(samples, SAMPLE_RATE, clip_id)


def quantize(samples) -> np.ndarray:
    """Samples in [-1, 1] to int16 (scale 32768, clipped)."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(path, clip: AudioClip) -> None:
    pcm = quantize(clip.samples).tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(pcm), b"WAVE",
                         b"fmt ", 16, 1, 1, SAMPLE_RATE, SAMPLE_RATE * 2, 2, 16,
                         b"data", len(pcm))
    with open(path, "wb") as fh:
        fh.write(header + pcm)
