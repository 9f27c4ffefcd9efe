"""Data plane: synthetic corpora, WAV I/O, protocol splits and model persistence."""

from .container import (EmbeddingSet, dumps_model, load_model, loads_model,
                        save_model)
from .manifest import (Artist, CorpusManifest, Track, dumps_manifest,
                       load_manifest, save_manifest, split_corpus, track_audio,
                       track_mel, track_mfcc, validate_manifest)
from .synth import SynthSpec, generate_corpus
from .wav import load_wav, write_wav

__all__ = [
    "Artist", "CorpusManifest", "EmbeddingSet", "SynthSpec", "Track",
    "dumps_manifest", "dumps_model", "generate_corpus", "load_manifest",
    "load_model", "load_wav", "loads_model", "save_manifest", "save_model",
    "split_corpus", "track_audio", "track_mel", "track_mfcc",
    "validate_manifest", "write_wav",
]
