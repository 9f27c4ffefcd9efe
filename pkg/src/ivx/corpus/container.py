"""Binary model container (``.ivxm``).

Layout::

    magic "IVXM" | version u16 | kind u16 | payload length u64   (16 bytes, LE)
    payload = metadata JSON (one line, sorted keys) + b"\\n"
              + float64 LE arrays in the order listed in the metadata

Every model round-trips bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..backend import ArtistModel, PldaModel
from ..deepnet import ConvNet, NetConfig
from ..errors import CorruptionError, IvxError, UnsupportedVersionError
from ..tvspace import EmbeddingVector, TotalVariabilityModel
from ..ubm import DiagGmm

MAGIC = b"IVXM"
VERSION = 1
HEADER = struct.Struct("<4sHHQ")

KIND_GMM, KIND_TV, KIND_CONVNET, KIND_PLDA, KIND_ARTISTS, KIND_EMBEDDINGS = range(1, 7)
KIND_NAMES = {KIND_GMM: "gmm", KIND_TV: "tv", KIND_CONVNET: "convnet",
              KIND_PLDA: "plda", KIND_ARTISTS: "artists", KIND_EMBEDDINGS: "embeddings"}


@dataclasses.dataclass(eq=False)
class EmbeddingSet:
    """Labelled embeddings (one per track), as written by the extract stage."""

    vectors: list
    labels: list


def _encode(model):
    if isinstance(model, DiagGmm):
        arrays = {"weights": model.weights, "means": model.means, "variances": model.variances,
                  "var_floor": model.var_floor, "llh_history": np.array(model.llh_history, float)}
        return KIND_GMM, {"n_resets": model.n_resets}, arrays
    if isinstance(model, TotalVariabilityModel):
        arrays = {"T": model.T, "objective_history": np.array(model.objective_history, float)}
        return KIND_TV, {"ubm_ref": model.ubm_ref}, arrays
    if isinstance(model, ConvNet):
        meta = {"n_classes": model.n_classes, "config": dataclasses.asdict(model.config)}
        return KIND_CONVNET, meta, dict(model.params)
    if isinstance(model, PldaModel):
        arrays = {"mean": model.mean, "whitener": model.whitener, "B": model.B, "W": model.W}
        return KIND_PLDA, {"kind": model.kind}, arrays
    if isinstance(model, EmbeddingSet):
        meta = {"entries": [[v.track_id, v.kind, str(label)]
                            for v, label in zip(model.vectors, model.labels)]}
        values = np.stack([v.values for v in model.vectors]) if model.vectors else np.zeros((0, 0))
        return KIND_EMBEDDINGS, meta, {"values": values}
    models = list(model)
    if all(isinstance(m, ArtistModel) for m in models):
        meta = {"entries": [[m.artist_id, m.n_enrolled, m.vector.kind, m.vector.track_id]
                            for m in models]}
        values = np.stack([m.vector.values for m in models]) if models else np.zeros((0, 0))
        return KIND_ARTISTS, meta, {"values": values}
    raise TypeError(f"cannot persist {type(model).__name__}")


def _decode(kind: int, meta: dict, arrays: dict):
    if kind == KIND_GMM:
        return DiagGmm(arrays["weights"], arrays["means"], arrays["variances"],
                       arrays["var_floor"], tuple(arrays["llh_history"].tolist()),
                       int(meta["n_resets"]))
    if kind == KIND_TV:
        return TotalVariabilityModel(arrays["T"], meta["ubm_ref"],
                                     tuple(arrays["objective_history"].tolist()))
    if kind == KIND_CONVNET:
        return ConvNet(arrays, int(meta["n_classes"]), NetConfig(**meta["config"]))
    if kind == KIND_PLDA:
        return PldaModel(arrays["mean"], arrays["whitener"], arrays["B"], arrays["W"], meta["kind"])
    if kind == KIND_ARTISTS:
        values = arrays["values"]
        if values.shape[0] != len(meta["entries"]):
            raise CorruptionError("artist count does not match stored vectors")
        return [ArtistModel(aid, EmbeddingVector(row, k, tid), int(n))
                for (aid, n, k, tid), row in zip(meta["entries"], values)]
    if kind == KIND_EMBEDDINGS:
        values = arrays["values"]
        if values.shape[0] != len(meta["entries"]):
            raise CorruptionError("entry count does not match stored vectors")
        vectors = [EmbeddingVector(row, k, tid) for (tid, k, _), row in zip(meta["entries"], values)]
        return EmbeddingSet(vectors, [label for _, _, label in meta["entries"]])
    raise CorruptionError(f"unknown model kind {kind}")


def dumps_model(model) -> bytes:
    kind, meta, arrays = _encode(model)
    meta = dict(meta, arrays=[[name, list(np.shape(a))] for name, a in arrays.items()])
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    blob += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return HEADER.pack(MAGIC, VERSION, kind, len(blob)) + blob


def loads_model(data: bytes, expect: int | None = None):
    if len(data) < HEADER.size:
        raise CorruptionError("file shorter than the container header")
    magic, version, kind, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptionError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} is not supported "
                                      f"(this build reads version {VERSION})")
    payload = data[HEADER.size:]
    if len(payload) != length:
        raise CorruptionError(f"payload is {len(payload)} bytes, header declares {length}")
    if expect is not None and kind != expect:
        raise CorruptionError(f"expected a {KIND_NAMES.get(expect)} model, "
                              f"found {KIND_NAMES.get(kind, kind)}")
    newline = payload.find(b"\n")
    if newline < 0:
        raise CorruptionError("metadata block is not terminated")
    try:
        meta = json.loads(payload[:newline])
        specs = meta.pop("arrays")
    except (ValueError, KeyError) as exc:
        raise CorruptionError(f"unreadable metadata: {exc}") from exc
    arrays = {}
    pos = newline + 1
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(payload):
            raise CorruptionError(f"array {name!r} truncated")
        arrays[name] = np.frombuffer(payload[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(payload):
        raise CorruptionError("trailing bytes after the declared arrays")
    try:
        return _decode(kind, meta, arrays)
    except CorruptionError:
        raise
    except (IvxError, KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"inconsistent {KIND_NAMES.get(kind, kind)} model: {exc}") from exc


def save_model(path, model) -> None:
    """Write atomically: a failed save never leaves a partial file behind."""
    data = dumps_model(model)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path, expect: int | None = None):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    return loads_model(path.read_bytes(), expect)
