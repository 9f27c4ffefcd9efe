"""Convolutional artist classifier used as a deep-feature extractor.

Architecture: five blocks of (3x3 same-padded conv -> ReLU -> 2x2 max-pool),
global average pooling, one fully-connected ReLU layer of width 256 (the
deep audio feature), and a linear output layer.  Everything is numpy in
float64 with hand-written backpropagation.

Activations are kept channels-last (batch, height, width, channels) so each
convolution is one im2col matmul.  Kernels are stored as (3, 3, in, out).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dsp import AudioClip, DspConfig, MelSpectrogram, log_mel_spectrogram
from .errors import (ConfigurationError, DataError, EmptyInputError,
                     NumericalError, ShapeError)
from .tvspace import EmbeddingVector, length_normalize

log = logging.getLogger(__name__)

N_CONV = 5
HIDDEN = 256
SEGMENT_SECONDS = 3.0
SEGMENT_HOP_SECONDS = 1.5


@dataclass(frozen=True)
class NetConfig:
    input_shape: tuple = (128, 128)
    channels: tuple = (16, 32, 64, 128, 256)
    kernel: int = 3
    pool: int = 2
    learning_rate: float = 0.002
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if len(self.channels) != N_CONV or min(self.channels) < 1:
            raise ConfigurationError(f"need {N_CONV} positive channel counts, got {self.channels}")
        if self.kernel != 3 or self.pool != 2:
            raise ConfigurationError("only 3x3 kernels and 2x2 pooling are implemented")
        step = self.pool ** N_CONV
        if len(self.input_shape) != 2 or any(s % step or s < step for s in self.input_shape):
            raise ConfigurationError(f"input dims {self.input_shape} must be multiples of {step}")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigurationError("bad optimizer settings")


@dataclass(eq=False)
class ConvNet:
    params: dict
    n_classes: int
    config: NetConfig = field(default_factory=NetConfig)

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "ConvNet":
        return ConvNet({k: v.copy() for k, v in self.params.items()}, self.n_classes, self.config)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def param_layout(n_classes: int, config: NetConfig) -> list[tuple[str, tuple]]:
    shapes = []
    c_in = 1
    for i, c_out in enumerate(config.channels, start=1):
        shapes.append((f"conv{i}.w", (3, 3, c_in, c_out)))
        shapes.append((f"conv{i}.b", (c_out,)))
        c_in = c_out
    shapes += [("fc.w", (c_in, HIDDEN)), ("fc.b", (HIDDEN,)),
               ("out.w", (HIDDEN, n_classes)), ("out.b", (n_classes,))]
    return shapes


def build_network(n_classes: int, config: NetConfig | None = None, seed: int = 0) -> ConvNet:
    config = config or NetConfig()
    if n_classes < 2:
        raise ConfigurationError("need at least two classes")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_layout(n_classes, config):
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return ConvNet(params, n_classes, config)


# -- layers ------------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, 9*C) patches ordered (row, col, channel)."""
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(B * H * W, 9 * C)


def _conv_input_grad(dz: np.ndarray, w: np.ndarray) -> np.ndarray:
    # full correlation of dz with the spatially flipped, transposed kernel
    flipped = w[::-1, ::-1].transpose(0, 1, 3, 2)
    B, H, W, _ = dz.shape
    return (_im2col(dz) @ flipped.reshape(-1, flipped.shape[-1])).reshape(B, H, W, -1)


def _maxpool(z: np.ndarray):
    """2x2 max-pool; ``idx`` records which quadrant won (first wins ties)."""
    q = (z[:, 0::2, 0::2], z[:, 0::2, 1::2], z[:, 1::2, 0::2], z[:, 1::2, 1::2])
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    idx = np.where(q[0] == out, 0, np.where(q[1] == out, 1, np.where(q[2] == out, 2, 3)))
    return out, idx.astype(np.int8)


def _unpool(dout: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    dz = np.empty(shape)
    for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dz[:, i::2, j::2] = dout * (idx == k)
    return dz


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-segment zero mean, unit variance (constant segments map to zero)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=(1, 2), keepdims=True)
    std = x.std(axis=(1, 2), keepdims=True)
    return (x - mean) / np.where(std > 1e-12, std, 1.0)


def _forward(net: ConvNet, X: np.ndarray, keep=False):
    """Batched forward pass on (B, H, W) inputs; returns logits, hidden, cache.

    Max-pooling is applied before the ReLU; the two commute, and the ReLU
    then only touches the pooled map.  ``keep=True`` caches what backprop
    needs, ``keep="masks"`` only the ReLU signs and pooling routes.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != net.config.input_shape:
        raise ShapeError(f"input shape {X.shape[1:]} != {net.config.input_shape}")
    p = net.params
    x = standardize(X)[..., None]
    cache = {"blocks": []}
    for i in range(1, N_CONV + 1):
        w = p[f"conv{i}.w"]
        cols = _im2col(x)
        z = (cols @ w.reshape(-1, w.shape[-1]) + p[f"conv{i}.b"]).reshape(*x.shape[:3], w.shape[-1])
        pooled, idx = _maxpool(z)
        mask = pooled > 0
        if keep:
            cache["blocks"].append((cols if keep != "masks" else None, mask, idx, z.shape))
        x = pooled * mask
    g = x.mean(axis=(1, 2))
    h_pre = g @ p["fc.w"] + p["fc.b"]
    hidden = np.maximum(h_pre, 0.0)
    logits = hidden @ p["out.w"] + p["out.b"]
    cache.update(pool_shape=x.shape, g=g, h_mask=h_pre > 0, hidden=hidden)
    return logits, hidden, cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def _backward(net: ConvNet, logits, labels, cache) -> dict:
    p = net.params
    B = logits.shape[0]
    dlogits = np.exp(log_softmax(logits))
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    grads = {"out.w": cache["hidden"].T @ dlogits, "out.b": dlogits.sum(axis=0)}
    dh = (dlogits @ p["out.w"].T) * cache["h_mask"]
    grads["fc.w"] = cache["g"].T @ dh
    grads["fc.b"] = dh.sum(axis=0)
    dg = dh @ p["fc.w"].T
    _, ph, pw, pc = cache["pool_shape"]
    dx = np.broadcast_to((dg / (ph * pw))[:, None, None, :], cache["pool_shape"])
    for i in range(N_CONV, 0, -1):
        cols, mask, idx, z_shape = cache["blocks"][i - 1]
        w = p[f"conv{i}.w"]
        dz = _unpool(dx * mask, idx, z_shape)
        dz2 = dz.reshape(-1, w.shape[-1])
        grads[f"conv{i}.w"] = (cols.T @ dz2).reshape(w.shape)
        grads[f"conv{i}.b"] = dz2.sum(axis=0)
        if i > 1:
            dx = _conv_input_grad(dz, w)
    return {name: grads[name] for name in p}


def loss_and_grads(net: ConvNet, X: np.ndarray, labels) -> tuple[float, dict, np.ndarray]:
    labels = np.asarray(labels, dtype=np.intp)
    logits, _, cache = _forward(net, X, keep=True)
    return cross_entropy(logits, labels), _backward(net, logits, labels, cache), logits


# -- public operations -----------------------------------------------------

def _values(mel) -> np.ndarray:
    return mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)


def forward(net: ConvNet, mel) -> tuple[np.ndarray, EmbeddingVector]:
    """Logits and 256-dim deep feature for one 128 x 128 mel input."""
    values = _values(mel)
    logits, hidden, _ = _forward(net, values[None])
    clip_id = mel.clip_id if isinstance(mel, MelSpectrogram) else ""
    return logits[0], EmbeddingVector(hidden[0], "deep", clip_id)


def predict_hidden(net: ConvNet, X: np.ndarray, batch_size: int = 32) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = [_forward(net, X[s:s + batch_size])[1] for s in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0) if out else np.empty((0, HIDDEN))


def _stack_segments(segments) -> np.ndarray:
    return np.stack([_values(s) for s in segments]) if not isinstance(segments, np.ndarray) \
        else np.asarray(segments, dtype=np.float64)


def train_network(net: ConvNet, segments, labels, config: NetConfig | None = None,
                  progress=None) -> tuple[ConvNet, TrainHistory]:
    """Mini-batch SGD with momentum on mean cross-entropy.

    The input network is not modified.  Per-epoch loss and accuracy are
    averaged over the mini-batches of that epoch, measured before each
    update.
    """
    config = config or net.config
    X = _stack_segments(segments)
    y = np.asarray(labels, dtype=np.intp)
    if len(X) != len(y) or len(X) == 0:
        raise DataError("segments and labels must be nonempty and aligned")
    if y.min() < 0 or y.max() >= net.n_classes:
        raise DataError(f"labels must lie in [0, {net.n_classes})")
    counts = np.bincount(y, minlength=net.n_classes)
    if np.any(counts == 0):
        raise DataError(f"classes without segments: {np.flatnonzero(counts == 0).tolist()}")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    history = TrainHistory()
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(X), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads, logits = loss_and_grads(net, X[batch], y[batch])
            if not np.isfinite(loss):
                raise NumericalError(f"training diverged at epoch {epoch} (loss {loss})")
            total_loss += loss * len(batch)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[batch]))
            for k, param in net.params.items():
                velocity[k] *= config.momentum
                velocity[k] -= config.learning_rate * grads[k]
                param += velocity[k]
        history.loss.append(total_loss / len(X))
        history.accuracy.append(correct / len(X))
        log.debug("dcnn epoch %d loss %.5f acc %.3f", epoch, history.loss[-1], history.accuracy[-1])
        if progress:
            progress(epoch, history.loss[-1], history.accuracy[-1])
    return net, history


def _probe(net: ConvNet, x: np.ndarray, y: np.ndarray):
    """Loss plus every ReLU sign mask and pooling route for one sample."""
    logits, _, cache = _forward(net, x[None], keep="masks")
    pattern = [b[1] for b in cache["blocks"]] + [b[2] for b in cache["blocks"]] + [cache["h_mask"]]
    return cross_entropy(logits, y), pattern


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_errors(net: ConvNet, sample, label: int, epsilon: float = 1e-5,
                    n_params: int = 200, seed: int = 0) -> dict:
    """Max relative error between analytic and central-difference gradients, per tensor.

    Returns ``{name: (max_error, n_checked)}``.  Parameters are drawn
    round-robin over the tensors until ``n_params`` are checked.  A parameter
    is skipped when its +/- epsilon perturbation changes any ReLU sign or
    max-pool routing, since the loss is not differentiable across that kink.
    """
    if not 1e-5 <= epsilon <= 1e-2:
        raise ConfigurationError("epsilon must lie in [1e-5, 1e-2]")
    x = _values(sample)
    y = np.array([label])
    _, grads, _ = loss_and_grads(net, x[None], y)
    _, base = _probe(net, x, y)
    rng = np.random.default_rng(seed)
    queues = {name: list(rng.permutation(param.size)) for name, param in net.params.items()}
    errors = {name: (0.0, 0) for name in net.params}
    total = 0
    while total < n_params and any(queues.values()):
        for name, param in net.params.items():
            if not queues[name]:
                continue
            j = queues[name].pop()
            flat = param.reshape(-1)
            old = flat[j]
            flat[j] = old + epsilon
            plus, plus_pattern = _probe(net, x, y)
            flat[j] = old - epsilon
            minus, minus_pattern = _probe(net, x, y)
            flat[j] = old
            if not (_same_pattern(base, plus_pattern) and _same_pattern(base, minus_pattern)):
                continue
            g_num = (plus - minus) / (2.0 * epsilon)
            g_ana = grads[name].reshape(-1)[j]
            err = abs(g_ana - g_num) / max(1e-8, abs(g_ana) + abs(g_num))
            worst, checked = errors[name]
            errors[name] = (max(worst, err), checked + 1)
            total += 1
    return errors


def gradient_check(net: ConvNet, sample, label: int, epsilon: float = 1e-5,
                   n_params: int = 200, seed: int = 0) -> float:
    errors = gradient_errors(net, sample, label, epsilon, n_params, seed)
    return max(worst for worst, _ in errors.values())


# -- track embeddings --------------------------------------------------------

def segment_frames(config: DspConfig | None = None) -> tuple[int, int]:
    """Segment length and hop in mel frames (128 and 64 by default)."""
    config = config or DspConfig()
    length = int(round(SEGMENT_SECONDS * config.sample_rate / config.hop))
    hop = int(round(SEGMENT_HOP_SECONDS * config.sample_rate / config.hop))
    return length, hop


def split_segments(values: np.ndarray, length: int, hop: int) -> np.ndarray:
    n = values.shape[1]
    if n < length:
        raise EmptyInputError(f"mel input has {n} frames, need {length}")
    starts = range(0, n - length + 1, hop)
    return np.stack([values[:, s:s + length] for s in starts])


def embed_mel(net: ConvNet, values: np.ndarray, hop: int | None = None,
              track_id: str = "") -> EmbeddingVector:
    """Average the hidden vectors of overlapping segments, then length-normalize."""
    length = net.config.input_shape[1]
    hop = hop or length // 2
    values = np.asarray(values, dtype=np.float64)
    if values.shape[1] < length:
        fill = values.min() if values.size else 0.0
        values = np.pad(values, ((0, 0), (0, length - values.shape[1])), constant_values=fill)
    hidden = predict_hidden(net, split_segments(values, length, hop))
    return length_normalize(EmbeddingVector(hidden.mean(axis=0), "deep", track_id))


def track_embedding(net: ConvNet, clip: AudioClip, dsp: DspConfig | None = None,
                    hop: int | None = None) -> EmbeddingVector:
    dsp = dsp or DspConfig()
    if clip.samples.size == 0:
        raise EmptyInputError("empty clip")
    samples = clip.samples
    target = int(round(SEGMENT_SECONDS * dsp.sample_rate))
    if samples.size < target:
        samples = np.pad(samples, (0, target - samples.size))
    mel = log_mel_spectrogram(AudioClip(samples, clip.sample_rate, clip.id), dsp)
    length, default_hop = segment_frames(dsp)
    if length != net.config.input_shape[1]:
        raise ShapeError(f"3 s segments have {length} frames, net expects {net.config.input_shape[1]}")
    return embed_mel(net, mel.values, hop or default_hop, clip.id)
