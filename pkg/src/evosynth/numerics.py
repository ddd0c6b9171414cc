"""Deterministic training core: layer math, SGD, and evaluation.

Networks are flat layer lists ending in a softmax-cross-entropy head.
All arithmetic is float64 and single-threaded by contract; two runs with
the same seed, config, and data produce bitwise-identical weights.
Masked synapses are multiplied by zero before use, so a dead synapse
contributes exactly nothing to outputs or gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import (
    ConfigurationError,
    NumericOverflowError,
    ShapeError,
    TrainingDivergedError,
)

KIND_CONV = "convolution"
KIND_FC = "fully-connected"
KIND_RELU = "relu"
KIND_POOL = "max-pool"
KIND_LOSS = "softmax-cross-entropy"

WEIGHTED_KINDS = (KIND_CONV, KIND_FC)
ALL_KINDS = (KIND_CONV, KIND_FC, KIND_RELU, KIND_POOL, KIND_LOSS)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network.

    kernel_shape is (out_channels, in_channels, kh, kw) for convolution and
    (out_features, in_features) for fully-connected layers; other kinds carry
    no weights. Max-pool uses `stride` as both window size and step
    (non-overlapping pooling) and requires padding 0.
    """

    kind: str
    kernel_shape: tuple[int, ...] = ()
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == KIND_CONV and len(self.kernel_shape) != 4:
            raise ConfigurationError("convolution kernel_shape must be (out, in, kh, kw)")
        if self.kind == KIND_FC and len(self.kernel_shape) != 2:
            raise ConfigurationError("fully-connected kernel_shape must be (out, in)")
        if self.kind in WEIGHTED_KINDS and any(d <= 0 for d in self.kernel_shape):
            raise ConfigurationError(f"kernel_shape dimensions must be positive: {self.kernel_shape}")
        if self.kind not in WEIGHTED_KINDS and self.kernel_shape:
            raise ConfigurationError(f"{self.kind} takes no kernel_shape")
        if self.stride < 1:
            raise ConfigurationError("stride must be >= 1")
        if self.padding < 0:
            raise ConfigurationError("padding must be >= 0")
        if self.kind == KIND_POOL and self.padding != 0:
            raise ConfigurationError("max-pool does not support padding")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int
    momentum: float = 0.0

    def __post_init__(self):
        problems = []
        if not self.learning_rate >= 0:
            problems.append("learning_rate must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            problems.append("momentum must be in [0, 1)")
        if problems:
            raise ConfigurationError("; ".join(problems))


@dataclass(frozen=True)
class TrainResult:
    genome: object  # NetworkGenome; the genome module imports this one
    loss_history: tuple[float, ...]

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1]


def kernel_count(layer: LayerSpec) -> int:
    """Number of synaptic clusters in a weighted layer: one per output
    channel (convolution) or per output neuron's weight row (fully-connected)."""
    if layer.kind not in WEIGHTED_KINDS:
        raise ValueError(f"{layer.kind} has no kernels")
    return layer.kernel_shape[0]


def output_shape(layer: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape produced by `layer` for one sample of shape `in_shape` (no batch dim)."""
    if layer.kind == KIND_CONV:
        if len(in_shape) != 3:
            raise ShapeError(f"convolution needs (c, h, w) input, got {in_shape}")
        c, h, w = in_shape
        out_c, in_c, kh, kw = layer.kernel_shape
        if in_c != c:
            raise ShapeError(f"convolution expects {in_c} input channels, got {c}")
        oh = (h + 2 * layer.padding - kh) // layer.stride + 1
        ow = (w + 2 * layer.padding - kw) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"convolution output collapses for input {in_shape}")
        return (out_c, oh, ow)
    if layer.kind == KIND_FC:
        out_f, in_f = layer.kernel_shape
        flat = int(np.prod(in_shape))
        if flat != in_f:
            raise ShapeError(f"fully-connected expects {in_f} inputs, got {flat}")
        return (out_f,)
    if layer.kind == KIND_RELU:
        return in_shape
    if layer.kind == KIND_POOL:
        if len(in_shape) != 3:
            raise ShapeError(f"max-pool needs (c, h, w) input, got {in_shape}")
        c, h, w = in_shape
        k = layer.stride
        if h < k or w < k:
            raise ShapeError(f"max-pool window {k} too large for input {in_shape}")
        return (c, h // k, w // k)
    if layer.kind == KIND_LOSS:
        if len(in_shape) != 1:
            raise ShapeError(f"loss head needs flat class scores, got {in_shape}")
        return in_shape
    raise ConfigurationError(f"unknown layer kind {layer.kind!r}")


def network_shapes(layers: tuple[LayerSpec, ...], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-layer output shapes; also validates the topology end to end."""
    if not layers or layers[-1].kind != KIND_LOSS:
        raise ConfigurationError("network must end with a softmax-cross-entropy layer")
    if any(l.kind == KIND_LOSS for l in layers[:-1]):
        raise ConfigurationError("softmax-cross-entropy must be the final layer only")
    shapes = []
    cur = tuple(input_shape)
    for layer in layers:
        cur = output_shape(layer, cur)
        shapes.append(cur)
    return shapes


def init_weights(
    layers: tuple[LayerSpec, ...], input_shape: tuple[int, ...], seed: int
) -> dict[int, np.ndarray]:
    """Uniform [-a, a] weights with a = sqrt(6 / (fan_in + fan_out)), one
    tensor per weighted layer, keyed by layer index."""
    network_shapes(layers, input_shape)
    weights = {}
    for i, layer in enumerate(layers):
        if layer.kind == KIND_CONV:
            out_c, in_c, kh, kw = layer.kernel_shape
            fan_in, fan_out = in_c * kh * kw, out_c * kh * kw
        elif layer.kind == KIND_FC:
            fan_out, fan_in = layer.kernel_shape
        else:
            continue
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        gen = rng.stream(seed, rng.ROLE_INIT, i)
        weights[i] = gen.uniform(-bound, bound, size=layer.kernel_shape)
    return weights


# ---------------------------------------------------------------------------
# layer primitives

def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    # (n, c*kh*kw, oh*ow)
    return np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow), (oh, ow)


def _col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.zeros((n, c, hp, wp))
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def _conv_forward(x, w, stride, pad):
    out_c = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    cols, (oh, ow) = _im2col(x, kh, kw, stride, pad)
    out = np.einsum("fk,nkl->nfl", w.reshape(out_c, -1), cols, optimize=True)
    return out.reshape(x.shape[0], out_c, oh, ow), (x.shape, w, cols, stride, pad)


def _conv_backward(gout, cache):
    x_shape, w, cols, stride, pad = cache
    out_c = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    g2 = gout.reshape(gout.shape[0], out_c, -1)
    gw = np.einsum("nfl,nkl->fk", g2, cols, optimize=True).reshape(w.shape)
    gcols = np.einsum("fk,nfl->nkl", w.reshape(out_c, -1), g2, optimize=True)
    gx = _col2im(gcols, x_shape, kh, kw, stride, pad)
    return gx, gw


def _fc_forward(x, w):
    x2 = x.reshape(x.shape[0], -1)
    return x2 @ w.T, (x.shape, x2, w)


def _fc_backward(gout, cache):
    x_shape, x2, w = cache
    gw = gout.T @ x2
    gx = (gout @ w).reshape(x_shape)
    return gx, gw


def _pool_forward(x, k):
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    xc = x[:, :, : oh * k, : ow * k]
    blocks = np.ascontiguousarray(
        xc.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, oh, ow, k * k)
    idx = np.argmax(blocks, axis=-1)  # first maximum wins on ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, k)


def _pool_backward(gout, cache):
    x_shape, idx, k = cache
    n, c, h, w = x_shape
    oh, ow = h // k, w // k
    gblocks = np.zeros((n, c, oh, ow, k * k))
    np.put_along_axis(gblocks, idx[..., None], gout[..., None], axis=-1)
    gx = np.zeros(x_shape)
    gx[:, :, : oh * k, : ow * k] = (
        gblocks.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
    )
    return gx


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def cross_entropy(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the raw scores,
    stabilized via log-sum-exp."""
    n = scores.shape[0]
    shifted = scores - np.max(scores, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# network-level passes (dict-based core shared by the genome API and SGD)

def _scores(layers, input_shape, eff_weights, x, need_cache):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(input_shape):
        raise ShapeError(f"batch shape {x.shape} does not match input spec {tuple(input_shape)}")
    caches = []
    cur = x
    for i, layer in enumerate(layers):
        cache = None
        if layer.kind == KIND_CONV:
            cur, cache = _conv_forward(cur, eff_weights[i], layer.stride, layer.padding)
        elif layer.kind == KIND_FC:
            cur, cache = _fc_forward(cur, eff_weights[i])
        elif layer.kind == KIND_RELU:
            cache = cur
            cur = np.maximum(cur, 0.0)
        elif layer.kind == KIND_POOL:
            cur, cache = _pool_forward(cur, layer.stride)
        if not np.all(np.isfinite(cur)):
            raise NumericOverflowError(f"non-finite values after layer {i} ({layer.kind})")
        if need_cache:
            caches.append(cache)
    return cur, caches


def _check_labels(labels, n_batch, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n_batch:
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n_batch}")
    if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"labels out of range [0, {n_classes})")
    return labels


def _loss_and_grads(layers, input_shape, weights, masks, x, labels):
    """masks=None runs unmasked; otherwise effective weight = w * mask and
    gradients of dead synapses are exactly zero."""
    if masks is None:
        eff = weights
    else:
        eff = {i: weights[i] * masks[i] for i in weights}
    scores, caches = _scores(layers, input_shape, eff, x, True)
    labels = _check_labels(labels, x.shape[0], scores.shape[1])
    loss, grad = cross_entropy(scores, labels)
    grads: dict[int, np.ndarray] = {}
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.kind == KIND_CONV:
            grad, gw = _conv_backward(grad, caches[i])
            grads[i] = gw if masks is None else gw * masks[i]
        elif layer.kind == KIND_FC:
            grad, gw = _fc_backward(grad, caches[i])
            grads[i] = gw if masks is None else gw * masks[i]
        elif layer.kind == KIND_RELU:
            grad = grad * (caches[i] > 0)
        elif layer.kind == KIND_POOL:
            grad = _pool_backward(grad, caches[i])
    return loss, grads


def forward(genome, batch: np.ndarray, masked: bool = True) -> np.ndarray:
    """Class scores (softmax probabilities), shape (batch, n_classes).

    With `masked` False the synapse masks are ignored; for an all-ones mask
    the two modes are bitwise identical.
    """
    x = np.asarray(batch, dtype=np.float64)
    if masked:
        eff = {i: genome.weights[i] * genome.synapse_mask[i] for i in genome.weights}
    else:
        eff = genome.weights
    scores, _ = _scores(genome.layers, genome.input_shape, eff, x, False)
    return softmax(scores)


def loss_on_batch(genome, batch, labels) -> float:
    """Mean cross-entropy of the genome on one batch (masked)."""
    x = np.asarray(batch, dtype=np.float64)
    eff = {i: genome.weights[i] * genome.synapse_mask[i] for i in genome.weights}
    scores, _ = _scores(genome.layers, genome.input_shape, eff, x, False)
    labels = _check_labels(labels, x.shape[0], scores.shape[1])
    loss, _ = cross_entropy(scores, labels)
    return loss


def backward(genome, batch, labels) -> dict[int, np.ndarray]:
    """Gradient set for one batch: layer index -> gradient tensor, one per
    weight tensor, with exact zeros at masked-out synapses."""
    x = np.asarray(batch, dtype=np.float64)
    _, grads = _loss_and_grads(
        genome.layers, genome.input_shape, genome.weights, genome.synapse_mask, x, labels
    )
    return grads


def sgd_train(genome, dataset, config: TrainConfig) -> TrainResult:
    """Momentum SGD over `dataset`, bit-reproducible for a fixed seed.

    Only mask=1 weights change. Returns the trained genome and the
    per-epoch mean loss trajectory.
    """
    if len(dataset.labels) == 0:
        raise ConfigurationError("dataset is empty")
    weights = {i: np.array(w) for i, w in genome.weights.items()}
    velocity = {i: np.zeros_like(w) for i, w in weights.items()}
    masks = genome.synapse_mask
    shuffler = rng.stream(config.seed, rng.ROLE_TRAIN)
    n = len(dataset.labels)
    losses = []
    for epoch in range(1, config.epochs + 1):
        order = shuffler.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            take = order[start : start + config.batch_size]
            try:
                loss, grads = _loss_and_grads(
                    genome.layers,
                    genome.input_shape,
                    weights,
                    masks,
                    dataset.images[take],
                    dataset.labels[take],
                )
            except NumericOverflowError:
                raise TrainingDivergedError(epoch) from None
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            for i, g in grads.items():
                velocity[i] = config.momentum * velocity[i] + g
                weights[i] -= config.learning_rate * velocity[i]
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return TrainResult(genome=genome.with_weights(weights), loss_history=tuple(losses))


def evaluate(genome, dataset, batch_size: int = 512) -> float:
    """Accuracy in [0, 1] under the argmax decision; argmax breaks ties
    toward the lowest class index."""
    if len(dataset.labels) == 0:
        raise ConfigurationError("dataset is empty")
    correct = 0
    for start in range(0, len(dataset.labels), batch_size):
        probs = forward(genome, dataset.images[start : start + batch_size])
        pred = np.argmax(probs, axis=1)
        correct += int(np.sum(pred == dataset.labels[start : start + batch_size]))
    return correct / len(dataset.labels)
