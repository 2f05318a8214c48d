"""Dense networks with batch normalization and manual backpropagation.

Forward and backward passes expose the batch statistics (mean, variance) of
every BN layer and the gradients of the loss with respect to them, so that a
caller can substitute externally aggregated values layer by layer.

Conventions: arrays are float64, batches are ``(batch, features)``, the loss
is the batch-mean softmax cross-entropy and every gradient is a gradient of
that mean. Variances are population variances (divide by batch size).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Array dimensions do not match the layer they are fed to."""


# --------------------------------------------------------------------------
# Parameter containers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BnLayerParams:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError(
                f"gamma {self.gamma.shape} and beta {self.beta.shape} must be "
                "vectors of equal length")

    @property
    def features(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class BnStats:
    """Per-feature batch mean and (population) batch variance."""
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise ShapeError(
                f"mean {self.mean.shape} and variance {self.variance.shape} differ")
        if np.any(self.variance < 0):
            raise ValueError("variance entries must be non-negative")


@dataclass(frozen=True)
class BnStatGrads:
    """Loss gradients w.r.t. a BN layer's batch mean and batch variance."""
    d_mean: np.ndarray
    d_variance: np.ndarray

    def __post_init__(self):
        if self.d_mean.shape != self.d_variance.shape:
            raise ShapeError("d_mean and d_variance lengths differ")


@dataclass(frozen=True)
class DenseLayerParams:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} incompatible with bias {self.bias.shape}")


# --------------------------------------------------------------------------
# Network layout
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class BatchNorm:
    features: int


@dataclass(frozen=True)
class ReLU:
    pass


Layer = Union[Dense, BatchNorm, ReLU]


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or not isinstance(self.layers[0], Dense):
            raise ValueError("the first layer must be a dense feature-extraction layer")
        width = self.layers[0].in_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.in_dim != width:
                    raise ShapeError(f"layer {i}: expected input width {width}, got {layer.in_dim}")
                width = layer.out_dim
            elif isinstance(layer, BatchNorm):
                if isinstance(self.layers[i - 1], BatchNorm):
                    raise ValueError(f"layer {i}: BN must follow a feature-extraction layer")
                if layer.features != width:
                    raise ShapeError(f"layer {i}: BN width {layer.features} != {width}")
            elif not isinstance(layer, ReLU):
                raise TypeError(f"unknown layer {layer!r}")
        if not isinstance(self.layers[-1], Dense):
            raise ValueError("the last layer must be dense (it produces the logits)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_bn(self) -> int:
        return sum(isinstance(l, BatchNorm) for l in self.layers)

    @property
    def dense_layers(self) -> list[Dense]:
        return [l for l in self.layers if isinstance(l, Dense)]

    @property
    def bn_layers(self) -> list[BatchNorm]:
        return [l for l in self.layers if isinstance(l, BatchNorm)]


def mlp_spec(input_dim: int, hidden: Sequence[int], output_dim: int,
             batch_norm: bool = True) -> NetworkSpec:
    """Dense -> [BN] -> ReLU blocks followed by a dense output layer."""
    layers: list = []
    width = input_dim
    for h in hidden:
        layers.append(Dense(width, h))
        if batch_norm:
            layers.append(BatchNorm(h))
        layers.append(ReLU())
        width = h
    layers.append(Dense(width, output_dim))
    return NetworkSpec(tuple(layers))


def mnist_spec() -> NetworkSpec:
    """784 x 30 x 10 network with one BN layer after the hidden layer."""
    return mlp_spec(784, [30], 10, batch_norm=True)


# --------------------------------------------------------------------------
# Model parameters and gradients
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Gradient parameters (dense, gamma, beta) plus moving-average stats."""
    dense: tuple
    bn: tuple
    stats: tuple

    def __post_init__(self):
        for name in ("dense", "bn", "stats"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.bn) != len(self.stats):
            raise ValueError("one moving-average BnStats per BN layer required")

    def gradient_vector(self) -> np.ndarray:
        parts = []
        for d in self.dense:
            parts += [d.weights.ravel(), d.bias]
        for b in self.bn:
            parts += [b.gamma, b.beta]
        return np.concatenate(parts) if parts else np.zeros(0)

    def stats_vector(self) -> np.ndarray:
        parts = []
        for s in self.stats:
            parts += [s.mean, s.variance]
        return np.concatenate(parts) if parts else np.zeros(0)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gradient_vector(), self.stats_vector()])

    def with_gradient_vector(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.num_gradient_params,):
            raise ShapeError(
                f"vector has shape {vec.shape}, expected ({self.num_gradient_params},)")
        pos = 0

        def take(shape):
            nonlocal pos
            n = int(np.prod(shape))
            out = vec[pos:pos + n].reshape(shape).copy()
            pos += n
            return out

        dense = [DenseLayerParams(take(d.weights.shape), take(d.bias.shape))
                 for d in self.dense]
        bn = [BnLayerParams(take(b.gamma.shape), take(b.beta.shape), b.epsilon)
              for b in self.bn]
        return ModelParams(dense, bn, self.stats)

    def with_stats(self, stats: Sequence[BnStats]) -> "ModelParams":
        return ModelParams(self.dense, self.bn, stats)

    @property
    def num_gradient_params(self) -> int:
        return sum(d.weights.size + d.bias.size for d in self.dense) + \
            sum(2 * b.features for b in self.bn)

    @property
    def num_stat_params(self) -> int:
        return sum(2 * s.mean.size for s in self.stats)


@dataclass(frozen=True)
class ModelGrads:
    dense: tuple
    gamma: tuple
    beta: tuple

    def vector(self) -> np.ndarray:
        """Flattened in the same order as ``ModelParams.gradient_vector``."""
        parts = []
        for d in self.dense:
            parts += [d.weights.ravel(), d.bias]
        for g, b in zip(self.gamma, self.beta):
            parts += [g, b]
        return np.concatenate(parts) if parts else np.zeros(0)


def init_params(spec: NetworkSpec, rng: np.random.Generator | int,
                epsilon: float = 1e-5) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) dense layers, gamma=1, beta=0, stats (0, 1)."""
    rng = np.random.default_rng(rng)
    dense = []
    for layer in spec.dense_layers:
        bound = 1.0 / np.sqrt(layer.in_dim)
        dense.append(DenseLayerParams(
            rng.uniform(-bound, bound, size=(layer.out_dim, layer.in_dim)),
            rng.uniform(-bound, bound, size=layer.out_dim)))
    bn = [BnLayerParams(np.ones(l.features), np.zeros(l.features), epsilon)
          for l in spec.bn_layers]
    stats = [BnStats(np.zeros(l.features), np.ones(l.features)) for l in spec.bn_layers]
    return ModelParams(dense, bn, stats)


def apply_gradient(params: ModelParams, grads: ModelGrads, lr: float) -> ModelParams:
    """One gradient-descent step on the gradient parameters; stats untouched."""
    dense = [DenseLayerParams(p.weights - lr * g.weights, p.bias - lr * g.bias)
             for p, g in zip(params.dense, grads.dense)]
    bn = [BnLayerParams(p.gamma - lr * dg, p.beta - lr * db, p.epsilon)
          for p, dg, db in zip(params.bn, grads.gamma, grads.beta)]
    return ModelParams(dense, bn, params.stats)


# --------------------------------------------------------------------------
# Layer operations
# --------------------------------------------------------------------------

def _as_batch(x, width=None, what="input"):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{what} must be 2-D (batch, features), got shape {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError(f"{what} batch is empty")
    if width is not None and x.shape[1] != width:
        raise ShapeError(f"{what} has {x.shape[1]} features, expected {width}")
    return x


def _vec(v):
    return np.ascontiguousarray(v, dtype=np.float64)


def batch_stats(y) -> BnStats:
    y = _as_batch(y)
    mean, var = kernels.bn_moments(y)
    return BnStats(mean, var)


def bn_forward(y, params: BnLayerParams, stats_override: BnStats | None = None):
    """Normalize ``y`` with its own batch stats or with ``stats_override``.

    Returns ``(output, stats, normalized)``.
    """
    y = _as_batch(y, params.features)
    if stats_override is None:
        stats = batch_stats(y)
    else:
        if stats_override.mean.shape != (params.features,):
            raise ShapeError("stats override does not match layer width")
        stats = stats_override
    out, normalized = kernels.bn_normalize(
        y, _vec(stats.mean), _vec(stats.variance), _vec(params.gamma),
        _vec(params.beta), float(params.epsilon))
    return out, stats, normalized


def bn_local_stat_grads(d_output, y, normalized, stats: BnStats, params: BnLayerParams):
    """Stat grads plus gamma/beta grads computed from this batch alone."""
    d_output = _as_batch(d_output, params.features, "d_output")
    if d_output.shape != y.shape:
        raise ShapeError(f"d_output {d_output.shape} does not match cache {y.shape}")
    d_mean, d_var, d_gamma, d_beta = kernels.bn_stat_grads(
        d_output, y, normalized, _vec(stats.mean), _vec(stats.variance),
        _vec(params.gamma), float(params.epsilon))
    return BnStatGrads(d_mean, d_var), d_gamma, d_beta


def bn_input_grad(d_output, y, stats: BnStats, params: BnLayerParams,
                  stat_grads: BnStatGrads):
    d_output = _as_batch(d_output, params.features, "d_output")
    return kernels.bn_input_grad(
        d_output, y, _vec(stats.mean), _vec(stats.variance), _vec(params.gamma),
        float(params.epsilon), _vec(stat_grads.d_mean), _vec(stat_grads.d_variance))


def bn_backward(d_output, cache: "BnCache", params: BnLayerParams,
                stat_grads_override: BnStatGrads | None = None):
    """Backward pass of one BN layer.

    The input gradient combines the direct path through the normalization
    with the paths through the batch variance and batch mean. When
    ``stat_grads_override`` is given it replaces the locally computed stat
    grads in that combination and is returned as ``stat_grads``.

    Returns ``(d_input, d_gamma, d_beta, stat_grads)``.
    """
    local, d_gamma, d_beta = bn_local_stat_grads(
        d_output, cache.y, cache.normalized, cache.stats, params)
    stat_grads = local if stat_grads_override is None else stat_grads_override
    if stat_grads.d_mean.shape != (params.features,):
        raise ShapeError("stat grads override does not match layer width")
    d_input = bn_input_grad(d_output, cache.y, cache.stats, params, stat_grads)
    return d_input, d_gamma, d_beta, stat_grads


def dense_forward(x, params: DenseLayerParams):
    x = _as_batch(x, params.weights.shape[1])
    return x @ params.weights.T + params.bias


def dense_backward(d_output, x, params: DenseLayerParams):
    """Returns ``(d_input, d_weights, d_bias)``."""
    d_output = _as_batch(d_output, params.weights.shape[0], "d_output")
    x = _as_batch(x, params.weights.shape[1])
    if x.shape[0] != d_output.shape[0]:
        raise ShapeError("d_output and cached input batch sizes differ")
    return d_output @ params.weights, d_output.T @ x, d_output.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(d_output, x):
    return d_output * (x > 0)


def softmax_cross_entropy(logits, labels):
    """Batch-mean cross-entropy and its gradient w.r.t. the logits."""
    logits = _as_batch(logits, what="logits")
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} != ({batch},)")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(batch)
    loss = -log_p[rows, labels].mean()
    d_logits = np.exp(log_p)
    d_logits[rows, labels] -= 1.0
    return float(loss), d_logits / batch


# --------------------------------------------------------------------------
# Whole-model forward/backward
# --------------------------------------------------------------------------

@dataclass
class BnCache:
    y: np.ndarray
    normalized: np.ndarray
    output: np.ndarray
    stats: BnStats


@dataclass
class ForwardCache:
    """Everything the backward pass needs, one entry per layer."""
    entries: list = field(default_factory=list)
    logits: np.ndarray | None = None

    @property
    def bn(self) -> list[BnCache]:
        return [e for e in self.entries if isinstance(e, BnCache)]

    @property
    def batch_stats(self) -> list[BnStats]:
        return [e.stats for e in self.bn]


BATCH = "batch"
MOVING = "moving"


def forward_steps(spec: NetworkSpec, params: ModelParams, x) -> Iterator:
    """Generator form of the forward pass for layer-wise synchronization.

    Yields ``(bn_index, y)`` with the input of each BN layer and expects the
    stats to normalize with to be sent back (``None`` means: use the batch's
    own stats). Returns the ``ForwardCache`` via ``StopIteration.value``.
    """
    x = _as_batch(x, spec.input_dim)
    cache = ForwardCache()
    dense_i = bn_i = 0
    h = x
    for layer in spec.layers:
        if isinstance(layer, Dense):
            cache.entries.append(h)
            h = dense_forward(h, params.dense[dense_i])
            dense_i += 1
        elif isinstance(layer, BatchNorm):
            stats = yield bn_i, h
            out, stats, normalized = bn_forward(h, params.bn[bn_i], stats)
            cache.entries.append(BnCache(h, normalized, out, stats))
            h = out
            bn_i += 1
        else:
            cache.entries.append(h)
            h = relu_forward(h)
    cache.logits = h
    return cache


def model_forward(spec: NetworkSpec, params: ModelParams, x,
                  stats_mode: Union[str, Sequence[BnStats]] = BATCH):
    """Run the network; returns ``(logits, cache)``.

    ``stats_mode`` is ``"batch"`` (training: batch statistics), ``"moving"``
    (inference: the stored moving averages) or a list of ``BnStats``, one
    per BN layer, used verbatim.
    """
    if isinstance(stats_mode, str):
        if stats_mode == BATCH:
            overrides = [None] * spec.num_bn
        elif stats_mode == MOVING:
            overrides = list(params.stats)
        else:
            raise ValueError(f"unknown stats mode {stats_mode!r}")
    else:
        overrides = list(stats_mode)
        if len(overrides) != spec.num_bn:
            raise ValueError(f"expected {spec.num_bn} stats overrides, got {len(overrides)}")
    steps = forward_steps(spec, params, x)
    try:
        bn_i, _ = next(steps)
        while True:
            bn_i, _ = steps.send(overrides[bn_i])
    except StopIteration as stop:
        cache = stop.value
    return cache.logits, cache


def backward_steps(spec: NetworkSpec, params: ModelParams, cache: ForwardCache,
                   labels) -> Iterator:
    """Generator form of the backward pass, from the output to the input.

    At every BN layer (last first) yields ``(bn_index, local_stat_grads)``
    and expects the stat grads to continue with (``None`` keeps the local
    ones). Returns ``(loss, ModelGrads, stat_grads_per_layer)``.
    """
    loss, d = softmax_cross_entropy(cache.logits, labels)
    n_dense, n_bn = len(params.dense), len(params.bn)
    d_dense = [None] * n_dense
    d_gamma = [None] * n_bn
    d_beta = [None] * n_bn
    stat_grads = [None] * n_bn
    dense_i, bn_i = n_dense, n_bn
    for layer, entry in zip(reversed(spec.layers), reversed(cache.entries)):
        if isinstance(layer, Dense):
            dense_i -= 1
            p = params.dense[dense_i]
            d, dw, db = dense_backward(d, entry, p)
            d_dense[dense_i] = DenseLayerParams(dw, db)
        elif isinstance(layer, BatchNorm):
            bn_i -= 1
            p = params.bn[bn_i]
            local, dg, db = bn_local_stat_grads(d, entry.y, entry.normalized, entry.stats, p)
            override = yield bn_i, local
            sg = local if override is None else override
            d = bn_input_grad(d, entry.y, entry.stats, p, sg)
            d_gamma[bn_i], d_beta[bn_i], stat_grads[bn_i] = dg, db, sg
        else:
            d = relu_backward(d, entry)
    return loss, ModelGrads(d_dense, d_gamma, d_beta), stat_grads


def model_backward(spec: NetworkSpec, params: ModelParams, cache: ForwardCache,
                   labels, stat_grads_override: Sequence[BnStatGrads | None] | None = None):
    """Gradients of the batch-mean loss; returns ``(loss, grads, stat_grads)``.

    ``stat_grads_override`` (one entry per BN layer, ``None`` to keep the
    local value) substitutes the mean/variance gradients of a layer before
    they propagate to earlier layers.
    """
    overrides = list(stat_grads_override) if stat_grads_override is not None \
        else [None] * spec.num_bn
    if len(overrides) != spec.num_bn:
        raise ValueError(f"expected {spec.num_bn} stat-grad overrides, got {len(overrides)}")
    steps = backward_steps(spec, params, cache, labels)
    try:
        bn_i, _ = next(steps)
        while True:
            bn_i, _ = steps.send(overrides[bn_i])
    except StopIteration as stop:
        return stop.value


def loss_and_grads(spec: NetworkSpec, params: ModelParams, x, labels,
                   stats_mode=BATCH, stat_grads_override=None):
    """Forward + backward in one call; returns ``(loss, grads, cache, stat_grads)``."""
    _, cache = model_forward(spec, params, x, stats_mode)
    loss, grads, stat_grads = model_backward(spec, params, cache, labels, stat_grads_override)
    return loss, grads, cache, stat_grads


def loss_value(spec: NetworkSpec, params: ModelParams, x, labels, stats_mode=BATCH) -> float:
    logits, _ = model_forward(spec, params, x, stats_mode)
    return softmax_cross_entropy(logits, labels)[0]


def update_moving_average(moving: Sequence[BnStats], batch: Sequence[BnStats],
                          rho: float) -> list[BnStats]:
    """``(1 - rho) * moving + rho * batch`` for every BN layer."""
    return [BnStats((1 - rho) * m.mean + rho * b.mean,
                    (1 - rho) * m.variance + rho * b.variance)
            for m, b in zip(moving, batch)]
