"""Lockstep federated-learning simulator.

Implements FedAvg with BN, FedTAN (layer-wise aggregation of batch statistics
in the forward pass and of their gradients in the backward pass during the
first local step of every iteration), FedTAN-II, forward-only aggregation,
FedBN, SiloBN and a centralized reference. Every server/client exchange is
recorded in a :class:`Transcript`.
"""
from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datasets import LabeledDataset
from .nn import (BnStatGrads, BnStats, DenseLayerParams, ModelParams,
                 NetworkSpec, apply_gradient, backward_steps, forward_steps,
                 init_params, model_backward, model_forward,
                 update_moving_average)
from . import kernels

log = logging.getLogger(__name__)

BYTES_PER_SCALAR = 4


class Scheme(str, enum.Enum):
    FEDAVG_BN = "fedavg_bn"
    FEDTAN = "fedtan"
    FEDTAN_II = "fedtan2"
    FEDAVG_ALG2 = "fedavg_alg2"
    FEDBN = "fedbn"
    SILOBN = "silobn"
    CENTRALIZED = "centralized"


class ProtocolError(RuntimeError):
    """A lockstep barrier was violated (missing client, wrong order)."""


class Kind(str, enum.Enum):
    GLOBAL_MODEL = "GlobalModel"
    LOCAL_MODEL = "LocalModel"
    LAYER_MEAN_UP = "LayerMeanUp"
    LAYER_MEAN_DOWN = "LayerMeanDown"
    LAYER_VAR_UP = "LayerVarUp"
    LAYER_VAR_DOWN = "LayerVarDown"
    LAYER_STAT_GRAD_UP = "LayerStatGradUp"
    LAYER_STAT_GRAD_DOWN = "LayerStatGradDown"


@dataclass(frozen=True)
class Message:
    round: int
    direction: str
    kind: Kind
    count: int
    layer: int | None = None
    client: int | None = None  # None on the downlink: one broadcast

    @property
    def nbytes(self) -> int:
        return BYTES_PER_SCALAR * self.count


@dataclass
class Transcript:
    messages: list = field(default_factory=list)
    _round: int = 0

    def new_round(self) -> int:
        self._round += 1
        return self._round

    def up(self, rnd, kind, count, client, layer=None):
        self.messages.append(Message(rnd, "up", kind, int(count), layer, client))

    def down(self, rnd, kind, count, layer=None):
        self.messages.append(Message(rnd, "down", kind, int(count), layer, None))

    @property
    def rounds(self) -> int:
        return len({m.round for m in self.messages})

    @property
    def total_bytes(self) -> int:
        return sum(m.nbytes for m in self.messages)

    def layer_rounds(self) -> int:
        return len({m.round for m in self.messages if m.layer is not None})

    def layer_bytes(self) -> int:
        return sum(m.nbytes for m in self.messages if m.layer is not None)


@dataclass(frozen=True)
class SchemeConfig:
    scheme: Scheme = Scheme.FEDTAN
    local_steps: int = 5
    iterations: int = 400
    lr: float = 0.5
    lr_after_switch: float | None = None
    switch_iteration: int | None = None
    batch_size: int | None = 128  # None: full local dataset every step
    momentum: float = 0.1  # moving-average weight of the newest batch stats
    seed: int = 0
    workers: int = 1
    eval_every: int = 1
    timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.scheme is Scheme.FEDTAN_II:
            if self.switch_iteration is None:
                raise ValueError("fedtan2 needs switch_iteration (M)")
            if self.iterations and not self.switch_iteration < self.iterations:
                raise ValueError("fedtan2 needs switch_iteration < iterations")
        if self.switch_iteration is not None and self.switch_iteration < 0:
            raise ValueError("switch_iteration must be >= 0")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for 1-based ``iteration``."""
        if (self.switch_iteration is not None and self.lr_after_switch is not None
                and iteration > self.switch_iteration):
            return self.lr_after_switch
        return self.lr

    def synced(self, iteration: int) -> bool:
        """Whether the first local step uses layer-wise aggregation."""
        if self.scheme in (Scheme.FEDTAN, Scheme.FEDAVG_ALG2):
            return True
        if self.scheme is Scheme.FEDTAN_II:
            return iteration <= self.switch_iteration
        return False


# --------------------------------------------------------------------------
# State
# --------------------------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    data: LabeledDataset
    params: ModelParams  # local w_i; params.stats holds the moving averages
    rng: np.random.Generator
    batch_size: int | None = None

    def sample_batch(self):
        n = len(self.data)
        if self.batch_size is None or self.batch_size >= n:
            return self.data.samples, self.data.labels
        idx = self.rng.choice(n, size=self.batch_size, replace=False)
        return self.data.samples[idx], self.data.labels[idx]


@dataclass
class ServerState:
    params: ModelParams
    weights: np.ndarray
    scheme: Scheme
    iteration: int = 0


def weighted_sum(arrays, weights):
    """Fixed-order weighted sum (deterministic reduction)."""
    total = weights[0] * arrays[0]
    for w, a in zip(weights[1:], arrays[1:]):
        total = total + w * a
    return total


# --------------------------------------------------------------------------
# Local updates
# --------------------------------------------------------------------------

def local_update_plain(client: ClientState, spec: NetworkSpec, steps: int, lr: float,
                       momentum: float, frozen_stats=None) -> list[float]:
    """``steps`` local gradient-descent steps on the client's own batches.

    Each step uses batch statistics and refreshes the moving averages. With
    ``frozen_stats`` the BN layers normalize with those constants instead,
    no gradient flows through the statistics and the moving averages stay
    put.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    losses = []
    for _ in range(steps):
        x, y = client.sample_batch()
        if frozen_stats is None:
            _, cache = model_forward(spec, client.params, x)
            loss, grads, _ = model_backward(spec, client.params, cache, y)
            moving = update_moving_average(client.params.stats, cache.batch_stats, momentum)
        else:
            _, cache = model_forward(spec, client.params, x, list(frozen_stats))
            zero = [BnStatGrads(np.zeros_like(s.mean), np.zeros_like(s.mean))
                    for s in frozen_stats]
            loss, grads, _ = model_backward(spec, client.params, cache, y, zero)
            moving = client.params.stats
        client.params = apply_gradient(client.params, grads, lr).with_stats(moving)
        losses.append(loss)
    return losses


def _check_lockstep(clients, weights, per_client):
    if len(clients) != len(weights) or any(len(p) != len(clients) for p in per_client):
        raise ProtocolError("every client must take part in every aggregation")


def fedtan_forward_sync(spec: NetworkSpec, clients: Sequence[ClientState], weights,
                        batches, transcript: Transcript | None = None):
    """Forward pass with layer-wise aggregation of batch means and variances.

    For each BN layer in order: clients upload their local means; the server
    returns the weighted mean; clients compute their variance around that
    global mean and upload it; the server returns the weighted variance;
    clients normalize with the global pair. Returns one cache per client.
    """
    weights = np.asarray(weights, dtype=float)
    _check_lockstep(clients, weights, [batches])
    ref = clients[0].params.gradient_vector()
    for c in clients[1:]:
        if not np.array_equal(c.params.gradient_vector(), ref):
            raise ProtocolError("clients must start the synced step from the same model")
    gens = [forward_steps(spec, c.params, x) for c, (x, _) in zip(clients, batches)]
    caches = [None] * len(clients)
    pending = [next(g, None) for g in gens]
    for layer in range(spec.num_bn):
        ys = []
        for i, step in enumerate(pending):
            if step is None or step[0] != layer:
                raise ProtocolError(f"client {i} is not waiting at BN layer {layer}")
            ys.append(step[1])
        feats = ys[0].shape[1]
        rnd = transcript.new_round() if transcript else None
        means = [kernels.column_mean(y) for y in ys]
        if transcript:
            for c in clients:
                transcript.up(rnd, Kind.LAYER_MEAN_UP, feats, c.client_id, layer)
            transcript.down(rnd, Kind.LAYER_MEAN_DOWN, feats, layer)
        global_mean = weighted_sum(means, weights)
        rnd = transcript.new_round() if transcript else None
        variances = [kernels.centered_variance(y, global_mean) for y in ys]
        if transcript:
            for c in clients:
                transcript.up(rnd, Kind.LAYER_VAR_UP, feats, c.client_id, layer)
            transcript.down(rnd, Kind.LAYER_VAR_DOWN, feats, layer)
        synced = BnStats(global_mean, weighted_sum(variances, weights))
        for i, g in enumerate(gens):
            try:
                pending[i] = g.send(synced)
            except StopIteration as stop:
                pending[i] = None
                caches[i] = stop.value
    for i, g in enumerate(gens):
        if caches[i] is None:
            try:
                next(g)
            except StopIteration as stop:
                caches[i] = stop.value
            else:
                raise ProtocolError("forward pass did not finish")
    return caches


def fedtan_backward_sync(spec: NetworkSpec, clients: Sequence[ClientState], weights,
                         caches, labels, transcript: Transcript | None = None,
                         sync: bool = True):
    """Backward pass with layer-wise aggregation of the stat grads.

    From the last BN layer to the first, clients upload their mean and
    variance gradients (computed with the already-synchronized gradients of
    later layers), the server returns the weighted averages and the clients
    continue backpropagation with them. With ``sync=False`` the plain local
    backward pass runs instead (forward-only aggregation).

    Returns ``(losses, grads, stat_grads)`` lists, one entry per client.
    """
    weights = np.asarray(weights, dtype=float)
    _check_lockstep(clients, weights, [caches, labels])
    if not sync:
        out = [model_backward(spec, c.params, cache, y)
               for c, cache, y in zip(clients, caches, labels)]
        return [o[0] for o in out], [o[1] for o in out], [o[2] for o in out]
    gens = [backward_steps(spec, c.params, cache, y)
            for c, cache, y in zip(clients, caches, labels)]
    results = [None] * len(clients)
    pending = [next(g, None) for g in gens]
    for layer in reversed(range(spec.num_bn)):
        local = []
        for i, step in enumerate(pending):
            if step is None or step[0] != layer:
                raise ProtocolError(f"client {i} is not waiting at BN layer {layer}")
            local.append(step[1])
        feats = local[0].d_mean.shape[0]
        if transcript:
            rnd = transcript.new_round()
            for c in clients:
                transcript.up(rnd, Kind.LAYER_STAT_GRAD_UP, 2 * feats, c.client_id, layer)
            transcript.down(rnd, Kind.LAYER_STAT_GRAD_DOWN, 2 * feats, layer)
        avg = BnStatGrads(weighted_sum([s.d_mean for s in local], weights),
                          weighted_sum([s.d_variance for s in local], weights))
        for i, g in enumerate(gens):
            try:
                pending[i] = g.send(avg)
            except StopIteration as stop:
                pending[i] = None
                results[i] = stop.value
    for i, g in enumerate(gens):
        if results[i] is None:
            try:
                next(g)
            except StopIteration as stop:
                results[i] = stop.value
    return [r[0] for r in results], [r[1] for r in results], [r[2] for r in results]


# --------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------

def _average_dense(models, weights):
    return [DenseLayerParams(weighted_sum([m.dense[k].weights for m in models], weights),
                             weighted_sum([m.dense[k].bias for m in models], weights))
            for k in range(len(models[0].dense))]


def _average_bn(models, weights):
    from .nn import BnLayerParams
    return [BnLayerParams(weighted_sum([m.bn[k].gamma for m in models], weights),
                          weighted_sum([m.bn[k].beta for m in models], weights),
                          models[0].bn[k].epsilon)
            for k in range(len(models[0].bn))]


def _average_stats(models, weights):
    return [BnStats(weighted_sum([m.stats[k].mean for m in models], weights),
                    weighted_sum([m.stats[k].variance for m in models], weights))
            for k in range(len(models[0].stats))]


def aggregate(scheme: Scheme, global_params: ModelParams, models, weights) -> ModelParams:
    """New global model from the uploaded local models."""
    dense = _average_dense(models, weights)
    if scheme is Scheme.FEDBN:
        return ModelParams(dense, global_params.bn, global_params.stats)
    bn = _average_bn(models, weights)
    if scheme is Scheme.SILOBN:
        return ModelParams(dense, bn, global_params.stats)
    return ModelParams(dense, bn, _average_stats(models, weights))


def exchanged_count(scheme: Scheme, params: ModelParams) -> int:
    """Scalars in one model upload or broadcast."""
    dense = sum(d.weights.size + d.bias.size for d in params.dense)
    if scheme is Scheme.FEDBN:
        return dense
    if scheme is Scheme.SILOBN:
        return params.num_gradient_params
    return params.num_gradient_params + params.num_stat_params


def personalize(scheme: Scheme, global_params: ModelParams, local: ModelParams) -> ModelParams:
    """The model a client holds after receiving the global broadcast."""
    if scheme is Scheme.FEDBN:
        return ModelParams(global_params.dense, local.bn, local.stats)
    if scheme is Scheme.SILOBN:
        return ModelParams(global_params.dense, global_params.bn, local.stats)
    return global_params


# --------------------------------------------------------------------------
# Rounds
# --------------------------------------------------------------------------

def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def run_round(server: ServerState, clients: list[ClientState], spec: NetworkSpec,
              config: SchemeConfig, transcript: Transcript | None = None) -> float:
    """One iteration: broadcast, E local steps, upload, aggregate.

    Mutates ``server`` and ``clients``; returns the weighted training loss
    averaged over the local steps.
    """
    if server.scheme is not config.scheme:
        raise ValueError(f"server runs {server.scheme.value}, config says {config.scheme.value}")
    if len(clients) != len(server.weights):
        raise ProtocolError("client count does not match the server's weights")
    r = server.iteration + 1
    lr = config.lr_at(r)
    scheme = config.scheme
    communicate = scheme is not Scheme.CENTRALIZED and transcript is not None
    # after the switch the global stats are S_M and stay fixed
    frozen = server.params.stats \
        if scheme is Scheme.FEDTAN_II and r > config.switch_iteration else None
    payload = exchanged_count(scheme, server.params)

    model_round = transcript.new_round() if communicate else None
    if communicate:
        transcript.down(model_round, Kind.GLOBAL_MODEL, payload)
    for c in clients:
        c.params = personalize(scheme, server.params, c.params)

    losses = [[] for _ in clients]
    remaining = config.local_steps
    if config.synced(r):
        batches = [c.sample_batch() for c in clients]
        caches = fedtan_forward_sync(spec, clients, server.weights, batches,
                                     transcript if communicate else None)
        step_losses, grads, _ = fedtan_backward_sync(
            spec, clients, server.weights, caches, [b[1] for b in batches],
            transcript if communicate else None,
            sync=scheme is not Scheme.FEDAVG_ALG2)
        for c, cache, g, loss, acc in zip(clients, caches, grads, step_losses, losses):
            moving = update_moving_average(c.params.stats, cache.batch_stats, config.momentum)
            c.params = apply_gradient(c.params, g, lr).with_stats(moving)
            acc.append(loss)
        remaining -= 1

    if remaining:
        def work(c):
            return local_update_plain(c, spec, remaining, lr, config.momentum, frozen)
        for acc, ls in zip(losses, _map(work, clients, config.workers)):
            acc.extend(ls)

    if communicate:
        for c in clients:
            transcript.up(model_round, Kind.LOCAL_MODEL, payload, c.client_id)
    server.params = aggregate(scheme, server.params, [c.params for c in clients], server.weights)
    if frozen is not None:
        server.params = server.params.with_stats(frozen)
    server.iteration = r
    return float(np.dot(server.weights, [np.mean(l) for l in losses]))


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    scheme: str
    train_loss: float
    test_accuracy: float
    cum_bytes: int
    cum_rounds: int
    wall_seconds: float


class Simulation:
    """Server plus clients for one scheme, advanced one iteration at a time."""

    def __init__(self, spec: NetworkSpec, client_data: Sequence[LabeledDataset],
                 config: SchemeConfig, weights=None, init: ModelParams | None = None,
                 epsilon: float = 1e-5):
        self.spec = spec
        self.config = config
        if weights is None:
            sizes = np.array([len(d) for d in client_data], dtype=float)
            weights = sizes / sizes.sum()
        weights = np.asarray(weights, dtype=float)
        if config.scheme is Scheme.CENTRALIZED:
            client_data = [LabeledDataset.concatenate(list(client_data))]
            weights = np.ones(1)
        self.params0 = init if init is not None else init_params(spec, config.seed, epsilon)
        seeds = np.random.SeedSequence(config.seed).spawn(len(client_data))
        self.clients = [ClientState(i, d, self.params0, np.random.default_rng(s),
                                    config.batch_size)
                        for i, (d, s) in enumerate(zip(client_data, seeds))]
        self.server = ServerState(self.params0, weights, config.scheme)
        self.transcript = Transcript()

    def step(self) -> float:
        return run_round(self.server, self.clients, self.spec, self.config, self.transcript)

    def client_models(self) -> list[ModelParams]:
        return [personalize(self.config.scheme, self.server.params, c.params)
                for c in self.clients]

    def evaluate(self, test: LabeledDataset) -> float:
        from .comm import evaluate
        if self.config.scheme in (Scheme.FEDBN, Scheme.SILOBN):
            return float(np.mean([evaluate(m, self.spec, test)[0]
                                  for m in self.client_models()]))
        return evaluate(self.server.params, self.spec, test)[0]

    def run(self, test: LabeledDataset | None = None,
            callback: Callable[[IterationRecord], None] | None = None) -> list[IterationRecord]:
        history = []
        start = time.perf_counter()
        cfg = self.config
        for r in range(1, cfg.iterations + 1):
            loss = self.step()
            acc = float("nan")
            if test is not None and (r % cfg.eval_every == 0 or r == cfg.iterations):
                acc = self.evaluate(test)
            rec = IterationRecord(
                r, cfg.scheme.value, loss, acc, self.transcript.total_bytes,
                self.transcript.rounds,
                time.perf_counter() - start if cfg.timing else 0.0)
            history.append(rec)
            if callback:
                callback(rec)
        return history


def run_experiment(config: SchemeConfig, spec: NetworkSpec, client_data, test=None,
                   weights=None, init=None, callback=None):
    """Run ``config.iterations`` iterations; returns ``(history, simulation)``."""
    sim = Simulation(spec, client_data, config, weights=weights, init=init)
    history = sim.run(test, callback)
    return history, sim
