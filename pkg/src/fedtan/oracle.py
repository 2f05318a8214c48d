"""Centralized reference, finite differences and gradient-deviation probes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import LabeledDataset
from .nn import (BnStats, ModelParams, NetworkSpec, apply_gradient,
                 loss_and_grads, loss_value, model_backward, model_forward,
                 update_moving_average)
from .sim import SchemeConfig, Simulation


def centralized_step(spec: NetworkSpec, params: ModelParams, data: LabeledDataset,
                     lr: float, momentum: float = 0.1) -> ModelParams:
    """One full-batch gradient step over ``data`` with batch statistics."""
    _, grads, cache, _ = loss_and_grads(spec, params, data.samples, data.labels)
    moving = update_moving_average(params.stats, cache.batch_stats, momentum)
    return apply_gradient(params, grads, lr).with_stats(moving)


# --------------------------------------------------------------------------
# Gradient deviation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DeviationReport:
    deviation: np.ndarray      # b_i: local stats/stat grads vs global ones
    heterogeneity: np.ndarray  # v_i: client gradient vs global gradient, both global stats


def union_stats_and_grads(spec, params, client_data, weights):
    """Global batch stats and stat grads of the weighted union objective.

    Clients contribute in proportion to ``weights``; with weights equal to
    the size shares this is plain training on the concatenated data.
    """
    union = LabeledDataset.concatenate(list(client_data))
    _, cache = model_forward(spec, params, union.samples)
    sizes = np.array([len(d) for d in client_data], dtype=float)
    if not np.allclose(weights, sizes / sizes.sum(), rtol=0, atol=1e-15):
        raise ValueError("union oracle requires size-proportional weights")
    _, grads, stat_grads = model_backward(spec, params, cache, union.labels)
    return cache.batch_stats, stat_grads, grads


def client_gradients(spec, params, data, stats=None, stat_grads=None) -> np.ndarray:
    stats_mode = "batch" if stats is None else list(stats)
    _, grads, _, _ = loss_and_grads(spec, params, data.samples, data.labels,
                                    stats_mode, stat_grads)
    return grads.vector()


def estimate_deviation(params: ModelParams, client_data: Sequence[LabeledDataset],
                       spec: NetworkSpec, weights=None) -> DeviationReport:
    """Squared gradient deviation caused by local statistics, per client.

    Each client's full-shard gradient is computed twice: with its own stats
    and stat grads, and with the union's stats and stat grads injected.
    """
    sizes = np.array([len(d) for d in client_data], dtype=float)
    weights = sizes / sizes.sum() if weights is None else np.asarray(weights, float)
    stats, stat_grads, global_grads = union_stats_and_grads(spec, params, client_data, weights)
    g_global = global_grads.vector()
    b, v = [], []
    for data in client_data:
        local = client_gradients(spec, params, data)
        injected = client_gradients(spec, params, data, stats, stat_grads)
        b.append(float(np.sum((local - injected) ** 2)))
        v.append(float(np.sum((injected - g_global) ** 2)))
    return DeviationReport(np.array(b), np.array(v))


# --------------------------------------------------------------------------
# Trajectory equivalence
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EquivalenceReport:
    max_diff: np.ndarray  # per iteration, max |params_a - params_b|

    @property
    def worst(self) -> float:
        return float(self.max_diff.max()) if self.max_diff.size else 0.0

    def first_exceeding(self, tol: float) -> int | None:
        hits = np.flatnonzero(self.max_diff > tol)
        return int(hits[0]) + 1 if hits.size else None


def check_equivalence(spec: NetworkSpec, client_data, config_a: SchemeConfig,
                      config_b: SchemeConfig, iterations: int,
                      weights=None) -> EquivalenceReport:
    """Run two schemes from the same initialization and compare the global
    models (gradient parameters and moving-average stats) every iteration."""
    if config_a.seed != config_b.seed:
        raise ValueError("configs must share a seed")
    a = Simulation(spec, client_data, config_a, weights)
    b = Simulation(spec, client_data, config_b, weights, init=a.params0)
    diffs = []
    for _ in range(iterations):
        a.step()
        b.step()
        diffs.append(np.max(np.abs(a.server.params.vector() - b.server.params.vector())))
    return EquivalenceReport(np.array(diffs))


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------

def gradient_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest elementwise relative error; differences within ``floor``
    count as agreement."""
    analytic = np.asarray(analytic, float).ravel()
    numeric = np.asarray(numeric, float).ravel()
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


def check_function_gradient(f, grad, x, step: float = 1e-5, floor: float = 1e-8) -> float:
    """Relative error of ``grad(x)`` against central differences of ``f``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    return gradient_error(grad(x), central_difference(f, x, step), floor)


def central_difference(f, x: np.ndarray, step) -> np.ndarray:
    """Central differences of scalar ``f``; ``step`` may be per-entry."""
    x = np.array(x, dtype=float)
    steps = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    out = np.empty_like(x)
    for k in range(x.size):
        orig, h = x.flat[k], steps.flat[k]
        x.flat[k] = orig + h
        fp = f(x)
        x.flat[k] = orig - h
        fm = f(x)
        x.flat[k] = orig
        out.flat[k] = (fp - fm) / (2 * h)
    return out


def finite_difference_check(spec: NetworkSpec, params: ModelParams, x, labels,
                            step: float = 1e-5, target: str = "weights",
                            floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``target`` selects what is perturbed: ``"weights"`` (all gradient
    parameters including gamma and beta, with batch statistics recomputed
    per evaluation) or ``"stats"`` (one BN layer's mean and variance at a
    time, fed through the override path; this checks the stat grads).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if target == "weights":
        _, grads, _, _ = loss_and_grads(spec, params, x, labels)
        w0 = params.gradient_vector()
        numeric = central_difference(
            lambda w: loss_value(spec, params.with_gradient_vector(w), x, labels), w0, step)
        return gradient_error(grads.vector(), numeric, floor)
    if target in ("stats", "stat-grads"):
        _, cache = model_forward(spec, params, x)
        stats = cache.batch_stats
        _, _, stat_grads = model_backward(spec, params, cache, labels)
        worst = 0.0
        # one layer at a time: the other layers keep computing batch stats,
        # which is the dependence the analytic stat grads account for
        for layer, (s, g) in enumerate(zip(stats, stat_grads)):
            n = s.mean.size

            def f(v, layer=layer, n=n):
                mode = [None] * spec.num_bn
                mode[layer] = BnStats(v[:n].copy(), v[n:].copy())
                return loss_value(spec, params, x, labels, mode)

            # variance entries far below 1 get a proportionally smaller step,
            # otherwise (var + eps) ** -0.5 curves too much within one step
            scale = np.minimum(1.0, s.variance + params.bn[layer].epsilon)
            steps = np.concatenate([np.full(n, step), step * scale])
            numeric = central_difference(f, np.concatenate([s.mean, s.variance]), steps)
            analytic = np.concatenate([g.d_mean, g.d_variance])
            worst = max(worst, gradient_error(analytic, numeric, floor))
        return worst
    raise ValueError(f"unknown target {target!r}")
