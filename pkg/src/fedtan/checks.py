"""Fast self-checks run by ``fedtan verify``.

Each check returns a ``CheckResult``; sizes are kept small so the whole
suite finishes in seconds.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .comm import (MB, RESNET20_GN_PARAMS, ModelSizeSpec, cumulative_accounting,
                   per_iteration_bytes, resnet20_size_spec)
from .datasets import LabeledDataset, partition_by_label, synth_gaussian
from .nn import (BnStats, init_params, mlp_spec, model_backward,
                 model_forward, update_moving_average)
from .oracle import check_equivalence, estimate_deviation, finite_difference_check
from .sim import ClientState, Scheme, SchemeConfig, fedtan_backward_sync, fedtan_forward_sync


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_net(rng):
    depth = int(rng.integers(1, 4))
    hidden = [int(h) for h in rng.integers(2, 9, size=depth)]
    in_dim, out_dim = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    return mlp_spec(in_dim, hidden, out_dim), in_dim, out_dim


def _random_params(spec, rng):
    params = init_params(spec, rng)
    vec = params.gradient_vector()
    return params.with_gradient_vector(vec + 0.3 * rng.normal(size=vec.size))


def check_gradients(trials: int = 10, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        spec, in_dim, out_dim = _random_net(rng)
        params = _random_params(spec, rng)
        batch = int(rng.integers(2, 17))
        x = rng.normal(size=(batch, in_dim))
        y = rng.integers(0, out_dim, size=batch)
        for target in ("weights", "stats"):
            worst = max(worst, finite_difference_check(spec, params, x, y, target=target))
    return CheckResult("gradients vs finite differences", worst < tol,
                       f"max relative error {worst:.2e}")


def _sync_clients(spec, params, shards):
    clients = [ClientState(i, d, params, np.random.default_rng(i)) for i, d in enumerate(shards)]
    sizes = np.array([len(d) for d in shards], float)
    return clients, sizes / sizes.sum()


def check_aggregation(trials: int = 10, seed: int = 1, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        spec, in_dim, out_dim = _random_net(rng)
        params = _random_params(spec, rng)
        n = int(rng.integers(2, 6))
        sizes = rng.integers(1, 20, size=n)
        x = rng.normal(size=(int(sizes.sum()), in_dim)) * 2 + 1
        y = rng.integers(0, out_dim, size=x.shape[0])
        data = LabeledDataset(x, y, out_dim)
        cuts = np.cumsum(sizes)[:-1]
        shards = [data.subset(ix) for ix in np.split(np.arange(len(data)), cuts)]
        clients, weights = _sync_clients(spec, params, shards)
        caches = fedtan_forward_sync(spec, clients, weights,
                                     [(d.samples, d.labels) for d in shards])
        _, union = model_forward(spec, params, x)
        for c in caches:
            for got, want in zip(c.batch_stats, union.batch_stats):
                worst = max(worst, np.max(np.abs(got.mean - want.mean)),
                            np.max(np.abs(got.variance - want.variance)))
    return CheckResult("synced stats equal union stats", worst < tol,
                       f"max abs difference {worst:.2e}")


def _two_class_shards(seed=0, per_class=20):
    data = synth_gaussian(2, per_class, 4, seed, separation=1.5)
    return partition_by_label(data, 2, 1, seed).split(data)


def check_oracle_equivalence(iterations: int = 20, tol: float = 1e-10) -> CheckResult:
    shards = _two_class_shards()
    spec = mlp_spec(4, [6], 2)
    common = dict(local_steps=1, batch_size=None, lr=0.2, seed=3, iterations=iterations)
    rep = check_equivalence(spec, shards, SchemeConfig(Scheme.FEDTAN, **common),
                            SchemeConfig(Scheme.CENTRALIZED, **common), iterations)
    return CheckResult("fedtan matches centralized training", rep.worst < tol,
                       f"max parameter difference {rep.worst:.2e}")


def check_fedavg_diverges(iterations: int = 10, threshold: float = 1e-3) -> CheckResult:
    shards = _two_class_shards()
    spec = mlp_spec(4, [6], 2)
    common = dict(local_steps=1, batch_size=None, lr=0.2, seed=3, iterations=iterations)
    rep = check_equivalence(spec, shards, SchemeConfig(Scheme.FEDAVG_BN, **common),
                            SchemeConfig(Scheme.CENTRALIZED, **common), iterations)
    return CheckResult("fedavg+bn departs from centralized training",
                       rep.worst > threshold, f"max parameter difference {rep.worst:.2e}")


def check_forward_only_sync(threshold: float = 1e-6) -> CheckResult:
    shards = _two_class_shards()
    spec = mlp_spec(4, [6], 2)
    params = init_params(spec, 3)
    union = LabeledDataset.concatenate(shards)
    _, cache = model_forward(spec, params, union.samples)
    _, central, _ = model_backward(spec, params, cache, union.labels)
    clients, weights = _sync_clients(spec, params, shards)
    batches = [(d.samples, d.labels) for d in shards]
    caches = fedtan_forward_sync(spec, clients, weights, batches)
    _, grads, _ = fedtan_backward_sync(spec, clients, weights, caches,
                                       [b[1] for b in batches], sync=False)
    avg = sum(w * g.vector() for w, g in zip(weights, grads))
    gap = float(np.linalg.norm(avg - central.vector()))
    return CheckResult("forward-only sync leaves a gradient gap", gap > threshold,
                       f"gradient gap {gap:.2e}")


def check_deviation() -> CheckResult:
    spec = mlp_spec(4, [6], 2)
    params = init_params(spec, 5)
    shards = _two_class_shards()
    same = [shards[0], shards[0]]
    b_same = estimate_deviation(params, same, spec).deviation
    b_split = estimate_deviation(params, shards, spec).deviation
    plain = mlp_spec(4, [6], 2, batch_norm=False)
    b_plain = estimate_deviation(init_params(plain, 5), shards, plain).deviation
    ok = np.all(b_same < 1e-20) and np.all(b_split > 0) and np.all(b_plain == 0)
    return CheckResult("deviation estimator", bool(ok),
                       f"identical {b_same.max():.1e}, split {b_split.min():.1e}, "
                       f"no BN {b_plain.max():.1e}")


def check_accounting() -> CheckResult:
    size = resnet20_size_spec(5)
    got = (round(per_iteration_bytes(size, "fedtan") / MB, 4),
           round(per_iteration_bytes(size, "fedavg_bn") / MB, 4),
           round(per_iteration_bytes(ModelSizeSpec(RESNET20_GN_PARAMS, 0, 5), "fedavg") / MB, 4))
    frac19 = cumulative_accounting(10, size, "fedtan", 19).extra_round_fraction
    frac1 = cumulative_accounting(10, size, "fedtan", 1).extra_round_fraction
    ok = got == (6.2679, 6.2049, 6.1734) and round(frac19 * 100, 2) == 98.28 \
        and frac1 == 0.75
    return CheckResult("communication accounting", ok,
                       f"{got[0]} / {got[1]} / {got[2]} MB, extra rounds "
                       f"{frac19:.2%} (L=19), {frac1:.0%} (L=1)")


def check_moving_average(steps: int = 100, rho: float = 0.1) -> CheckResult:
    rng = np.random.default_rng(0)
    s0 = BnStats(rng.normal(size=4), rng.random(4))
    target = BnStats(rng.normal(size=4), rng.random(4))
    moving, worst = [s0], 0.0
    for t in range(1, steps + 1):
        moving = update_moving_average(moving, [target], rho)
        decay = (1 - rho) ** t
        want_mean = decay * s0.mean + (1 - decay) * target.mean
        want_var = decay * s0.variance + (1 - decay) * target.variance
        worst = max(worst, np.max(np.abs(moving[0].mean - want_mean)),
                    np.max(np.abs(moving[0].variance - want_var)))
    return CheckResult("moving-average closed form", worst < 1e-12,
                       f"max deviation {worst:.2e}")


ALL_CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_gradients, check_aggregation, check_oracle_equivalence, check_fedavg_diverges,
    check_forward_only_sync, check_deviation, check_accounting, check_moving_average)


def run_all() -> list[CheckResult]:
    results = []
    for check in ALL_CHECKS:
        try:
            results.append(check())
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(check.__name__, False, f"error: {exc!r}"))
    return results
