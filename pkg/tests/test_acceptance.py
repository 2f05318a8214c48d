"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line (also collected into the pytest
terminal summary) and then asserts the criterion.
"""
import time

import numpy as np
import pytest

from fedtan.cli import main as cli_main
from fedtan.comm import ModelSizeSpec, cumulative_accounting, resnet20_size_spec
from fedtan.datasets import (LabeledDataset, load_mnist, partition_by_label, partition_iid,
                             random_subset, synth_gaussian)
from fedtan.nn import (BnStats, init_params, mlp_spec, mnist_spec, model_backward,
                       model_forward)
from fedtan.oracle import (check_equivalence, client_gradients, estimate_deviation,
                           finite_difference_check, union_stats_and_grads)
from fedtan.sim import (ClientState, Scheme, SchemeConfig, Simulation, fedtan_backward_sync,
                        fedtan_forward_sync, local_update_plain)

from conftest import MNIST_DIR, report_criterion, requires_mnist


def _clients(params, shards):
    return [ClientState(i, d, params, np.random.default_rng(i)) for i, d in enumerate(shards)]


def _size_weights(shards):
    sizes = np.array([len(s) for s in shards], float)
    return sizes / sizes.sum()


def _two_class_shards():
    data = synth_gaussian(2, 25, 5, seed=11, separation=1.5)
    return partition_by_label(data, 2, 1, seed=11).split(data)


# -- 1 ----------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_w = worst_s = 0.0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        hidden = [int(h) for h in rng.integers(1, 9, size=depth)]
        in_dim, out_dim = int(rng.integers(1, 9)), int(rng.integers(2, 9))
        spec = mlp_spec(in_dim, hidden, out_dim)
        params = init_params(spec, rng)
        params = params.with_gradient_vector(
            params.gradient_vector() + 0.3 * rng.normal(size=params.num_gradient_params))
        batch = int(rng.integers(2, 17))
        x = rng.normal(size=(batch, in_dim))
        y = rng.integers(0, out_dim, size=batch)
        worst_w = max(worst_w, finite_difference_check(spec, params, x, y, 1e-5, "weights"))
        worst_s = max(worst_s, finite_difference_check(spec, params, x, y, 1e-5, "stats"))
    elapsed = time.perf_counter() - start
    ok = worst_w < 1e-4 and worst_s < 1e-4 and elapsed < 60
    report_criterion(1, "gradient correctness", ok,
                     f"max rel err weights/gamma/beta {worst_w:.2e}, stat grads "
                     f"{worst_s:.2e} over 100 networks in {elapsed:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------------

def test_criterion_2_aggregation_exactness():
    rng = np.random.default_rng(77)
    worst = worst_identity = 0.0
    for _ in range(50):
        hidden = [int(h) for h in rng.integers(1, 9, size=int(rng.integers(1, 4)))]
        in_dim = int(rng.integers(1, 7))
        spec = mlp_spec(in_dim, hidden, 3)
        params = init_params(spec, rng)
        n = int(rng.integers(2, 6))
        sizes = rng.integers(1, 40, size=n)
        shards = [LabeledDataset(rng.normal(loc=rng.normal(scale=3), size=(int(s), in_dim)),
                                 rng.integers(0, 3, size=int(s)), 3) for s in sizes]
        weights = _size_weights(shards)
        clients = _clients(params, shards)
        caches = fedtan_forward_sync(spec, clients, weights,
                                     [(s.samples, s.labels) for s in shards])
        union = LabeledDataset.concatenate(shards)
        _, central = model_forward(spec, params, union.samples)
        for cache in caches:
            for got, want in zip(cache.batch_stats, central.batch_stats):
                worst = max(worst, np.max(np.abs(got.mean - want.mean)),
                            np.max(np.abs(got.variance - want.variance)))
        # variance taken around the reset (global) mean decomposes into the
        # local variances plus the spread of the local means
        for layer, want in enumerate(central.batch_stats):
            ys = [c.bn[layer].y for c in caches]
            mu = [y.mean(axis=0) for y in ys]
            around_global = sum(w * ((y - want.mean) ** 2).mean(axis=0)
                                for w, y in zip(weights, ys))
            decomposed = sum(w * (y.var(axis=0) + (m - want.mean) ** 2)
                             for w, y, m in zip(weights, ys, mu))
            worst_identity = max(worst_identity,
                                 np.max(np.abs(around_global - want.variance)),
                                 np.max(np.abs(decomposed - want.variance)))
    ok = worst < 1e-12 and worst_identity < 1e-12
    report_criterion(2, "aggregation exactness", ok,
                     f"synced vs union stats {worst:.2e}, variance identity "
                     f"{worst_identity:.2e} over 50 configurations")
    assert ok


# -- 3 ----------------------------------------------------------------------------

def test_criterion_3_oracle_equivalence():
    start = time.perf_counter()
    shards = _two_class_shards()
    spec = mlp_spec(5, [8, 6], 2)
    kw = dict(local_steps=1, batch_size=None, lr=0.3, seed=5)
    fedtan = check_equivalence(spec, shards, SchemeConfig(Scheme.FEDTAN, **kw),
                               SchemeConfig(Scheme.CENTRALIZED, **kw), 50)
    fedavg = check_equivalence(spec, shards, SchemeConfig(Scheme.FEDAVG_BN, **kw),
                               SchemeConfig(Scheme.CENTRALIZED, **kw), 10)
    elapsed = time.perf_counter() - start
    ok = fedtan.worst < 1e-10 and fedavg.worst > 1e-3 and elapsed < 60
    report_criterion(3, "oracle equivalence", ok,
                     f"fedtan vs centralized max diff {fedtan.worst:.2e} over 50 "
                     f"iterations; fedavg+bn {fedavg.worst:.2e} within 10 iterations "
                     f"(first > 1e-3 at {fedavg.first_exceeding(1e-3)}); {elapsed:.1f}s")
    assert ok


# -- 4 ----------------------------------------------------------------------------

def test_criterion_4_necessity_ablation():
    shards = _two_class_shards()
    spec = mlp_spec(5, [8, 6], 2)
    params = init_params(spec, 9)
    weights = _size_weights(shards)
    union = LabeledDataset.concatenate(shards)
    _, cache = model_forward(spec, params, union.samples)
    _, central, _ = model_backward(spec, params, cache, union.labels)
    central = central.vector()
    stats, stat_grads, _ = union_stats_and_grads(spec, params, shards, weights)

    def first_step(sync):
        clients = _clients(params, shards)
        batches = [(s.samples, s.labels) for s in shards]
        caches = fedtan_forward_sync(spec, clients, weights, batches)
        _, grads, _ = fedtan_backward_sync(spec, clients, weights, caches,
                                           [b[1] for b in batches], sync=sync)
        return [g.vector() for g in grads]

    fwd_only = first_step(sync=False)
    full = first_step(sync=True)
    vs_central = min(np.linalg.norm(g - central) for g in fwd_only)
    injected = [client_gradients(spec, params, s, stats, stat_grads) for s in shards]
    fwd_gap = max(np.linalg.norm(g - t) for g, t in zip(fwd_only, injected))
    full_gap = max(np.linalg.norm(g - t) for g, t in zip(full, injected))
    avg_gap = np.linalg.norm(sum(w * g for w, g in zip(weights, fwd_only)) - central)

    same = estimate_deviation(params, [shards[0]] * 3, spec).deviation
    split = estimate_deviation(params, shards, spec).deviation
    plain_spec = mlp_spec(5, [8, 6], 2, batch_norm=False)
    plain_params = init_params(plain_spec, 9)
    plain = np.concatenate([
        estimate_deviation(plain_params, shards, plain_spec).deviation,
        estimate_deviation(plain_params, [shards[0]] * 2, plain_spec).deviation])
    ok = (vs_central > 1e-6 and fwd_gap > 1e-6 and avg_gap > 1e-6 and full_gap < 1e-12
          and np.all(same < 1e-20) and np.all(split > 0) and np.all(plain == 0))
    report_criterion(4, "necessity ablation", ok,
                     f"forward-only: min |g_i - g_central| {vs_central:.2e}, "
                     f"max |g_i - g_i(global stats)| {fwd_gap:.2e} (full sync {full_gap:.1e}), "
                     f"|avg - g_central| {avg_gap:.2e}; b_i identical {same.max():.1e}, "
                     f"disjoint min {split.min():.2e}, no BN max {plain.max():.1e}")
    assert ok


# -- 5 ----------------------------------------------------------------------------

def test_criterion_5_communication_accounting(capsys):
    outputs = []
    for args in (["271098", "1376", "5", "fedtan"], ["271098", "1376", "5", "fedavg_bn"],
                 ["269722", "0", "5", "fedavg"]):
        assert cli_main(["comm", *args]) == 0
        outputs.append(capsys.readouterr().out)
    size = resnet20_size_spec()
    f19 = cumulative_accounting(100, size, "fedtan", 19).extra_round_fraction
    f1 = cumulative_accounting(100, ModelSizeSpec(23980, 60, 5), "fedtan", 1).extra_round_fraction
    found = [m in o for m, o in zip(("6.2679 MB", "6.2049 MB", "6.1734 MB"), outputs)]
    ok = all(found) and f"{f19:.2%}" == "98.28%" and f"{f1:.0%}" == "75%"
    report_criterion(5, "communication accounting", ok,
                     f"{' | '.join(o.split(':')[1].split('per')[0].strip() for o in outputs)}; "
                     f"extra rounds {f19:.2%} (L=19), {f1:.2%} (L=1)")
    assert ok


# -- 6 and 7 (MNIST) -----------------------------------------------------------------

MNIST_ITERATIONS = 400
SWITCH = 50


@pytest.fixture(scope="module")
def mnist_runs():
    """Final test accuracy and totals for every scheme on both partitions."""
    train = random_subset(load_mnist("train", MNIST_DIR), 6000, seed=0)
    test = load_mnist("test", MNIST_DIR)
    partitions = {"label_shard": partition_by_label(train, 5, 2, seed=0),
                  "iid": partition_iid(train, 5, seed=0)}
    spec = mnist_spec()
    results, start = {}, time.perf_counter()
    for pname, part in partitions.items():
        shards = part.split(train)
        schemes = list(Scheme) if pname == "iid" else \
            [Scheme.CENTRALIZED, Scheme.FEDTAN, Scheme.FEDAVG_BN, Scheme.FEDTAN_II]
        for scheme in schemes:
            extra = dict(switch_iteration=SWITCH, lr_after_switch=0.05) \
                if scheme is Scheme.FEDTAN_II else {}
            cfg = SchemeConfig(scheme, local_steps=5, iterations=MNIST_ITERATIONS, lr=0.5,
                               batch_size=128, momentum=0.1, seed=0,
                               eval_every=MNIST_ITERATIONS, **extra)
            sim = Simulation(spec, shards, cfg)
            history = sim.run(test)
            results[pname, scheme] = (history[-1].test_accuracy * 100,
                                      sim.transcript.rounds, sim.transcript.total_bytes)
    results["elapsed"] = time.perf_counter() - start
    results["stat_params"] = init_params(spec, 0).num_stat_params
    return results


@requires_mnist
@pytest.mark.slow
def test_criterion_6_mnist_experiment(mnist_runs):
    acc = {k: v[0] for k, v in mnist_runs.items() if isinstance(k, tuple)}
    central = acc["label_shard", Scheme.CENTRALIZED]
    fedtan = acc["label_shard", Scheme.FEDTAN]
    fedavg = acc["label_shard", Scheme.FEDAVG_BN]
    iid_central = acc["iid", Scheme.CENTRALIZED]
    iid_gaps = {s.value: acc["iid", s] - iid_central for s in Scheme if s is not Scheme.CENTRALIZED}
    checks = {
        "fedtan within 3 of centralized (k=2)": abs(fedtan - central) <= 3,
        "fedtan >= fedavg+bn + 5 (k=2)": fedtan - fedavg >= 5,
        "iid schemes within 3 of centralized": all(abs(g) <= 3 for g in iid_gaps.values()),
        "under 10 minutes": mnist_runs["elapsed"] < 600,
    }
    detail = (f"k=2: centralized {central:.2f}, fedtan {fedtan:.2f} "
              f"(gap {central - fedtan:.2f}), fedavg+bn {fedavg:.2f}; iid: centralized "
              f"{iid_central:.2f}, max |gap| {max(abs(g) for g in iid_gaps.values()):.2f}; "
              f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    report_criterion(6, "MNIST experiment", all(checks.values()), detail)
    assert all(checks.values()), detail


@requires_mnist
@pytest.mark.slow
def test_criterion_7_fedtan2(mnist_runs):
    acc_tan, rounds_tan, bytes_tan = mnist_runs["label_shard", Scheme.FEDTAN]
    acc_two, rounds_two, bytes_two = mnist_runs["label_shard", Scheme.FEDTAN_II]
    L, R, M, N = 1, MNIST_ITERATIONS, SWITCH, 5
    s = mnist_runs["stat_params"]
    want_rounds = (3 * L + 1) * M + (R - M)
    want_diff = 2 * s * (N + 1) * 4 * (R - M)
    checks = {
        "accuracy within 3 of fedtan": abs(acc_two - acc_tan) <= 3,
        "rounds": rounds_two == want_rounds,
        "bytes": bytes_tan - bytes_two == want_diff,
    }
    detail = (f"accuracy fedtan2 {acc_two:.2f} vs fedtan {acc_tan:.2f} "
              f"(diff {acc_two - acc_tan:+.2f}); rounds {rounds_two} (expected {want_rounds}); "
              f"byte difference {bytes_tan - bytes_two} (expected {want_diff}); "
              f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    report_criterion(7, "FedTAN-II", all(checks.values()), detail)
    assert all(checks.values()), detail


# -- 8 ----------------------------------------------------------------------------

def test_criterion_8_moving_average_law():
    rho, steps = 0.1, 100
    spec = mlp_spec(3, [4], 2)
    data = synth_gaussian(2, 6, 3, seed=1)
    params = init_params(spec, 2)
    s0 = BnStats(np.array([0.5, -2.0, 1.0, 0.0]), np.array([3.0, 0.1, 1.0, 2.0]))
    client = ClientState(0, data, params.with_stats([s0]), np.random.default_rng(0))
    _, cache = model_forward(spec, params, data.samples)
    target = cache.batch_stats[0]
    worst = 0.0
    for t in range(1, steps + 1):
        # lr 0 and the full dataset keep the batch statistics constant
        local_update_plain(client, spec, 1, 0.0, rho)
        got = client.params.stats[0]
        decay = (1 - rho) ** t
        worst = max(worst,
                    np.max(np.abs(got.mean - (decay * s0.mean + (1 - decay) * target.mean))),
                    np.max(np.abs(got.variance - (decay * s0.variance
                                                  + (1 - decay) * target.variance))))
    ok = worst < 1e-12
    report_criterion(8, "moving-average law", ok, f"max deviation {worst:.2e} over {steps} steps")
    assert ok
