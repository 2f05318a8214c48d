"""Communication accounting, evaluation and CSV export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import ModelParams, NetworkSpec, model_forward, softmax_cross_entropy

BYTES_PER_SCALAR = 4
MB = 2 ** 20
GB = 2 ** 30

CSV_COLUMNS = ("iteration", "scheme", "train_loss", "test_accuracy",
               "cum_bytes", "cum_rounds", "wall_seconds")


@dataclass(frozen=True)
class ModelSizeSpec:
    total_params: int  # every scalar in a full model exchange, stats included
    stat_params: int   # batch means plus batch variances over all BN layers
    clients: int

    def __post_init__(self):
        if self.total_params < 1 or self.clients < 1 or self.stat_params < 0:
            raise ValueError("parameter and client counts must be positive")
        if self.stat_params > self.total_params:
            raise ValueError("stat_params cannot exceed total_params")

    @classmethod
    def from_model(cls, params: ModelParams, clients: int) -> "ModelSizeSpec":
        return cls(params.num_gradient_params + params.num_stat_params,
                   params.num_stat_params, clients)


def resnet20_size_spec(clients: int = 5) -> ModelSizeSpec:
    """ResNet-20 with BN: 19 BN layers of 16 (x7), 32 (x6) and 64 (x6) channels."""
    stats = 2 * (16 * 7 + 32 * 6 + 64 * 6)
    return ModelSizeSpec(271098, stats, clients)


RESNET20_GN_PARAMS = 269722
RESNET20_BN_LAYERS = 19

# schemes whose per-iteration traffic depends only on (P, s, N)
_LAYER_SYNC_FACTOR = {"fedtan": 2, "fedavg_alg2": 1, "fedavg_bn": 0, "fedavg": 0,
                      "centralized": None}


def per_iteration_bytes(size: ModelSizeSpec, scheme: str, synced: bool = True) -> int:
    """Bytes exchanged in one iteration.

    A model exchange moves the full model to N clients and back (N uploads
    plus one broadcast). FedTAN additionally moves the statistics once per
    layer in the forward pass and their gradients once in the backward pass.
    ``synced=False`` gives a FedTAN-II iteration after the switch.
    """
    scheme = scheme.lower()
    if scheme == "fedtan2":
        scheme = "fedtan" if synced else "fedavg_bn"
    if scheme not in _LAYER_SYNC_FACTOR:
        raise ValueError(f"no closed-form accounting for scheme {scheme!r}")
    factor = _LAYER_SYNC_FACTOR[scheme]
    if factor is None:
        return 0
    links = size.clients + 1
    return (size.total_params + factor * size.stat_params) * links * BYTES_PER_SCALAR


def per_iteration_rounds(scheme: str, num_bn: int, synced: bool = True) -> int:
    scheme = scheme.lower()
    if scheme == "centralized":
        return 0
    if scheme == "fedtan" or (scheme == "fedtan2" and synced):
        return 3 * num_bn + 1
    if scheme == "fedavg_alg2":
        return 2 * num_bn + 1
    return 1


@dataclass(frozen=True)
class Accounting:
    total_bytes: int
    total_rounds: int
    extra_round_fraction: float
    extra_byte_fraction: float


def cumulative_accounting(iterations: int, size: ModelSizeSpec, scheme: str,
                          num_bn: int, switch_iteration: int | None = None) -> Accounting:
    """Totals over a run, and the share of rounds and bytes spent on
    layer-wise aggregation."""
    total_bytes = total_rounds = extra_bytes = extra_rounds = 0
    for r in range(1, iterations + 1):
        synced = switch_iteration is None or r <= switch_iteration
        b = per_iteration_bytes(size, scheme, synced)
        n = per_iteration_rounds(scheme, num_bn, synced)
        total_bytes += b
        total_rounds += n
        if n > 1:
            extra_rounds += n - 1
            extra_bytes += b - per_iteration_bytes(size, "fedavg_bn")
    return Accounting(
        total_bytes, total_rounds,
        extra_rounds / total_rounds if total_rounds else 0.0,
        extra_bytes / total_bytes if total_bytes else 0.0)


def history_accounting(history, size: ModelSizeSpec, scheme: str, num_bn: int,
                       switch_iteration: int | None = None) -> Accounting:
    return cumulative_accounting(len(history), size, scheme, num_bn, switch_iteration)


def format_mb(nbytes: int) -> str:
    return f"{nbytes / MB:.4f} MB"


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def evaluate(params: ModelParams, spec: NetworkSpec, test, stats_source="moving",
             chunk: int = 4096):
    """Accuracy in [0, 1] and mean cross-entropy on ``test``.

    ``stats_source`` is passed to ``model_forward``; inference normally uses
    the moving averages. Argmax ties resolve to the lowest class index.
    """
    n = len(test)
    if n == 0:
        raise ValueError("test set is empty")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, chunk):
        x = test.samples[start:start + chunk]
        y = test.labels[start:start + chunk]
        logits, _ = model_forward(spec, params, x, stats_source)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        loss_sum += softmax_cross_entropy(logits, y)[0] * len(y)
    return correct / n, loss_sum / n


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def export_csv(history: Sequence, path) -> None:
    """Write records (``IterationRecord`` or same-named mappings) to ``path``."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in history:
            get = rec.get if isinstance(rec, dict) else lambda k, r=rec: getattr(r, k)
            writer.writerow([_fmt(get(c)) for c in CSV_COLUMNS])


def read_csv(path) -> list[dict]:
    casts = {"iteration": int, "scheme": str, "train_loss": float,
             "test_accuracy": float, "cum_bytes": int, "cum_rounds": int,
             "wall_seconds": float}
    with open(path, newline="") as f:
        return [{k: casts[k](v) for k, v in row.items()} for row in csv.DictReader(f)]
