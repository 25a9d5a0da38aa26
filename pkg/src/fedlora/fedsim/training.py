"""Local adapter training and metric evaluation.

The model is a chain of linear layers, each a frozen weight plus a LoRA pair;
the forward pass is h_{l+1} = h_l @ W_l^T with W_l the effective weight. Only
the adapter matrices receive gradients. Losses: mean squared error for
regression, softmax cross-entropy for classification. Metrics are oriented so
that larger is better (negative MSE, accuracy), which fixes the sign of the
generalization gap: mean-local minus global, positive when clients overfit
their own shards.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..adapters import AdapterSet, LoraPair, effective_weight, lora_gradients
from ..aggregation import ClientUpdate
from ..errors import EmptyTestSetError, InvalidSpecError, TrainingDivergedError
from .tasks import Dataset, TaskKind


class Constraint(enum.Enum):
    """What a strategy forbids during and after local training."""

    NONE = "none"
    FREEZE_A = "freeze_a"  # FFA: A stays at its broadcast value
    KEEP_LOCAL_B = "keep_local_b"  # FedSA: B trains but is never replaced


@dataclass(frozen=True)
class TrainConfig:
    """Local optimization knobs. Exactly one of epochs / local_steps is set:
    epochs sweeps the shard that many times, local_steps counts mini-batches."""

    batch_size: int = 128
    learning_rate: float = 0.05
    epochs: int | None = 10
    local_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidSpecError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise InvalidSpecError(
                f"learning_rate must be >= 0, got {self.learning_rate}"
            )
        if (self.epochs is None) == (self.local_steps is None):
            raise InvalidSpecError(
                "set exactly one of epochs and local_steps (they are two "
                "readings of the same budget; pick one explicitly)"
            )
        if self.epochs is not None and self.epochs < 1:
            raise InvalidSpecError(f"epochs must be >= 1, got {self.epochs}")
        if self.local_steps is not None and self.local_steps < 1:
            raise InvalidSpecError(
                f"local_steps must be >= 1, got {self.local_steps}"
            )


def forward(adapters: AdapterSet, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for _, frozen, pair in adapters.layers:
        h = h @ effective_weight(frozen, pair).T
    return h


def _loss_and_grad(
    out: np.ndarray, y: np.ndarray, kind: TaskKind
) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the output."""
    n = out.shape[0]
    if kind is TaskKind.REGRESSION_TEACHER:
        diff = out - y
        return 0.5 * float(np.sum(diff * diff)) / n, diff / n
    # softmax cross-entropy with the usual max-shift for stability
    shifted = out - out.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    picked = probs[np.arange(n), y]
    loss = -float(np.sum(np.log(np.maximum(picked, 1e-300)))) / n
    grad = probs
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def _sgd_batch(
    adapters: AdapterSet,
    x: np.ndarray,
    y: np.ndarray,
    kind: TaskKind,
    lr: float,
    constraint: Constraint,
) -> tuple[AdapterSet, float]:
    """One mini-batch step over every layer; returns updated adapters and
    the pre-step loss."""
    acts = [np.asarray(x, dtype=np.float64)]
    weights = []
    for _, frozen, pair in adapters.layers:
        w = effective_weight(frozen, pair)
        weights.append(w)
        acts.append(acts[-1] @ w.T)

    loss, gy = _loss_and_grad(acts[-1], y, kind)
    if not np.isfinite(loss):
        raise TrainingDivergedError(
            f"loss became non-finite ({loss}); the learning rate is too high "
            "for this task"
        )

    out = adapters
    for idx in range(len(adapters.layers) - 1, -1, -1):
        lid, frozen, pair = adapters.layers[idx]
        ga, gb = lora_gradients(frozen, pair, acts[idx], gy)
        new_a = pair.a if constraint is Constraint.FREEZE_A else pair.a - lr * ga
        new_pair = LoraPair(
            a=new_a, b=pair.b - lr * gb, rank=pair.rank, alpha=pair.alpha
        )
        out = out.replace_pair(lid, new_pair)
        if idx > 0:
            gy = gy @ weights[idx]  # propagate through the pre-step weight
    return out, loss


def local_train(
    client_id: str,
    data: Dataset,
    adapters: AdapterSet,
    kind: TaskKind,
    config: TrainConfig,
    constraint: Constraint,
    rng: np.random.Generator,
) -> ClientUpdate:
    """Mini-batch SGD on the adapter matrices; frozen weights never move.

    Deterministic for a given rng stream: batches are drawn by reshuffling
    the shard each epoch (or until local_steps batches are consumed).
    """
    n = len(data)
    if n == 0:
        raise EmptyTestSetError(f"client {client_id} has no training data")
    current = adapters
    lr = config.learning_rate
    steps_left = config.local_steps if config.local_steps is not None else -1
    epochs = config.epochs if config.epochs is not None else np.iinfo(np.int64).max
    done = False
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            current, _ = _sgd_batch(
                current, data.x[idx], data.y[idx], kind, lr, constraint
            )
            if steps_left > 0:
                steps_left -= 1
                if steps_left == 0:
                    done = True
                    break
        if done:
            break
    return ClientUpdate(
        client_id=client_id,
        adapters={lid: current.pair(lid) for lid in current.layer_ids()},
        sample_count=n,
    )


def evaluate_metric(adapters: AdapterSet, data: Dataset, kind: TaskKind) -> float:
    """Negative MSE for regression, accuracy for classification."""
    if len(data) == 0:
        raise EmptyTestSetError("evaluation set is empty")
    out = forward(adapters, data.x)
    if kind is TaskKind.REGRESSION_TEACHER:
        diff = out - data.y
        return -float(np.mean(diff * diff))
    return float(np.mean(np.argmax(out, axis=1) == data.y))


def evaluate(
    round_start_models: list[AdapterSet],
    trained_models: list[AdapterSet],
    local_test_sets: list[Dataset],
    global_test: Dataset,
    kind: TaskKind,
) -> tuple[float, float, float]:
    """(global metric, mean local metric, generalization gap).

    The global metric averages each client's round-start model over the
    shared test set; the local metric evaluates each end-of-round model on
    that client's own test shard. Both metrics are larger-is-better, so
    gap = mean-local - global >= 0 reads as overfit-to-local.
    """
    if len(round_start_models) != len(trained_models) or (
        len(trained_models) != len(local_test_sets)
    ):
        raise InvalidSpecError("model and test-set lists must align per client")
    global_metric = float(
        np.mean([evaluate_metric(m, global_test, kind) for m in round_start_models])
    )
    mean_local = float(
        np.mean(
            [
                evaluate_metric(m, ds, kind)
                for m, ds in zip(trained_models, local_test_sets)
            ]
        )
    )
    return global_metric, mean_local, mean_local - global_metric
