"""Federated round orchestration for every aggregation strategy.

One round: broadcast the server model (FedSA clients keep their own B),
measure the global metric on round-start models, train locally, measure local
metrics, aggregate the uploads, record divergence (both the strategy's own
and a FedIT reference computed on the same uploads), account communication,
and fold the aggregate back into the server state.

How each strategy's aggregate lands in the state:

    IDEAL      residual += ideal delta, B reset to zero, A untouched
    FEDIT      pair <- (b-bar, a-bar)
    FFA        pair <- (b-bar, frozen A)
    FEDSA      global A <- a-bar; each client keeps its trained B
    STACK      residual += materialized stacked product, adapter re-initialized
               (fresh A, zero B) unless stack_reinit is off
    FEDEX      residual += correction term, pair <- (b-bar, a-bar); effective
               weights match IDEAL exactly
    FLORA_NA   pair <- (b-bar, a-bar) from the solved coefficients
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..adapters import AdapterSet, FrozenLayer, LoraPair, init_lora
from ..aggregation import (
    AggregateResult,
    ClientUpdate,
    ClientWeights,
    Strategy,
    aggregate,
    aggregate_fedit,
    approx_delta,
)
from ..coeffsolver import SolverConfig
from ..errors import InvalidSpecError
from ..metrics import (
    ClientTraffic,
    CommLedger,
    CompressionMode,
    CompressionSpec,
    DivergenceReport,
    LayerShape,
    comm_account,
    compress,
    divergence,
)
from ..rng import DOMAIN_INIT, DOMAIN_REINIT, DOMAIN_TRAIN, stream
from .tasks import Dataset, SyntheticTask
from .training import (
    Constraint,
    TrainConfig,
    evaluate,
    evaluate_metric,
    local_train,
)

_CONSTRAINTS = {
    Strategy.FFA: Constraint.FREEZE_A,
    Strategy.FEDSA: Constraint.KEEP_LOCAL_B,
}


@dataclass(frozen=True)
class FederationConfig:
    """Everything a strategy run needs besides the data."""

    strategy: Strategy
    train: TrainConfig
    rank: int
    lora_alpha: float
    layer_dims: tuple[int, ...]  # (input, hidden..., output)
    weighting: str = "samples"  # or "uniform"
    solver: SolverConfig = field(default_factory=SolverConfig)
    stack_reinit: bool = True
    precision_bits: int = 32
    compression: CompressionSpec = field(default_factory=CompressionSpec)

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise InvalidSpecError("layer_dims needs at least (input, output)")
        if any(dim < 1 for dim in self.layer_dims):
            raise InvalidSpecError(f"layer dims must be >= 1: {self.layer_dims}")
        if self.rank < 1 or self.rank > min(self.layer_dims):
            raise InvalidSpecError(
                f"rank {self.rank} not in [1, min(layer_dims)={min(self.layer_dims)}]"
            )
        if self.weighting not in ("samples", "uniform"):
            raise InvalidSpecError(
                f"weighting must be 'samples' or 'uniform', got {self.weighting!r}"
            )


@dataclass
class ServerState:
    """Mutable server side: round counter, global model, FedSA's local B's."""

    round_index: int
    adapters: AdapterSet
    client_b: dict[str, dict[str, np.ndarray]]
    ledger: CommLedger = field(default_factory=CommLedger)


@dataclass(frozen=True)
class RoundRecord:
    """One CSV row: metrics of a single (round, strategy) cell."""

    round_index: int
    strategy: Strategy
    global_metric: float
    mean_local_metric: float
    gen_gap: float
    divergence: DivergenceReport
    fedit_reference: DivergenceReport
    up_entries: int
    down_entries: int
    up_bytes: int
    down_bytes: int


def _client_ids(num_clients: int) -> list[str]:
    return [f"client{u}" for u in range(num_clients)]


def init_server(
    task: SyntheticTask, config: FederationConfig, seed: int
) -> ServerState:
    """Fresh server model. The first layer's frozen weight is the task's base
    weight when shapes line up (keeping the teacher reachable by the adapter);
    deeper chains get random frozen weights scaled by 1/sqrt(fan-in)."""
    dims = config.layer_dims
    layers = []
    for i in range(len(dims) - 1):
        d_in, d_out = dims[i], dims[i + 1]
        rng = stream(seed, DOMAIN_INIT, i)
        if len(dims) == 2 and (d_out, d_in) == task.base_weight.shape:
            w0 = task.base_weight
        else:
            w0 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
        pair = init_lora(d_out, d_in, config.rank, config.lora_alpha, rng)
        layers.append((f"layer{i}", FrozenLayer(w0), pair))
    return ServerState(round_index=0, adapters=AdapterSet(tuple(layers)), client_b={})


def broadcast_model(
    state: ServerState, strategy: Strategy, client_id: str
) -> AdapterSet:
    """The model a client starts the round from. Only FedSA clients differ
    from the server copy (their own B is spliced in)."""
    model = state.adapters
    if strategy is Strategy.FEDSA:
        local = state.client_b.get(client_id)
        if local:
            for lid in model.layer_ids():
                pair = model.pair(lid)
                model = model.replace_pair(
                    lid,
                    LoraPair(
                        a=pair.a, b=local[lid], rank=pair.rank, alpha=pair.alpha
                    ),
                )
    return model


def _apply_aggregate(
    state: ServerState,
    result: AggregateResult,
    updates: list[ClientUpdate],
    config: FederationConfig,
    seed: int,
) -> None:
    """Fold the aggregate into the server model (see module docstring)."""
    strategy = result.strategy
    new_layers = []
    for layer_index, (lid, frozen, pair) in enumerate(state.adapters.layers):
        layer = result.layers[lid]
        if strategy is Strategy.IDEAL:
            frozen = frozen.with_residual(frozen.residual + layer.ideal_delta)
            pair = LoraPair(
                a=pair.a, b=np.zeros_like(pair.b), rank=pair.rank, alpha=pair.alpha
            )
        elif strategy is Strategy.STACK:
            frozen = frozen.with_residual(
                frozen.residual + approx_delta(layer, strategy)
            )
            if config.stack_reinit:
                pair = init_lora(
                    pair.out_dim,
                    pair.in_dim,
                    pair.rank,
                    pair.alpha,
                    stream(seed, DOMAIN_STACK, state.round_index, layer_index),
                )
            else:
                pair = LoraPair(
                    a=pair.a,
                    b=np.zeros_like(pair.b),
                    rank=pair.rank,
                    alpha=pair.alpha,
                )
        elif strategy is Strategy.FEDEX:
            frozen = frozen.with_residual(frozen.residual + layer.residual)
            pair = LoraPair(
                a=layer.a_bar, b=layer.b_bar, rank=pair.rank, alpha=pair.alpha
            )
        elif strategy is Strategy.FEDSA:
            pair = LoraPair(
                a=layer.a_bar, b=pair.b, rank=pair.rank, alpha=pair.alpha
            )
        else:  # FEDIT, FFA, FLORA_NA share the (b-bar, a-bar) shape
            pair = LoraPair(
                a=layer.a_bar, b=layer.b_bar, rank=pair.rank, alpha=pair.alpha
            )
        new_layers.append((lid, frozen, pair))
    state.adapters = AdapterSet(tuple(new_layers))
    if strategy is Strategy.FEDSA:
        for update in updates:
            state.client_b[update.client_id] = {
                lid: p.b for lid, p in update.adapters.items()
            }


def _apply_compression(state: ServerState, config: FederationConfig) -> int | None:
    """Lossy round-trip of the broadcast adapter matrices.

    The server keeps exactly what clients would decode, so the next round
    trains on the compressed aggregate. Returns the per-client download bytes
    (encoded adapters plus, for FEDEX, the raw residual), or None when nothing
    was compressed. IDEAL and STACK ship dense residuals, not pairs, and are
    left alone; FFA's frozen A and FedSA's local B's are never transmitted,
    so they are never encoded.
    """
    spec = config.compression
    strategy = config.strategy
    if spec.mode is CompressionMode.NONE or strategy in (
        Strategy.IDEAL,
        Strategy.STACK,
    ):
        return None
    down_bytes = 0
    for lid in state.adapters.layer_ids():
        pair = state.adapters.pair(lid)
        new_a, new_b = pair.a, pair.b
        if strategy is not Strategy.FFA:
            enc = compress(pair.a, spec)
            down_bytes += enc.encoded_bytes
            new_a = enc.decode()
        if strategy is not Strategy.FEDSA:
            enc = compress(pair.b, spec)
            down_bytes += enc.encoded_bytes
            new_b = enc.decode()
        if strategy is Strategy.FEDEX:
            k, d = state.adapters.frozen(lid).shape
            down_bytes += k * d * config.precision_bits // 8
        state.adapters = state.adapters.replace_pair(
            lid, LoraPair(a=new_a, b=new_b, rank=pair.rank, alpha=pair.alpha)
        )
    return down_bytes


def run_round(
    state: ServerState,
    task: SyntheticTask,
    client_train: list[Dataset],
    client_test: list[Dataset],
    global_test: Dataset,
    config: FederationConfig,
    seed: int,
) -> RoundRecord:
    """Advance the federation by one round, mutating state."""
    strategy = config.strategy
    num_clients = len(client_train)
    if num_clients != len(client_test):
        raise InvalidSpecError("per-client train and test lists must align")
    ids = _client_ids(num_clients)
    constraint = _CONSTRAINTS.get(strategy, Constraint.NONE)

    start_models = [broadcast_model(state, strategy, cid) for cid in ids]

    updates: list[ClientUpdate] = []
    trained_models: list[AdapterSet] = []
    for u, cid in enumerate(ids):
        rng = stream(seed, DOMAIN_TRAIN, state.round_index, u)
        update = local_train(
            cid, client_train[u], start_models[u], task.kind, config.train,
            constraint, rng,
        )
        updates.append(update)
        model = start_models[u]
        for lid, pair in update.adapters.items():
            model = model.replace_pair(lid, pair)
        trained_models.append(model)

    global_metric, mean_local, gen_gap = evaluate(
        start_models, trained_models, client_test, global_test, task.kind
    )

    if config.weighting == "uniform":
        weights = ClientWeights.uniform(num_clients)
    else:
        weights = ClientWeights.from_sample_counts(updates)

    frozen_a = None
    if strategy is Strategy.FFA:
        frozen_a = {
            lid: state.adapters.pair(lid).a for lid in state.adapters.layer_ids()
        }
    result = aggregate(
        strategy, updates, weights, frozen_a=frozen_a, solver_config=config.solver
    )
    report = divergence(result)
    if strategy is Strategy.FEDIT:
        fedit_report = report
    else:
        fedit_report = divergence(aggregate_fedit(updates, weights))

    _apply_aggregate(state, result, updates, config, seed)
    compressed_down = _apply_compression(state, config)

    shapes = [
        LayerShape(out_dim=f.shape[0], in_dim=f.shape[1], rank=config.rank)
        for _, f, _ in state.adapters.layers
    ]
    up_entries = down_entries = up_bytes = down_bytes = 0
    for cid in ids:
        traffic = comm_account(
            strategy, shapes, num_clients, precision_bits=config.precision_bits
        )
        if compressed_down is not None:
            traffic = ClientTraffic(
                up_entries=traffic.up_entries,
                down_entries=traffic.down_entries,
                up_bytes=traffic.up_bytes,
                down_bytes=compressed_down,
            )
        state.ledger.record(state.round_index, cid, traffic)
        up_entries += traffic.up_entries
        down_entries += traffic.down_entries
        up_bytes += traffic.up_bytes
        down_bytes += traffic.down_bytes

    record = RoundRecord(
        round_index=state.round_index,
        strategy=strategy,
        global_metric=global_metric,
        mean_local_metric=mean_local,
        gen_gap=gen_gap,
        divergence=report,
        fedit_reference=fedit_report,
        up_entries=up_entries,
        down_entries=down_entries,
        up_bytes=up_bytes,
        down_bytes=down_bytes,
    )
    state.round_index += 1
    return record


@dataclass(frozen=True)
class StrategyRun:
    """A full trajectory of one strategy under one seed."""

    strategy: Strategy
    seed: int
    records: tuple[RoundRecord, ...]
    final_global_metric: float
    state: ServerState


def run_strategy(
    task: SyntheticTask,
    client_train: list[Dataset],
    client_test: list[Dataset],
    global_test: Dataset,
    config: FederationConfig,
    num_rounds: int,
    seed: int,
    state: ServerState | None = None,
    checkpoint_every: int = 0,
    checkpoint_path: str | Path | None = None,
) -> StrategyRun:
    """Run num_rounds rounds (continuing from `state` if given) and score the
    final broadcast model on the global test set."""
    if state is None:
        state = init_server(task, config, seed)
    records = []
    while state.round_index < num_rounds:
        records.append(
            run_round(
                state, task, client_train, client_test, global_test, config, seed
            )
        )
        if (
            checkpoint_every
            and checkpoint_path is not None
            and state.round_index % checkpoint_every == 0
        ):
            save_checkpoint(checkpoint_path, state, seed, config.strategy)

    ids = _client_ids(len(client_train))
    final_models = [broadcast_model(state, config.strategy, cid) for cid in ids]
    final_global = float(
        np.mean(
            [evaluate_metric(m, global_test, task.kind) for m in final_models]
        )
    )
    return StrategyRun(
        strategy=config.strategy,
        seed=seed,
        records=tuple(records),
        final_global_metric=final_global,
        state=state,
    )


# --- checkpointing ------------------------------------------------------------
# Streams are keyed by (seed, domain, round, ...), so the round index IS the
# RNG state: storing matrices + round + seed is enough to resume exactly.


def save_checkpoint(
    path: str | Path, state: ServerState, seed: int, strategy: Strategy
) -> None:
    arrays: dict[str, np.ndarray] = {
        "meta/round_index": np.int64(state.round_index),
        "meta/seed": np.int64(seed),
        "meta/strategy": np.array(strategy.name),
        "meta/layer_ids": np.array(list(state.adapters.layer_ids())),
        "meta/client_ids": np.array(sorted(state.client_b.keys())),
        "meta/ledger_entries": np.int64(state.ledger.total_entries),
        "meta/ledger_bytes": np.int64(state.ledger.total_bytes),
    }
    for lid in state.adapters.layer_ids():
        frozen = state.adapters.frozen(lid)
        pair = state.adapters.pair(lid)
        arrays[f"layer/{lid}/w0"] = frozen.w0
        arrays[f"layer/{lid}/residual"] = frozen.residual
        arrays[f"layer/{lid}/a"] = pair.a
        arrays[f"layer/{lid}/b"] = pair.b
        arrays[f"layer/{lid}/alpha"] = np.float64(pair.alpha)
    for cid, per_layer in state.client_b.items():
        for lid, b in per_layer.items():
            arrays[f"client_b/{cid}/{lid}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[ServerState, int, Strategy]:
    """Rebuild (state, seed, strategy). Cumulative ledger totals are restored;
    the per-record history before the checkpoint is not."""
    with np.load(path) as data:
        layer_ids = [str(s) for s in data["meta/layer_ids"]]
        layers = []
        for lid in layer_ids:
            a = data[f"layer/{lid}/a"]
            pair = LoraPair(
                a=a,
                b=data[f"layer/{lid}/b"],
                rank=a.shape[0],
                alpha=float(data[f"layer/{lid}/alpha"]),
            )
            frozen = FrozenLayer(
                data[f"layer/{lid}/w0"], data[f"layer/{lid}/residual"]
            )
            layers.append((lid, frozen, pair))
        client_b = {
            str(cid): {
                lid: data[f"client_b/{cid}/{lid}"] for lid in layer_ids
            }
            for cid in data["meta/client_ids"]
        }
        ledger = CommLedger(
            records=[],
            total_entries=int(data["meta/ledger_entries"]),
            total_bytes=int(data["meta/ledger_bytes"]),
        )
        state = ServerState(
            round_index=int(data["meta/round_index"]),
            adapters=AdapterSet(tuple(layers)),
            client_b=client_b,
            ledger=ledger,
        )
        return state, int(data["meta/seed"]), Strategy[str(data["meta/strategy"])]
