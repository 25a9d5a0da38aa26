"""Server-side aggregation strategies for a round of client adapter uploads.

Seven rules, all operating per layer on the uploaded pairs (B_u, A_u):

    IDEAL     full-parameter average sum_u w_u * (alpha/r) * B_u A_u; the
              target every low-rank rule approximates (rank can reach U*r).
    FEDIT     average A's and B's separately; the product of averages is not
              the average of products, which is the aggregation error the
              remaining rules attack.
    FFA       A stays frozen at initialization; only B is averaged.
    FEDSA     only A is averaged; every client keeps its own B.
    STACK     block-concatenate client factors; the stacked product is exactly
              the ideal sum, at the price of downloads growing with U.
    FEDEX     FEDIT plus a dense residual (ideal minus product of averages)
              folded into the frozen weight, restoring exactness.
    FLORA_NA  solve per-client scalars P, Q so (sum P_u B_u)(sum Q_u A_u) is
              as close as possible to the ideal sum, at FEDIT traffic cost.

Every result also carries the ideal delta per layer so divergence against the
full-parameter reference can be reported without re-running clients.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .adapters import DenseMatrix, LoraPair, dump_matrix, load_matrix
from .coeffsolver import SolverConfig, solve_coefficients
from .errors import (
    EmptyUpdateListError,
    FrozenViolationError,
    ShapeMismatchError,
)

_FROZEN_TOL = 1e-12


class Strategy(enum.Enum):
    IDEAL = "ideal"
    FEDIT = "fedit"
    FFA = "ffa"
    FEDSA = "fedsa"
    STACK = "stack"
    FEDEX = "fedex"
    FLORA_NA = "flora_na"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(
                f"unknown strategy {name!r}; expected one of "
                f"{[s.name.lower() for s in cls]}"
            ) from None


@dataclass(frozen=True)
class ClientUpdate:
    """One client's per-round upload: adapters per layer plus sample count."""

    client_id: str
    adapters: dict[str, LoraPair]
    sample_count: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise ShapeMismatchError(
                f"sample_count must be >= 1, got {self.sample_count}"
            )


@dataclass(frozen=True)
class ClientWeights:
    """Non-negative aggregation weights summing to 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise ShapeMismatchError("weights must be a vector")
        if np.any(w < 0):
            raise ShapeMismatchError("weights must be non-negative")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ShapeMismatchError(f"weights must sum to 1, got {w.sum()!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, num_clients: int) -> "ClientWeights":
        return cls(np.full(num_clients, 1.0 / num_clients))

    @classmethod
    def from_sample_counts(cls, updates: list[ClientUpdate]) -> "ClientWeights":
        counts = np.array([u.sample_count for u in updates], dtype=np.float64)
        return cls(counts / counts.sum())

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class LayerAggregate:
    """Per-layer output of one strategy.

    Field presence depends on the strategy: IDEAL carries only ideal_delta;
    STACK's a_bar/b_bar are the Sr_u-sized concatenations with block_scales
    holding each block's own w-independent alpha/r_u factor; FEDEX adds the
    dense residual; FLORA_NA adds the coefficient vectors; FEDSA keeps the
    per-client B's (local_b) because no global B exists.
    """

    ideal_delta: DenseMatrix
    a_bar: DenseMatrix | None = None
    b_bar: DenseMatrix | None = None
    residual: DenseMatrix | None = None
    coefficients: tuple[np.ndarray, np.ndarray] | None = None
    local_b: tuple[DenseMatrix, ...] | None = None
    block_scales: np.ndarray | None = None
    scale: float = 1.0  # alpha/rank of the experiment's shared template


@dataclass(frozen=True)
class AggregateResult:
    strategy: Strategy
    layers: dict[str, LayerAggregate]


def _check_updates(updates: list[ClientUpdate], w: ClientWeights, uniform_rank: bool):
    if not updates:
        raise EmptyUpdateListError("no client updates to aggregate")
    if len(w) != len(updates):
        raise ShapeMismatchError(
            f"{len(w.weights)} weights for {len(updates)} updates"
        )
    ref = updates[0]
    layer_ids = list(ref.adapters.keys())
    for upd in updates[1:]:
        if list(upd.adapters.keys()) != layer_ids:
            raise ShapeMismatchError(
                f"client {upd.client_id} layer ids differ from {ref.client_id}"
            )
    for lid in layer_ids:
        shapes = {(u.adapters[lid].out_dim, u.adapters[lid].in_dim) for u in updates}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"layer {lid}: inconsistent shapes {shapes}")
        ranks = {u.adapters[lid].rank for u in updates}
        if uniform_rank and len(ranks) != 1:
            raise ShapeMismatchError(
                f"layer {lid}: this strategy requires a uniform rank, got {sorted(ranks)}"
            )
        alphas = {u.adapters[lid].alpha for u in updates}
        if len(alphas) != 1:
            raise ShapeMismatchError(f"layer {lid}: inconsistent alphas {alphas}")
    return layer_ids


def _ideal_delta(updates: list[ClientUpdate], w: ClientWeights, lid: str) -> DenseMatrix:
    pairs = [u.adapters[lid] for u in updates]
    out = np.zeros((pairs[0].out_dim, pairs[0].in_dim))
    for wu, p in zip(w.weights, pairs):
        out += wu * p.scale * (p.b @ p.a)
    return out


def aggregate_ideal(updates: list[ClientUpdate], w: ClientWeights) -> AggregateResult:
    """Full-parameter average of the client deltas (the reference target)."""
    layer_ids = _check_updates(updates, w, uniform_rank=False)
    layers = {}
    for lid in layer_ids:
        pair0 = updates[0].adapters[lid]
        layers[lid] = LayerAggregate(
            ideal_delta=_ideal_delta(updates, w, lid), scale=pair0.scale
        )
    return AggregateResult(Strategy.IDEAL, layers)


def aggregate_fedit(updates: list[ClientUpdate], w: ClientWeights) -> AggregateResult:
    """Separate averages: a_bar = sum w_u A_u, b_bar = sum w_u B_u."""
    layer_ids = _check_updates(updates, w, uniform_rank=True)
    layers = {}
    for lid in layer_ids:
        pairs = [u.adapters[lid] for u in updates]
        a_bar = sum(wu * p.a for wu, p in zip(w.weights, pairs))
        b_bar = sum(wu * p.b for wu, p in zip(w.weights, pairs))
        layers[lid] = LayerAggregate(
            ideal_delta=_ideal_delta(updates, w, lid),
            a_bar=a_bar,
            b_bar=b_bar,
            scale=pairs[0].scale,
        )
    return AggregateResult(Strategy.FEDIT, layers)


def aggregate_ffa(
    updates: list[ClientUpdate],
    w: ClientWeights,
    frozen_a: dict[str, DenseMatrix],
) -> AggregateResult:
    """Aggregate B only; A must equal its frozen initialization everywhere."""
    layer_ids = _check_updates(updates, w, uniform_rank=True)
    layers = {}
    for lid in layer_ids:
        if lid not in frozen_a:
            raise ShapeMismatchError(f"no frozen A provided for layer {lid}")
        ref_a = np.asarray(frozen_a[lid], dtype=np.float64)
        for upd in updates:
            dev = float(np.max(np.abs(upd.adapters[lid].a - ref_a)))
            if dev > _FROZEN_TOL:
                raise FrozenViolationError(
                    f"client {upd.client_id} changed frozen A of layer {lid} "
                    f"(max deviation {dev:.3e})"
                )
        pairs = [u.adapters[lid] for u in updates]
        b_bar = sum(wu * p.b for wu, p in zip(w.weights, pairs))
        layers[lid] = LayerAggregate(
            ideal_delta=_ideal_delta(updates, w, lid),
            a_bar=ref_a.copy(),
            b_bar=b_bar,
            scale=pairs[0].scale,
        )
    return AggregateResult(Strategy.FFA, layers)


def aggregate_fedsa(updates: list[ClientUpdate], w: ClientWeights) -> AggregateResult:
    """Aggregate A only; every client keeps its own B.

    The result records each client's B so divergence can be evaluated as the
    mean over clients of || (alpha/r) B_u a_bar - ideal ||.
    """
    layer_ids = _check_updates(updates, w, uniform_rank=True)
    layers = {}
    for lid in layer_ids:
        pairs = [u.adapters[lid] for u in updates]
        a_bar = sum(wu * p.a for wu, p in zip(w.weights, pairs))
        layers[lid] = LayerAggregate(
            ideal_delta=_ideal_delta(updates, w, lid),
            a_bar=a_bar,
            local_b=tuple(p.b for p in pairs),
            scale=pairs[0].scale,
        )
    return AggregateResult(Strategy.FEDSA, layers)


def aggregate_stack(updates: list[ClientUpdate], w: ClientWeights) -> AggregateResult:
    """Block-concatenation: a_bar stacks the A_u vertically (sum r_u x d),
    b_bar concatenates the weighted w_u * B_u horizontally (k x sum r_u).

    The raw identity b_bar @ a_bar = sum_u w_u B_u A_u holds exactly. Ranks
    may differ across clients, so each block carries its own alpha/r_u factor
    in block_scales (repeated r_u times); the materialized update is
    (b_bar * block_scales) @ a_bar, which equals ideal_delta exactly.
    """
    layer_ids = _check_updates(updates, w, uniform_rank=False)
    layers = {}
    for lid in layer_ids:
        pairs = [u.adapters[lid] for u in updates]
        a_bar = np.concatenate([p.a for p in pairs], axis=0)
        b_bar = np.concatenate(
            [wu * p.b for wu, p in zip(w.weights, pairs)], axis=1
        )
        block_scales = np.concatenate([np.full(p.rank, p.scale) for p in pairs])
        layers[lid] = LayerAggregate(
            ideal_delta=_ideal_delta(updates, w, lid),
            a_bar=a_bar,
            b_bar=b_bar,
            block_scales=block_scales,
            scale=pairs[0].scale,
        )
    return AggregateResult(Strategy.STACK, layers)


def aggregate_fedex(updates: list[ClientUpdate], w: ClientWeights) -> AggregateResult:
    """Separate averages plus the dense residual that restores exactness.

    residual = ideal_delta - (alpha/r) * b_bar @ a_bar, so an effective weight
    built from (b_bar, a_bar, residual) equals the IDEAL effective weight.
    """
    layer_ids = _check_updates(updates, w, uniform_rank=True)
    layers = {}
    for lid in layer_ids:
        pairs = [u.adapters[lid] for u in updates]
        a_bar = sum(wu * p.a for wu, p in zip(w.weights, pairs))
        b_bar = sum(wu * p.b for wu, p in zip(w.weights, pairs))
        ideal = _ideal_delta(updates, w, lid)
        s = pairs[0].scale
        layers[lid] = LayerAggregate(
            ideal_delta=ideal,
            a_bar=a_bar,
            b_bar=b_bar,
            residual=ideal - s * (b_bar @ a_bar),
            scale=s,
        )
    return AggregateResult(Strategy.FEDEX, layers)


def aggregate_flora_na(
    updates: list[ClientUpdate],
    w: ClientWeights,
    solver_config: SolverConfig | None = None,
) -> AggregateResult:
    """Nearly-accurate aggregation: per layer, solve scalar coefficients P, Q
    minimizing || (sum P_u B_u)(sum Q_u A_u) - sum w_u B_u A_u ||_F^2, then
    a_bar = sum Q_u A_u and b_bar = sum P_u B_u.

    The alpha/r factor is pulled out before solving (the target is the raw
    weighted sum of B_u A_u) and reapplied when the update is materialized,
    so the solve is insensitive to the LoRA scale.
    """
    layer_ids = _check_updates(updates, w, uniform_rank=True)
    cfg = solver_config if solver_config is not None else SolverConfig()
    layers = {}
    for lid in layer_ids:
        pairs = [u.adapters[lid] for u in updates]
        b_mats = np.stack([p.b for p in pairs])
        a_mats = np.stack([p.a for p in pairs])
        coeff = solve_coefficients(b_mats, a_mats, w.weights, cfg)
        a_bar = np.tensordot(coeff.q, a_mats, axes=1)
        b_bar = np.tensordot(coeff.p, b_mats, axes=1)
        layers[lid] = LayerAggregate(
            ideal_delta=_ideal_delta(updates, w, lid),
            a_bar=a_bar,
            b_bar=b_bar,
            coefficients=(coeff.p, coeff.q),
            scale=pairs[0].scale,
        )
    return AggregateResult(Strategy.FLORA_NA, layers)


def aggregate(
    strategy: Strategy,
    updates: list[ClientUpdate],
    w: ClientWeights,
    *,
    frozen_a: dict[str, DenseMatrix] | None = None,
    solver_config: SolverConfig | None = None,
) -> AggregateResult:
    """Dispatch to the strategy-specific aggregation rule."""
    if strategy is Strategy.IDEAL:
        return aggregate_ideal(updates, w)
    if strategy is Strategy.FEDIT:
        return aggregate_fedit(updates, w)
    if strategy is Strategy.FFA:
        if frozen_a is None:
            raise ShapeMismatchError("FFA aggregation needs the frozen A matrices")
        return aggregate_ffa(updates, w, frozen_a)
    if strategy is Strategy.FEDSA:
        return aggregate_fedsa(updates, w)
    if strategy is Strategy.STACK:
        return aggregate_stack(updates, w)
    if strategy is Strategy.FEDEX:
        return aggregate_fedex(updates, w)
    if strategy is Strategy.FLORA_NA:
        return aggregate_flora_na(updates, w, solver_config)
    raise ValueError(f"unhandled strategy {strategy}")


def approx_delta(layer: LayerAggregate, strategy: Strategy) -> DenseMatrix | None:
    """The update a strategy actually applies, for divergence reporting.

    Returns None for FEDSA, where no single global update exists (the metrics
    module averages per-client products instead).
    """
    if strategy is Strategy.IDEAL:
        return layer.ideal_delta
    if strategy is Strategy.STACK:
        return (layer.b_bar * layer.block_scales) @ layer.a_bar
    if strategy is Strategy.FEDEX:
        # on effective weights: low-rank product plus the shipped residual
        return layer.scale * (layer.b_bar @ layer.a_bar) + layer.residual
    if strategy is Strategy.FEDSA:
        return None
    return layer.scale * (layer.b_bar @ layer.a_bar)


# --- JSON serialization -----------------------------------------------------


def result_to_json(result: AggregateResult) -> str:
    """Serialize a result: strategy name, per-layer matrix dumps, coefficient
    vectors, and residual presence flags."""

    def enc(m: DenseMatrix | None) -> str | None:
        return None if m is None else dump_matrix(m)

    doc: dict = {"strategy": result.strategy.name.lower(), "layers": {}}
    for lid, layer in result.layers.items():
        entry: dict = {
            "ideal_delta": enc(layer.ideal_delta),
            "a_bar": enc(layer.a_bar),
            "b_bar": enc(layer.b_bar),
            "has_residual": layer.residual is not None,
            "residual": enc(layer.residual),
            "scale": layer.scale,
        }
        if layer.coefficients is not None:
            p, q = layer.coefficients
            entry["coefficients"] = {"p": list(map(float, p)), "q": list(map(float, q))}
        if layer.block_scales is not None:
            entry["block_scales"] = list(map(float, layer.block_scales))
        if layer.local_b is not None:
            entry["local_b"] = [dump_matrix(b) for b in layer.local_b]
        doc["layers"][lid] = entry
    return json.dumps(doc, sort_keys=True)


def result_from_json(text: str) -> AggregateResult:
    doc = json.loads(text)
    strategy = Strategy.parse(doc["strategy"])

    def dec(s: str | None) -> DenseMatrix | None:
        return None if s is None else load_matrix(s)

    layers = {}
    for lid, entry in doc["layers"].items():
        coeff = None
        if "coefficients" in entry:
            coeff = (
                np.array(entry["coefficients"]["p"]),
                np.array(entry["coefficients"]["q"]),
            )
        layers[lid] = LayerAggregate(
            ideal_delta=dec(entry["ideal_delta"]),
            a_bar=dec(entry["a_bar"]),
            b_bar=dec(entry["b_bar"]),
            residual=dec(entry["residual"]),
            coefficients=coeff,
            local_b=tuple(load_matrix(s) for s in entry["local_b"])
            if "local_b" in entry
            else None,
            block_scales=np.array(entry["block_scales"])
            if "block_scales" in entry
            else None,
            scale=float(entry["scale"]),
        )
    return AggregateResult(strategy, layers)
