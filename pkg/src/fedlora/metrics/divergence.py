"""Divergence of a strategy's aggregate from the full-parameter ideal.

Per layer the raw gap is ||delta_approx - delta_ideal||_F; the normalized gap
divides by ||delta_ideal||_F (absent when the ideal is exactly zero). FEDSA
has no single global update, so its gap is the mean over clients of the gap
of (alpha/r) B_u a_bar. The report also exposes the squared concatenated raw
gap, which is the rho of the convergence analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..aggregation import AggregateResult, Strategy, approx_delta


@dataclass(frozen=True)
class DivergenceReport:
    """Per-layer and aggregate gaps.

    per_layer holds normalized gaps (None where the ideal delta is zero) when
    built with normalize=True, else raw gaps. `aggregate` is the mean of the
    per-layer values that exist; raw_gap is the Frobenius norm of all layer
    gaps concatenated and raw_gap_squared its square.
    """

    per_layer: dict[str, float | None]
    per_layer_raw: dict[str, float]
    aggregate: float | None
    raw_gap: float
    raw_gap_squared: float


def _layer_raw_gap(layer, strategy: Strategy) -> float:
    approx = approx_delta(layer, strategy)
    if approx is not None:
        return float(np.linalg.norm(approx - layer.ideal_delta))
    # FEDSA: mean over clients of the per-client global-A/local-B product gap
    gaps = [
        float(np.linalg.norm(layer.scale * (b @ layer.a_bar) - layer.ideal_delta))
        for b in layer.local_b
    ]
    return float(np.mean(gaps))


def divergence(result: AggregateResult, normalize: bool = True) -> DivergenceReport:
    per_layer: dict[str, float | None] = {}
    per_layer_raw: dict[str, float] = {}
    for lid, layer in result.layers.items():
        raw = _layer_raw_gap(layer, result.strategy)
        per_layer_raw[lid] = raw
        if not normalize:
            per_layer[lid] = raw
            continue
        ideal_norm = float(np.linalg.norm(layer.ideal_delta))
        per_layer[lid] = raw / ideal_norm if ideal_norm > 0.0 else None

    defined = [v for v in per_layer.values() if v is not None]
    aggregate = float(np.mean(defined)) if defined else None
    raw_sq = float(sum(v * v for v in per_layer_raw.values()))
    return DivergenceReport(
        per_layer=per_layer,
        per_layer_raw=per_layer_raw,
        aggregate=aggregate,
        raw_gap=float(np.sqrt(raw_sq)),
        raw_gap_squared=raw_sq,
    )


def report_to_json_dict(report: DivergenceReport) -> dict:
    return {
        "per_layer": report.per_layer,
        "per_layer_raw": report.per_layer_raw,
        "aggregate": report.aggregate,
        "raw_gap": report.raw_gap,
        "raw_gap_squared": report.raw_gap_squared,
    }
