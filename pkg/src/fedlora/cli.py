"""Declarative experiment runner.

One binary, four subcommands:

    run                    execute a config across strategies and seeds,
                           writing rounds.csv / divergence.csv / comm.csv /
                           gengap.csv / rounds.jsonl / summary.json
    sweep                  rerun a config over a grid of dirichlet_alpha or
                           num_clients values, one subdirectory per value
    compare-decomposition  time the coefficient solver against truncated SVD
                           and pivoted QR on updates trained from a config
    emit-plots-data        reduce run artifacts to tidy plot-ready CSVs

Exit codes: 0 ok, 2 config or usage error, 3 runtime numeric failure.
Metric CSV bodies are deterministic for a fixed config; wall-clock facts go
to a separate meta.json. The output directory comes from --out if given,
else the FEDLORA_OUT environment variable, else the config's run.output_dir.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from .aggregation import ClientWeights, Strategy
from .backend import active_backend
from .coeffsolver import SolverConfig, solve_coefficients, trace_to_csv
from .decomposition import compare_execution, comparison_to_csv
from .errors import ConfigError, FedLoraError, MissingArtifactsError
from .fedsim import (
    Constraint,
    FederationConfig,
    StrategyRun,
    TaskKind,
    TaskSpec,
    TrainConfig,
    init_server,
    local_train,
    prepare_federated_data,
    run_strategy,
)
from .metrics import CompressionMode, CompressionSpec, report_to_json_dict
from .rng import DOMAIN_TRAIN, stream

ENV_OUT = "FEDLORA_OUT"

_DEFAULTS_HELP = """\
config file sections and defaults (YAML; unknown keys are rejected):

task:                          # required section
  kind: <required>             # regression_teacher | clustered_classification
  input_dim: <required>
  output_dim: <required>
  samples: <required>
  num_clusters: 2
  teacher_rank: 4
  teacher_scale: 1.0
  perturbation_scale: 1.0
  noise_std: 0.0
federation:                    # required section
  num_clients: <required>
  rounds: <required>
  dirichlet_alpha: 0.5
  weighting: samples           # samples | uniform
  train_fraction: 0.8
  global_test_fraction: 0.2
training:
  epochs: 10                   # exactly one of epochs / local_steps
  local_steps: null
  batch_size: 128
  learning_rate: 0.05
adapter:
  rank: 8
  lora_alpha: 8.0
  layer_dims: null             # default [input_dim, output_dim]
solver:
  steps: 100
  learning_rate: 0.01
  beta1: 0.9
  beta2: 0.999
  epsilon: 1.0e-8
  init_scale: null             # null starts from the client weights
compression:
  mode: none                   # none | half_precision | quant_uniform | sparsify_topk
  bits: 8
  keep_fraction: 1.0
run:
  strategies: [fedit, flora_na]
  seeds: [0]
  output_dir: fedlora_runs
  precision_bits: 32
  stack_reinit: true
  metric_target: null          # absolute target for rounds-to-target
  target_fraction: null        # or a fraction of the best final metric
  checkpoint_every: 0          # rounds between checkpoints, 0 disables
  threads: 1
"""


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description (the YAML sections, flattened)."""

    task: TaskSpec
    num_clients: int
    rounds: int
    dirichlet_alpha: float
    weighting: str
    train_fraction: float
    global_test_fraction: float
    equal_shards: bool
    training: TrainConfig
    rank: int
    lora_alpha: float
    layer_dims: tuple[int, ...]
    solver: SolverConfig
    compression: CompressionSpec
    strategies: tuple[Strategy, ...]
    seeds: tuple[int, ...]
    output_dir: str
    precision_bits: int
    stack_reinit: bool
    metric_target: float | None
    target_fraction: float | None
    checkpoint_every: int
    threads: int


# --- config parsing -----------------------------------------------------------


def _section(doc: dict, name: str, known: tuple[str, ...], required: bool) -> dict:
    if name not in doc:
        if required:
            raise ConfigError(f"missing required section {name!r}", field=name)
        return {}
    body = doc[name]
    if body is None:
        return {}
    if not isinstance(body, dict):
        raise ConfigError(f"section {name!r} must be a mapping", field=name)
    for key in body:
        if key not in known:
            raise ConfigError(
                f"unknown key {key!r} in section {name!r}", field=f"{name}.{key}"
            )
    return body


def _require(section: dict, section_name: str, key: str):
    if key not in section or section[key] is None:
        raise ConfigError(
            f"section {section_name!r} needs {key!r}", field=f"{section_name}.{key}"
        )
    return section[key]


def _positive_int(value, field: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{field} must be a positive integer, got {value!r}",
                          field=field)
    return value


def parse_config(path: str | Path) -> ExperimentConfig:
    """Load, validate and default-fill a YAML experiment config.

    Rejects unknown keys (naming the offending section.key) and reports YAML
    syntax problems with their line number.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"config parse error: {exc.problem}", line=line) from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping of sections")
    known_sections = (
        "task", "federation", "training", "adapter", "solver", "compression", "run",
    )
    for key in doc:
        if key not in known_sections:
            raise ConfigError(f"unknown section {key!r}", field=key)

    task_sec = _section(
        doc, "task",
        ("kind", "input_dim", "output_dim", "samples", "num_clusters",
         "teacher_rank", "teacher_scale", "perturbation_scale", "noise_std",
         "aligned_perturbations", "cluster_weights"),
        required=True,
    )
    fed_sec = _section(
        doc, "federation",
        ("num_clients", "rounds", "dirichlet_alpha", "weighting",
         "train_fraction", "global_test_fraction", "equal_shards"),
        required=True,
    )
    train_sec = _section(
        doc, "training",
        ("epochs", "local_steps", "batch_size", "learning_rate"),
        required=False,
    )
    adapter_sec = _section(
        doc, "adapter", ("rank", "lora_alpha", "layer_dims"), required=False
    )
    solver_sec = _section(
        doc, "solver",
        ("steps", "learning_rate", "beta1", "beta2", "epsilon", "init_scale"),
        required=False,
    )
    comp_sec = _section(
        doc, "compression", ("mode", "bits", "keep_fraction"), required=False
    )
    run_sec = _section(
        doc, "run",
        ("strategies", "seeds", "output_dir", "precision_bits", "stack_reinit",
         "metric_target", "target_fraction", "checkpoint_every", "threads"),
        required=False,
    )

    try:
        kind = TaskKind.parse(str(_require(task_sec, "task", "kind")))
    except ValueError as exc:
        raise ConfigError(str(exc), field="task.kind") from exc
    raw_cw = task_sec.get("cluster_weights")
    if raw_cw is not None and not isinstance(raw_cw, (list, tuple)):
        raise ConfigError(
            "cluster_weights must be a list of positive numbers",
            field="task.cluster_weights",
        )
    try:
        task = TaskSpec(
            kind=kind,
            input_dim=_require(task_sec, "task", "input_dim"),
            output_dim=_require(task_sec, "task", "output_dim"),
            samples=_require(task_sec, "task", "samples"),
            num_clusters=task_sec.get("num_clusters", 2),
            teacher_rank=task_sec.get("teacher_rank", 4),
            teacher_scale=task_sec.get("teacher_scale", 1.0),
            perturbation_scale=task_sec.get("perturbation_scale", 1.0),
            noise_std=task_sec.get("noise_std", 0.0),
            aligned_perturbations=bool(task_sec.get("aligned_perturbations", False)),
            cluster_weights=None if raw_cw is None else tuple(float(v) for v in raw_cw),
        )
    except FedLoraError as exc:
        raise ConfigError(str(exc), field="task") from exc

    num_clients = _positive_int(
        _require(fed_sec, "federation", "num_clients"), "federation.num_clients"
    )
    rounds = _positive_int(
        _require(fed_sec, "federation", "rounds"), "federation.rounds"
    )
    dirichlet_alpha = float(fed_sec.get("dirichlet_alpha", 0.5))
    if dirichlet_alpha <= 0:
        raise ConfigError(
            f"dirichlet_alpha must be > 0, got {dirichlet_alpha}",
            field="federation.dirichlet_alpha",
        )
    weighting = fed_sec.get("weighting", "samples")
    if weighting not in ("samples", "uniform"):
        raise ConfigError(
            f"weighting must be 'samples' or 'uniform', got {weighting!r}",
            field="federation.weighting",
        )

    epochs = train_sec.get("epochs", 10 if "local_steps" not in train_sec else None)
    local_steps = train_sec.get("local_steps")
    try:
        training = TrainConfig(
            batch_size=train_sec.get("batch_size", 128),
            learning_rate=train_sec.get("learning_rate", 0.05),
            epochs=epochs,
            local_steps=local_steps,
        )
    except FedLoraError as exc:
        raise ConfigError(str(exc), field="training") from exc

    rank = adapter_sec.get("rank", 8)
    if not isinstance(rank, int) or isinstance(rank, bool) or rank < 1:
        raise ConfigError(f"rank must be a positive integer, got {rank!r}",
                          field="adapter.rank")
    lora_alpha = float(adapter_sec.get("lora_alpha", 8.0))
    if lora_alpha <= 0:
        raise ConfigError(f"lora_alpha must be > 0, got {lora_alpha}",
                          field="adapter.lora_alpha")
    dims = adapter_sec.get("layer_dims")
    if dims is None:
        layer_dims = (task.input_dim, task.output_dim)
    else:
        if not isinstance(dims, list) or len(dims) < 2:
            raise ConfigError(
                "layer_dims must be a list [input, ..., output]",
                field="adapter.layer_dims",
            )
        layer_dims = tuple(int(v) for v in dims)
    if rank > min(layer_dims):
        raise ConfigError(
            f"rank {rank} exceeds the smallest layer dim {min(layer_dims)}",
            field="adapter.rank",
        )

    try:
        solver = SolverConfig(
            steps=solver_sec.get("steps", 100),
            learning_rate=solver_sec.get("learning_rate", 1e-2),
            beta1=solver_sec.get("beta1", 0.9),
            beta2=solver_sec.get("beta2", 0.999),
            epsilon=solver_sec.get("epsilon", 1e-8),
            init_scale=solver_sec.get("init_scale"),
        )
    except (FedLoraError, ValueError) as exc:
        raise ConfigError(str(exc), field="solver") from exc

    try:
        compression = CompressionSpec(
            mode=CompressionMode.parse(str(comp_sec.get("mode", "none"))),
            bits=comp_sec.get("bits", 8),
            keep_fraction=comp_sec.get("keep_fraction", 1.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), field="compression") from exc

    raw_strategies = run_sec.get("strategies", ["fedit", "flora_na"])
    if not isinstance(raw_strategies, list) or not raw_strategies:
        raise ConfigError("strategies must be a non-empty list",
                          field="run.strategies")
    try:
        strategies = tuple(Strategy.parse(str(s)) for s in raw_strategies)
    except ValueError as exc:
        raise ConfigError(str(exc), field="run.strategies") from exc
    raw_seeds = run_sec.get("seeds", [0])
    if not isinstance(raw_seeds, list) or not raw_seeds:
        raise ConfigError("seeds must be a non-empty list", field="run.seeds")
    seeds = tuple(int(s) for s in raw_seeds)

    precision_bits = run_sec.get("precision_bits", 32)
    if precision_bits not in (8, 16, 32, 64):
        raise ConfigError(
            f"precision_bits must be one of 8/16/32/64, got {precision_bits!r}",
            field="run.precision_bits",
        )
    metric_target = run_sec.get("metric_target")
    target_fraction = run_sec.get("target_fraction")
    if metric_target is not None and target_fraction is not None:
        raise ConfigError(
            "set at most one of metric_target and target_fraction",
            field="run.metric_target",
        )
    checkpoint_every = run_sec.get("checkpoint_every", 0)
    if not isinstance(checkpoint_every, int) or checkpoint_every < 0:
        raise ConfigError(
            f"checkpoint_every must be an integer >= 0, got {checkpoint_every!r}",
            field="run.checkpoint_every",
        )
    threads = _positive_int(run_sec.get("threads", 1), "run.threads")

    return ExperimentConfig(
        task=task,
        num_clients=num_clients,
        rounds=rounds,
        dirichlet_alpha=dirichlet_alpha,
        weighting=weighting,
        train_fraction=float(fed_sec.get("train_fraction", 0.8)),
        global_test_fraction=float(fed_sec.get("global_test_fraction", 0.2)),
        equal_shards=bool(fed_sec.get("equal_shards", False)),
        training=training,
        rank=rank,
        lora_alpha=lora_alpha,
        layer_dims=layer_dims,
        solver=solver,
        compression=compression,
        strategies=strategies,
        seeds=seeds,
        output_dir=str(run_sec.get("output_dir", "fedlora_runs")),
        precision_bits=precision_bits,
        stack_reinit=bool(run_sec.get("stack_reinit", True)),
        metric_target=metric_target,
        target_fraction=target_fraction,
        checkpoint_every=checkpoint_every,
        threads=threads,
    )


def config_to_yaml(config: ExperimentConfig) -> str:
    """The resolved config, sectioned like the input format (dry-run echo)."""
    doc = {
        "task": {
            "kind": config.task.kind.name.lower(),
            "input_dim": config.task.input_dim,
            "output_dim": config.task.output_dim,
            "samples": config.task.samples,
            "num_clusters": config.task.num_clusters,
            "teacher_rank": config.task.teacher_rank,
            "teacher_scale": config.task.teacher_scale,
            "perturbation_scale": config.task.perturbation_scale,
            "noise_std": config.task.noise_std,
            "aligned_perturbations": config.task.aligned_perturbations,
            "cluster_weights": (
                None if config.task.cluster_weights is None
                else list(config.task.cluster_weights)
            ),
        },
        "federation": {
            "num_clients": config.num_clients,
            "rounds": config.rounds,
            "dirichlet_alpha": config.dirichlet_alpha,
            "weighting": config.weighting,
            "train_fraction": config.train_fraction,
            "global_test_fraction": config.global_test_fraction,
            "equal_shards": config.equal_shards,
        },
        "training": {
            "epochs": config.training.epochs,
            "local_steps": config.training.local_steps,
            "batch_size": config.training.batch_size,
            "learning_rate": config.training.learning_rate,
        },
        "adapter": {
            "rank": config.rank,
            "lora_alpha": config.lora_alpha,
            "layer_dims": list(config.layer_dims),
        },
        "solver": {
            "steps": config.solver.steps,
            "learning_rate": config.solver.learning_rate,
            "beta1": config.solver.beta1,
            "beta2": config.solver.beta2,
            "epsilon": config.solver.epsilon,
            "init_scale": config.solver.init_scale,
        },
        "compression": {
            "mode": config.compression.mode.name.lower(),
            "bits": config.compression.bits,
            "keep_fraction": config.compression.keep_fraction,
        },
        "run": {
            "strategies": [s.name.lower() for s in config.strategies],
            "seeds": list(config.seeds),
            "output_dir": config.output_dir,
            "precision_bits": config.precision_bits,
            "stack_reinit": config.stack_reinit,
            "metric_target": config.metric_target,
            "target_fraction": config.target_fraction,
            "checkpoint_every": config.checkpoint_every,
            "threads": config.threads,
        },
    }
    return yaml.safe_dump(doc, sort_keys=True)


# --- experiment execution -------------------------------------------------------


def _federation_config(config: ExperimentConfig, strategy: Strategy) -> FederationConfig:
    return FederationConfig(
        strategy=strategy,
        train=config.training,
        rank=config.rank,
        lora_alpha=config.lora_alpha,
        layer_dims=config.layer_dims,
        weighting=config.weighting,
        solver=config.solver,
        stack_reinit=config.stack_reinit,
        precision_bits=config.precision_bits,
        compression=config.compression,
    )


def _run_cell(
    config: ExperimentConfig, strategy: Strategy, seed: int, out_dir: Path
) -> StrategyRun:
    try:
        task, client_train, client_test, global_test = prepare_federated_data(
            config.task,
            config.num_clients,
            config.dirichlet_alpha,
            seed,
            train_fraction=config.train_fraction,
            global_test_fraction=config.global_test_fraction,
            equal_shards=config.equal_shards,
        )
        checkpoint_path = None
        if config.checkpoint_every:
            ckpt_dir = out_dir / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            checkpoint_path = ckpt_dir / f"{strategy.name.lower()}_seed{seed}.npz"
        return run_strategy(
            task,
            client_train,
            client_test,
            global_test,
            _federation_config(config, strategy),
            config.rounds,
            seed,
            checkpoint_every=config.checkpoint_every,
            checkpoint_path=checkpoint_path,
        )
    except FedLoraError as exc:
        exc.args = (f"[{strategy.name.lower()} seed={seed}] {exc}",)
        raise


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _summarize(config: ExperimentConfig, runs: list[StrategyRun]) -> dict:
    target = config.metric_target
    if target is None and config.target_fraction is not None:
        target = config.target_fraction * max(r.final_global_metric for r in runs)
    cells = []
    for run in runs:
        rounds_to_target = None
        if target is not None:
            rounds_to_target = next(
                (
                    rec.round_index
                    for rec in run.records
                    if rec.global_metric >= target
                ),
                None,
            )
            if rounds_to_target is None and run.final_global_metric >= target:
                rounds_to_target = len(run.records)
        last = run.records[-1]
        cells.append(
            {
                "strategy": run.strategy.name.lower(),
                "seed": run.seed,
                "final_global_metric": run.final_global_metric,
                "final_gen_gap": last.gen_gap,
                "final_mean_local_metric": last.mean_local_metric,
                "final_divergence": last.divergence.aggregate,
                "rounds_to_target": rounds_to_target,
                "total_up_bytes": sum(r.up_bytes for r in run.records),
                "total_down_bytes": sum(r.down_bytes for r in run.records),
            }
        )
    per_strategy = {}
    for strategy in config.strategies:
        name = strategy.name.lower()
        mine = [c for c in cells if c["strategy"] == name]
        rtt = [c["rounds_to_target"] for c in mine]
        per_strategy[name] = {
            "median_final_global_metric": statistics.median(
                c["final_global_metric"] for c in mine
            ),
            "median_final_gen_gap": statistics.median(
                c["final_gen_gap"] for c in mine
            ),
            "median_rounds_to_target": (
                statistics.median(rtt) if all(v is not None for v in rtt) else None
            ),
        }
    return {"cells": cells, "per_strategy": per_strategy, "target": target}


def run_experiment(
    config: ExperimentConfig, out_dir: str | Path, threads: int | None = None
) -> dict:
    """Execute every (strategy, seed) cell and write all artifacts.

    Cells run in a thread pool when threads > 1; artifact rows are merged in
    config order regardless, so the outputs are schedule-independent. Returns
    the summary dict (also written to summary.json).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()

    cells = [(s, seed) for s in config.strategies for seed in config.seeds]
    threads = config.threads if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(
                pool.map(lambda c: _run_cell(config, c[0], c[1], out_dir), cells)
            )
    else:
        runs = [_run_cell(config, s, seed, out_dir) for s, seed in cells]

    rounds_rows = []
    div_rows = []
    gap_rows = []
    comm_rows = []
    jsonl_lines = []
    for run in runs:
        name = run.strategy.name.lower()
        for rec in run.records:
            rounds_rows.append(
                [
                    run.seed,
                    name,
                    rec.round_index,
                    _fmt(rec.global_metric),
                    _fmt(rec.mean_local_metric),
                    _fmt(rec.gen_gap),
                ]
            )
            div_rows.append(
                [
                    run.seed,
                    name,
                    rec.round_index,
                    _fmt(rec.divergence.aggregate),
                    _fmt(rec.divergence.raw_gap),
                    _fmt(rec.fedit_reference.aggregate),
                ]
            )
            gap_rows.append([run.seed, name, rec.round_index, _fmt(rec.gen_gap)])
            jsonl_lines.append(
                json.dumps(
                    {
                        "seed": run.seed,
                        "strategy": name,
                        "round": rec.round_index,
                        "global_metric": rec.global_metric,
                        "mean_local_metric": rec.mean_local_metric,
                        "gen_gap": rec.gen_gap,
                        "divergence": report_to_json_dict(rec.divergence),
                        "fedit_reference": report_to_json_dict(rec.fedit_reference),
                        "comm": {
                            "up_entries": rec.up_entries,
                            "down_entries": rec.down_entries,
                            "up_bytes": rec.up_bytes,
                            "down_bytes": rec.down_bytes,
                        },
                    },
                    sort_keys=True,
                )
            )
        for crec in run.state.ledger.records:
            comm_rows.append(
                [
                    run.seed,
                    name,
                    crec.round_index,
                    crec.client_id,
                    crec.direction,
                    crec.entries,
                    crec.bytes,
                ]
            )

    _write_csv(
        out_dir / "rounds.csv",
        ["seed", "strategy", "round", "global_metric", "mean_local_metric", "gen_gap"],
        rounds_rows,
    )
    _write_csv(
        out_dir / "divergence.csv",
        ["seed", "strategy", "round", "divergence", "raw_gap", "fedit_divergence"],
        div_rows,
    )
    _write_csv(
        out_dir / "gengap.csv",
        ["seed", "strategy", "round", "gen_gap"],
        gap_rows,
    )
    _write_csv(
        out_dir / "comm.csv",
        ["seed", "strategy", "round", "client", "direction", "entries", "bytes"],
        comm_rows,
    )
    (out_dir / "rounds.jsonl").write_text("\n".join(jsonl_lines) + "\n")

    summary = _summarize(config, runs)
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    (out_dir / "config.yaml").write_text(config_to_yaml(config))

    finished = datetime.now(timezone.utc)
    meta = {
        "started": started.isoformat(),
        "finished": finished.isoformat(),
        "duration_s": time.perf_counter() - t0,
        "backend": active_backend(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return summary


# --- sweep ----------------------------------------------------------------------

_SWEEP_PARAMS = ("dirichlet_alpha", "num_clients")


def run_sweep(
    config: ExperimentConfig,
    param: str,
    values: list[float],
    out_dir: str | Path,
    threads: int | None = None,
) -> dict:
    """Rerun the experiment once per value of a federation parameter."""
    if param not in _SWEEP_PARAMS:
        raise ConfigError(
            f"sweep parameter must be one of {_SWEEP_PARAMS}, got {param!r}",
            field=param,
        )
    if not values:
        raise ConfigError("sweep needs at least one value", field="values")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"param": param, "values": [], "runs": {}}
    for value in values:
        if param == "num_clients":
            value = int(value)
            cfg = dataclasses.replace(config, num_clients=value)
        else:
            value = float(value)
            cfg = dataclasses.replace(config, dirichlet_alpha=value)
        sub = out_dir / f"{param}={value:g}"
        run_experiment(cfg, sub, threads)
        manifest["values"].append(value)
        manifest["runs"][f"{value:g}"] = sub.name
    (out_dir / "sweep.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    return manifest


# --- plot data ------------------------------------------------------------------


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _median_by(rows: list[dict], value_key: str) -> dict[tuple[str, int], float]:
    grouped: dict[tuple[str, int], list[float]] = {}
    for row in rows:
        if row[value_key] == "":
            continue
        key = (row["strategy"], int(row["round"]))
        grouped.setdefault(key, []).append(float(row[value_key]))
    return {k: statistics.median(v) for k, v in grouped.items()}


def emit_plots_data(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Reduce artifacts to plot-ready CSVs; returns the paths written.

    A sweep directory yields final-metric-vs-parameter; a plain run yields
    divergence-vs-round and gen-gap-vs-round, each the median over seeds.
    """
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "plots"
    written: list[Path] = []

    sweep_path = run_dir / "sweep.json"
    if sweep_path.exists():
        manifest = json.loads(sweep_path.read_text())
        param = manifest["param"]
        rows = []
        for value in manifest["values"]:
            sub = run_dir / manifest["runs"][f"{value:g}"]
            summary_path = sub / "summary.json"
            if not summary_path.exists():
                raise MissingArtifactsError(f"no summary.json under {sub}")
            summary = json.loads(summary_path.read_text())
            for name in sorted(summary["per_strategy"]):
                rows.append(
                    [
                        name,
                        value,
                        _fmt(summary["per_strategy"][name]["median_final_global_metric"]),
                    ]
                )
        rows.sort(key=lambda r: (r[0], r[1]))
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"final_metric_vs_{param}.csv"
        _write_csv(path, ["strategy", param, "final_global_metric"], rows)
        return [path]

    rounds_path = run_dir / "rounds.csv"
    div_path = run_dir / "divergence.csv"
    if not rounds_path.exists() or not div_path.exists():
        raise MissingArtifactsError(
            f"{run_dir} holds neither sweep.json nor rounds.csv/divergence.csv"
        )
    out.mkdir(parents=True, exist_ok=True)

    div_medians = _median_by(_read_csv(div_path), "divergence")
    rows = [
        [name, rnd, _fmt(v)]
        for (name, rnd), v in sorted(div_medians.items())
    ]
    path = out / "divergence_vs_round.csv"
    _write_csv(path, ["strategy", "round", "divergence"], rows)
    written.append(path)

    gap_medians = _median_by(_read_csv(rounds_path), "gen_gap")
    rows = [
        [name, rnd, _fmt(v)]
        for (name, rnd), v in sorted(gap_medians.items())
    ]
    path = out / "gengap_vs_round.csv"
    _write_csv(path, ["strategy", "round", "gen_gap"], rows)
    written.append(path)
    return written


# --- decomposition comparison -----------------------------------------------


def run_compare_decomposition(
    config: ExperimentConfig,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    trace_out: str | Path | None = None,
) -> str:
    """Train one constraint-free round from the config, then time NA against
    SVD and pivoted QR on the first layer's client updates. Returns the CSV
    table text (and writes it plus an optional solver trace)."""
    seed = config.seeds[0] if seed is None else seed
    task, client_train, _, _ = prepare_federated_data(
        config.task,
        config.num_clients,
        config.dirichlet_alpha,
        seed,
        train_fraction=config.train_fraction,
        global_test_fraction=config.global_test_fraction,
    )
    fed = _federation_config(config, Strategy.FEDIT)
    state = init_server(task, fed, seed)
    updates = [
        local_train(
            f"client{u}",
            client_train[u],
            state.adapters,
            task.kind,
            config.training,
            Constraint.NONE,
            stream(seed, DOMAIN_TRAIN, 0, u),
        )
        for u in range(config.num_clients)
    ]
    lid = state.adapters.layer_ids()[0]
    b_mats = np.stack([u.adapters[lid].b for u in updates])
    a_mats = np.stack([u.adapters[lid].a for u in updates])
    if config.weighting == "uniform":
        weights = ClientWeights.uniform(len(updates)).weights
    else:
        weights = ClientWeights.from_sample_counts(updates).weights
    rows = compare_execution(b_mats, a_mats, weights, config.rank, config.solver)
    text = comparison_to_csv(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "decomposition.csv").write_text(text)
    if trace_out is not None:
        pair = solve_coefficients(b_mats, a_mats, weights, config.solver)
        Path(trace_out).write_text(trace_to_csv(pair))
    return text


# --- argument parsing / entry point -------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlora",
        description="Federated LoRA aggregation simulator and experiment runner.",
        epilog=_DEFAULTS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser(
        "run",
        help="execute one experiment config",
        epilog=_DEFAULTS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    run_p.add_argument("--config", required=True, help="YAML experiment config")
    run_p.add_argument("--out", help="output directory (overrides config and env)")
    run_p.add_argument("--seeds", help="comma-separated seed override")
    run_p.add_argument("--strategies", help="comma-separated strategy override")
    run_p.add_argument("--threads", type=int, help="parallel (strategy, seed) cells")
    run_p.add_argument(
        "--dry-run",
        action="store_true",
        help="echo the resolved config and exit without running",
    )

    sweep_p = sub.add_parser("sweep", help="run a config over a parameter grid")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--param", required=True, choices=_SWEEP_PARAMS)
    sweep_p.add_argument(
        "--values", required=True, help="comma-separated parameter values"
    )
    sweep_p.add_argument("--out", help="sweep root directory")
    sweep_p.add_argument("--threads", type=int)
    sweep_p.add_argument("--dry-run", action="store_true")

    cmp_p = sub.add_parser(
        "compare-decomposition",
        help="time the coefficient solver against SVD and QR factorization",
    )
    cmp_p.add_argument("--config", required=True)
    cmp_p.add_argument("--seed", type=int, help="defaults to the config's first seed")
    cmp_p.add_argument("--out", help="also write decomposition.csv here")
    cmp_p.add_argument("--trace-out", help="write the solver objective trace CSV")

    plots_p = sub.add_parser(
        "emit-plots-data", help="reduce run artifacts to plot-ready CSVs"
    )
    plots_p.add_argument("--run-dir", required=True)
    plots_p.add_argument("--out", help="defaults to RUN_DIR/plots")
    return parser


def _resolve_out(cli_out: str | None, config_out: str) -> Path:
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(ENV_OUT)
    if env:
        return Path(env)
    return Path(config_out)


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "seeds", None):
        config = dataclasses.replace(
            config, seeds=tuple(int(s) for s in args.seeds.split(","))
        )
    if getattr(args, "strategies", None):
        try:
            strategies = tuple(
                Strategy.parse(s) for s in args.strategies.split(",")
            )
        except ValueError as exc:
            raise ConfigError(str(exc), field="strategies") from exc
        config = dataclasses.replace(config, strategies=strategies)
    if getattr(args, "threads", None):
        config = dataclasses.replace(config, threads=args.threads)
    return config


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "run":
        config = _apply_overrides(parse_config(args.config), args)
        if args.dry_run:
            print(config_to_yaml(config), end="")
            return 0
        out = _resolve_out(args.out, config.output_dir)
        run_experiment(config, out)
        print(f"artifacts written to {out}")
        return 0
    if args.command == "sweep":
        config = _apply_overrides(parse_config(args.config), args)
        try:
            values = [float(v) for v in args.values.split(",") if v != ""]
        except ValueError as exc:
            raise ConfigError(f"bad sweep values: {args.values!r}",
                              field="values") from exc
        if args.dry_run:
            print(config_to_yaml(config), end="")
            return 0
        out = _resolve_out(args.out, config.output_dir)
        run_sweep(config, args.param, values, out, args.threads)
        print(f"sweep artifacts written to {out}")
        return 0
    if args.command == "compare-decomposition":
        config = parse_config(args.config)
        text = run_compare_decomposition(
            config, seed=args.seed, out_dir=args.out, trace_out=args.trace_out
        )
        print(text, end="")
        return 0
    if args.command == "emit-plots-data":
        written = emit_plots_data(args.run_dir, args.out)
        for path in written:
            print(path)
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        loc = f" (line {exc.line})" if exc.line else ""
        print(f"config error{loc}: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactsError as exc:
        print(f"missing artifacts: {exc}", file=sys.stderr)
        return 2
    except FedLoraError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except np.linalg.LinAlgError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
