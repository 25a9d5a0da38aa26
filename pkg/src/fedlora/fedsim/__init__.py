"""Federated simulation: tasks, partitioning, local training, rounds."""

from .rounds import (
    FederationConfig,
    RoundRecord,
    ServerState,
    StrategyRun,
    broadcast_model,
    init_server,
    load_checkpoint,
    run_round,
    run_strategy,
    save_checkpoint,
)
from .tasks import (
    Dataset,
    Partition,
    SyntheticTask,
    TaskKind,
    TaskSpec,
    dirichlet_mixture_split,
    dirichlet_split,
    generate_task,
    holdout,
    partition_dataset,
    prepare_federated_data,
)
from .training import (
    Constraint,
    TrainConfig,
    evaluate,
    evaluate_metric,
    forward,
    local_train,
)

__all__ = [
    "Constraint",
    "Dataset",
    "FederationConfig",
    "Partition",
    "RoundRecord",
    "ServerState",
    "StrategyRun",
    "SyntheticTask",
    "TaskKind",
    "TaskSpec",
    "TrainConfig",
    "broadcast_model",
    "dirichlet_mixture_split",
    "dirichlet_split",
    "evaluate",
    "evaluate_metric",
    "forward",
    "generate_task",
    "holdout",
    "init_server",
    "load_checkpoint",
    "local_train",
    "partition_dataset",
    "prepare_federated_data",
    "run_round",
    "run_strategy",
    "save_checkpoint",
]
