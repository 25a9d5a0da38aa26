"""fedlora: a desk-scale simulator for federated LoRA fine-tuning.

The package splits into five layers:

    adapters        LoRA pairs, frozen layers, gradients, text matrix dumps
    aggregation     the seven server-side combination rules, including the
                    nearly-accurate coefficient aggregation
    coeffsolver     the Gram-space Adam solver behind nearly-accurate
                    aggregation, plus a brute-force grid oracle
    decomposition   truncated-SVD / pivoted-QR baselines and the timing
                    comparison harness
    fedsim          synthetic tasks, Dirichlet partitioning, local training,
                    and round orchestration
    metrics         divergence reports, communication ledger, compression

`fedlora.cli` wires everything into the `fedlora` command. Hot numeric
kernels run under numba when available; set FEDLORA_BACKEND=numpy to force
the pure-numpy fallback (see fedlora.backend).
"""

from .adapters import (
    AdapterSet,
    DenseMatrix,
    FrozenLayer,
    LoraPair,
    dump_matrix,
    effective_weight,
    init_lora,
    load_matrix,
    lora_delta,
    lora_gradients,
)
from .aggregation import (
    AggregateResult,
    ClientUpdate,
    ClientWeights,
    LayerAggregate,
    Strategy,
    aggregate,
    approx_delta,
    result_from_json,
    result_to_json,
)
from .backend import active_backend, available_backends
from .coeffsolver import (
    CoefficientPair,
    SolverConfig,
    brute_force_coefficients,
    na_gradients,
    na_objective,
    solve_coefficients,
)
from .decomposition import (
    ComparisonRow,
    FactorizationReport,
    compare_execution,
    factorize_gram_schmidt,
    factorize_svd,
)
from .errors import FedLoraError
from .metrics import (
    CommLedger,
    CompressionMode,
    CompressionSpec,
    DivergenceReport,
    LayerShape,
    comm_account,
    compress,
    divergence,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterSet",
    "AggregateResult",
    "ClientUpdate",
    "ClientWeights",
    "CoefficientPair",
    "CommLedger",
    "ComparisonRow",
    "CompressionMode",
    "CompressionSpec",
    "DenseMatrix",
    "DivergenceReport",
    "FactorizationReport",
    "FedLoraError",
    "FrozenLayer",
    "LayerAggregate",
    "LayerShape",
    "LoraPair",
    "SolverConfig",
    "Strategy",
    "active_backend",
    "aggregate",
    "approx_delta",
    "available_backends",
    "brute_force_coefficients",
    "comm_account",
    "compare_execution",
    "compress",
    "divergence",
    "dump_matrix",
    "effective_weight",
    "factorize_gram_schmidt",
    "factorize_svd",
    "init_lora",
    "load_matrix",
    "lora_delta",
    "lora_gradients",
    "na_gradients",
    "na_objective",
    "result_from_json",
    "result_to_json",
    "solve_coefficients",
]
