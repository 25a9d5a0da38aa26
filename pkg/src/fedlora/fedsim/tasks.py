"""Synthetic heterogeneous tasks and Dirichlet partitioning.

A task is a linear teacher built on top of the frozen base weight: the global
teacher is base + a low-rank delta (so a sufficiently-ranked adapter can reach
it exactly), and heterogeneity comes from per-cluster perturbations of the
teacher that sum to zero across clusters. Perturbations are independent
low-rank directions by default; with aligned_perturbations they are signed
multiples of the teacher delta itself, so clusters pull the same directions
with conflicting signs and separate averaging of the factors cancels what the
averaged product keeps. Regression targets are the teacher
output plus Gaussian noise; classification labels are the argmax of the
per-cluster logits, with noise applied to the logits before the argmax.

Partitioning follows the usual Dirichlet recipe: per key value (class label
for classification, cluster id for regression) draw client proportions from
Dir(alpha * 1_U) and split that key's samples accordingly. Small alpha gives
skewed clients, large alpha approaches an IID split.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..adapters import DenseMatrix
from ..errors import InsufficientSamplesError, InvalidSpecError
from ..rng import DOMAIN_PARTITION, DOMAIN_TASK, stream


class TaskKind(enum.Enum):
    REGRESSION_TEACHER = "regression_teacher"
    CLUSTERED_CLASSIFICATION = "clustered_classification"

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(
                f"unknown task kind {name!r}; expected one of "
                f"{[k.name.lower() for k in cls]}"
            ) from None


@dataclass(frozen=True)
class TaskSpec:
    """Generation knobs for one synthetic task."""

    kind: TaskKind
    input_dim: int
    output_dim: int
    samples: int
    num_clusters: int = 2
    teacher_rank: int = 4
    teacher_scale: float = 1.0
    perturbation_scale: float = 1.0
    noise_std: float = 0.0
    aligned_perturbations: bool = False
    cluster_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise InvalidSpecError(
                f"dims must be >= 1, got {self.input_dim}x{self.output_dim}"
            )
        if self.samples < 1:
            raise InvalidSpecError(f"samples must be >= 1, got {self.samples}")
        if self.num_clusters < 1:
            raise InvalidSpecError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if not 1 <= self.teacher_rank <= min(self.input_dim, self.output_dim):
            raise InvalidSpecError(
                f"teacher_rank {self.teacher_rank} not in "
                f"[1, min({self.output_dim}, {self.input_dim})]"
            )
        if self.noise_std < 0:
            raise InvalidSpecError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.teacher_scale < 0 or self.perturbation_scale < 0:
            raise InvalidSpecError("scales must be >= 0")
        if self.aligned_perturbations and self.teacher_scale <= 0:
            raise InvalidSpecError(
                "aligned perturbations need a nonzero teacher delta to align with"
            )
        if self.cluster_weights is not None:
            if len(self.cluster_weights) != self.num_clusters:
                raise InvalidSpecError(
                    f"cluster_weights has {len(self.cluster_weights)} entries "
                    f"for {self.num_clusters} clusters"
                )
            if any(wc <= 0 for wc in self.cluster_weights):
                raise InvalidSpecError("cluster_weights must be positive")


@dataclass(frozen=True)
class SyntheticTask:
    """Frozen outcome of task generation.

    teacher = base_weight + low-rank delta; perturbations is one matrix per
    cluster, centered under the cluster weights so they cancel in the
    population average (a single cluster therefore gets an exactly-zero
    perturbation).
    """

    kind: TaskKind
    base_weight: DenseMatrix
    teacher: DenseMatrix
    perturbations: tuple[DenseMatrix, ...]
    noise_std: float
    num_classes: int | None = None

    def __post_init__(self):
        for p in self.perturbations:
            if p.shape != self.teacher.shape:
                raise InvalidSpecError(
                    f"perturbation shape {p.shape} != teacher {self.teacher.shape}"
                )
        if self.noise_std < 0:
            raise InvalidSpecError("noise_std must be >= 0")

    @property
    def input_dim(self) -> int:
        return self.teacher.shape[1]

    @property
    def output_dim(self) -> int:
        return self.teacher.shape[0]

    @property
    def num_clusters(self) -> int:
        return len(self.perturbations)

    def cluster_teacher(self, cluster: int) -> DenseMatrix:
        return self.teacher + self.perturbations[cluster]


@dataclass(frozen=True)
class Dataset:
    """Plain arrays: inputs, targets (vectors or int labels), cluster ids."""

    x: np.ndarray
    y: np.ndarray
    cluster_ids: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2:
            raise InvalidSpecError("x must be (n, d)")
        if self.y.shape[0] != self.x.shape[0] or (
            self.cluster_ids.shape[0] != self.x.shape[0]
        ):
            raise InvalidSpecError("x, y and cluster_ids must share length")

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.x[idx], self.y[idx], self.cluster_ids[idx])


def _low_rank(rng: np.random.Generator, k: int, d: int, r: int, scale: float):
    """Random rank-r matrix rescaled to Frobenius norm `scale`."""
    m = rng.normal(size=(k, r)) @ rng.normal(size=(r, d))
    nrm = float(np.linalg.norm(m))
    return (scale / nrm) * m if nrm > 0 else m


def generate_task(spec: TaskSpec, seed: int) -> tuple[SyntheticTask, Dataset]:
    """Build the teacher family and sample the full dataset.

    Deterministic per seed. Cluster sizes follow cluster_weights (equal by
    default) by largest-remainder rounding, then the ids are shuffled, so
    every cluster is populated whenever its rounded share is nonzero.
    """
    rng = stream(seed, DOMAIN_TASK)
    k, d, n = spec.output_dim, spec.input_dim, spec.samples

    base = rng.normal(0.0, 1.0 / math.sqrt(d), size=(k, d))
    delta = _low_rank(rng, k, d, spec.teacher_rank, spec.teacher_scale)
    teacher = base + delta

    if spec.cluster_weights is None:
        cw = np.full(spec.num_clusters, 1.0 / spec.num_clusters)
    else:
        cw = np.asarray(spec.cluster_weights, dtype=np.float64)
        cw = cw / cw.sum()

    if spec.aligned_perturbations:
        # clusters disagree about the strength of the same adaptation: the
        # perturbation is a signed multiple of the unit-norm teacher delta
        signs = np.array([1.0 if c % 2 == 0 else -1.0 for c in range(spec.num_clusters)])
        unit = delta / spec.teacher_scale
        raw = [s * spec.perturbation_scale * unit for s in signs]
    else:
        raw = [
            _low_rank(rng, k, d, spec.teacher_rank, spec.perturbation_scale)
            for _ in range(spec.num_clusters)
        ]
    # center under the cluster weights, so the population-mean teacher is
    # the global teacher itself
    center = sum(wc * p for wc, p in zip(cw, raw))
    perturbations = tuple(p - center for p in raw)

    counts = np.floor(cw * n).astype(int)
    fractional = cw * n - counts
    for c in np.argsort(-fractional)[: n - counts.sum()]:
        counts[c] += 1
    cluster_ids = np.repeat(np.arange(spec.num_clusters), counts)
    cluster_ids = rng.permutation(cluster_ids)

    x = rng.normal(size=(n, d))
    clean = np.empty((n, k))
    for c in range(spec.num_clusters):
        mask = cluster_ids == c
        clean[mask] = x[mask] @ (teacher + perturbations[c]).T

    num_classes = None
    if spec.kind is TaskKind.REGRESSION_TEACHER:
        y = clean + spec.noise_std * rng.normal(size=(n, k))
    else:
        logits = clean + spec.noise_std * rng.normal(size=(n, k))
        y = np.argmax(logits, axis=1).astype(np.int64)
        num_classes = k

    task = SyntheticTask(
        kind=spec.kind,
        base_weight=base,
        teacher=teacher,
        perturbations=perturbations,
        noise_std=spec.noise_std,
        num_classes=num_classes,
    )
    return task, Dataset(x=x, y=y, cluster_ids=cluster_ids)


# --- partitioning -------------------------------------------------------------


@dataclass(frozen=True)
class Partition:
    """Disjoint per-client index sets covering the whole dataset."""

    indices: tuple[np.ndarray, ...]

    def __post_init__(self):
        flat = np.concatenate(self.indices) if self.indices else np.array([], int)
        if len(np.unique(flat)) != flat.size:
            raise InvalidSpecError("partition assigns a sample twice")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(idx.size for idx in self.indices)

    def client(self, dataset: Dataset, u: int) -> Dataset:
        return dataset.take(self.indices[u])


def dirichlet_split(
    keys: np.ndarray,
    num_clients: int,
    alpha: float,
    rng: np.random.Generator,
    min_size: int = 1,
) -> list[np.ndarray]:
    """Assign indices to clients with Dir(alpha)-distributed key proportions.

    Every client ends up with at least min_size samples: when the draw
    starves a client, single samples are moved over from the currently
    largest one (the pigeonhole argument guarantees a donor above min_size
    exists as long as n >= num_clients * min_size).
    """
    if alpha <= 0:
        raise InvalidSpecError(f"dirichlet alpha must be > 0, got {alpha}")
    keys = np.asarray(keys)
    n = keys.shape[0]
    if n < num_clients * min_size:
        raise InsufficientSamplesError(
            f"{n} samples cannot give {num_clients} clients {min_size} each"
        )
    buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for value in np.unique(keys):
        idx = np.flatnonzero(keys == value)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
        for u, chunk in enumerate(np.split(idx, cuts)):
            if chunk.size:
                buckets[u].append(chunk)
    parts = [
        np.sort(np.concatenate(b)) if b else np.array([], dtype=np.int64)
        for b in buckets
    ]
    while True:
        sizes = [p.size for p in parts]
        short = int(np.argmin(sizes))
        if sizes[short] >= min_size:
            break
        donor = int(np.argmax(sizes))
        moved = parts[donor][-1]
        parts[donor] = parts[donor][:-1]
        parts[short] = np.sort(np.append(parts[short], moved))
    return parts


def dirichlet_mixture_split(
    keys: np.ndarray,
    num_clients: int,
    alpha: float,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Equal-size shards whose key mix follows a per-client Dir(alpha) draw.

    The complement of dirichlet_split: that one fixes each key's total and
    lets shard sizes float, this one fixes shard sizes and lets each client's
    key proportions float. Desired per-key counts are rounded by largest
    remainder and clipped to what is still in the pools; any shortfall is
    topped up from the fullest remaining pool, so late clients can deviate
    from their drawn mix when a key runs dry.
    """
    if alpha <= 0:
        raise InvalidSpecError(f"dirichlet alpha must be > 0, got {alpha}")
    keys = np.asarray(keys)
    n = keys.shape[0]
    if n < num_clients:
        raise InsufficientSamplesError(
            f"{n} samples cannot give {num_clients} clients 1 each"
        )
    values = np.unique(keys)
    pools = []
    for value in values:
        idx = np.flatnonzero(keys == value)
        rng.shuffle(idx)
        pools.append(list(idx))
    sizes = np.full(num_clients, n // num_clients)
    sizes[: n % num_clients] += 1
    parts = []
    for m in sizes:
        props = rng.dirichlet(np.full(values.size, alpha))
        desired = props * m
        counts = np.minimum(np.floor(desired).astype(int),
                            [len(p) for p in pools])
        while counts.sum() < m:
            score = desired - counts
            score[counts >= np.array([len(p) for p in pools])] = -np.inf
            counts[int(np.argmax(score))] += 1
        taken = []
        for v, c in enumerate(counts):
            taken.extend(pools[v][:c])
            del pools[v][:c]
        parts.append(np.sort(np.array(taken, dtype=np.int64)))
    return parts


def partition_dataset(
    dataset: Dataset,
    kind: TaskKind,
    num_clients: int,
    alpha: float,
    seed: int,
    min_size: int = 1,
    equal_shards: bool = False,
) -> Partition:
    """Dirichlet partition keyed on class labels (classification) or cluster
    ids (regression, where the cluster plays the class role)."""
    keys = (
        dataset.y
        if kind is TaskKind.CLUSTERED_CLASSIFICATION
        else dataset.cluster_ids
    )
    rng = stream(seed, DOMAIN_PARTITION)
    if equal_shards:
        return Partition(tuple(dirichlet_mixture_split(keys, num_clients, alpha, rng)))
    return Partition(
        tuple(dirichlet_split(keys, num_clients, alpha, rng, min_size=min_size))
    )


def holdout(
    dataset: Dataset, fraction: float, rng: np.random.Generator
) -> tuple[Dataset, Dataset]:
    """Random split into (rest, held-out); the held-out part gets
    ceil(fraction * n) samples. Both parts must be nonempty."""
    n = len(dataset)
    cut = math.ceil(fraction * n)
    if cut < 1 or cut >= n:
        raise InsufficientSamplesError(
            f"cannot hold out {cut} of {n} samples and keep both parts nonempty"
        )
    perm = rng.permutation(n)
    return dataset.take(np.sort(perm[cut:])), dataset.take(np.sort(perm[:cut]))


def prepare_federated_data(
    spec: TaskSpec,
    num_clients: int,
    dirichlet_alpha: float,
    seed: int,
    train_fraction: float = 0.8,
    global_test_fraction: float = 0.2,
    equal_shards: bool = False,
) -> tuple[SyntheticTask, list[Dataset], list[Dataset], Dataset]:
    """Generate and split one seed's data.

    Order: carve the global test set out of the full sample, Dirichlet the
    rest across clients (each gets at least two samples so the per-client
    train/test split stays nonempty; with equal_shards the sizes are uniform
    and skew lives in the per-client mix), then hold out 1 - train_fraction
    of each shard as that client's local test set.

    Returns (task, per-client train, per-client test, global test).
    """
    if not 0 < train_fraction < 1:
        raise InvalidSpecError(
            f"train_fraction must be in (0, 1), got {train_fraction}"
        )
    if not 0 < global_test_fraction < 1:
        raise InvalidSpecError(
            f"global_test_fraction must be in (0, 1), got {global_test_fraction}"
        )
    task, dataset = generate_task(spec, seed)
    pool, global_test = holdout(
        dataset, global_test_fraction, stream(seed, DOMAIN_PARTITION, 0)
    )
    partition = partition_dataset(
        pool, spec.kind, num_clients, dirichlet_alpha, seed, min_size=2,
        equal_shards=equal_shards,
    )
    client_train: list[Dataset] = []
    client_test: list[Dataset] = []
    for u in range(num_clients):
        shard = partition.client(pool, u)
        train, test = holdout(
            shard, 1.0 - train_fraction, stream(seed, DOMAIN_PARTITION, 1 + u)
        )
        client_train.append(train)
        client_test.append(test)
    return task, client_train, client_test, global_test
