"""LoRA adapter core: representation, initialization, application, gradients.

A LoRA-adapted linear layer computes y = (W0 + R + (alpha/r) * B @ A) @ x
where W0 is the frozen pretrained weight (k x d), R is an optional dense
residual correction (k x d, used by residual-shipping aggregation), and the
trainable part is the pair B (k x r), A (r x d) with r << min(k, d).

All matrices are float64, row-major numpy arrays. Values are treated as
immutable after construction; operations return new arrays.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidDimensionsError, NonFiniteError, ShapeMismatchError

# A dense matrix is a plain 2-D float64 ndarray throughout the library.
DenseMatrix = np.ndarray


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> DenseMatrix:
    """Coerce to a C-contiguous float64 2-D array, optionally checking shape."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeMismatchError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeMismatchError(f"expected {cols} cols, got {m.shape[1]}")
    return m


def _frozen_copy(m: np.ndarray) -> np.ndarray:
    out = np.array(m, dtype=np.float64, order="C", copy=True)
    out.setflags(write=False)
    return out


def check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{what} contains NaN or Inf entries")
    return m


@dataclass(frozen=True)
class LoraPair:
    """One adapter: B (k x r) and A (r x d), rank r, scale numerator alpha.

    The effective weight update is (alpha / rank) * B @ A.
    """

    a: DenseMatrix
    b: DenseMatrix
    rank: int
    alpha: float

    def __post_init__(self):
        a = as_matrix(self.a)
        b = as_matrix(self.b)
        if self.rank < 1:
            raise InvalidDimensionsError(f"rank must be >= 1, got {self.rank}")
        if a.shape[0] != self.rank or b.shape[1] != self.rank:
            raise ShapeMismatchError(
                f"rank {self.rank} inconsistent with A {a.shape} / B {b.shape}"
            )
        if self.rank > min(b.shape[0], a.shape[1]):
            raise InvalidDimensionsError(
                f"rank {self.rank} exceeds min(k={b.shape[0]}, d={a.shape[1]})"
            )
        if not self.alpha > 0:
            raise InvalidDimensionsError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "a", _frozen_copy(a))
        object.__setattr__(self, "b", _frozen_copy(b))

    @property
    def out_dim(self) -> int:
        return self.b.shape[0]

    @property
    def in_dim(self) -> int:
        return self.a.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass(frozen=True)
class FrozenLayer:
    """Frozen pretrained weight plus an optional dense residual correction.

    w0 is never touched by training; only the residual slot may be replaced
    (residual-shipping strategies and the full-parameter reference write it).
    """

    w0: DenseMatrix
    residual: DenseMatrix = None  # type: ignore[assignment]

    def __post_init__(self):
        w0 = as_matrix(self.w0)
        res = self.residual
        if res is None:
            res = np.zeros_like(w0)
        res = as_matrix(res, rows=w0.shape[0], cols=w0.shape[1])
        object.__setattr__(self, "w0", _frozen_copy(w0))
        object.__setattr__(self, "residual", _frozen_copy(res))

    def with_residual(self, residual: DenseMatrix) -> "FrozenLayer":
        return FrozenLayer(self.w0, residual)

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape


@dataclass(frozen=True)
class AdapterSet:
    """Ordered per-layer adapters: (layer-id, FrozenLayer, LoraPair) triples.

    Layer ids must be unique; all clients in one experiment share the same ids
    and shapes so aggregation can pair layers positionally or by id.
    """

    layers: tuple[tuple[str, FrozenLayer, LoraPair], ...]

    def __post_init__(self):
        ids = [lid for lid, _, _ in self.layers]
        if len(set(ids)) != len(ids):
            raise ShapeMismatchError(f"duplicate layer ids: {ids}")
        for lid, frozen, pair in self.layers:
            k, d = frozen.shape
            if pair.out_dim != k or pair.in_dim != d:
                raise ShapeMismatchError(
                    f"layer {lid}: pair {pair.out_dim}x{pair.in_dim} does not "
                    f"match frozen weight {k}x{d}"
                )
        object.__setattr__(self, "layers", tuple(self.layers))

    def layer_ids(self) -> tuple[str, ...]:
        return tuple(lid for lid, _, _ in self.layers)

    def pair(self, layer_id: str) -> LoraPair:
        for lid, _, p in self.layers:
            if lid == layer_id:
                return p
        raise KeyError(layer_id)

    def frozen(self, layer_id: str) -> FrozenLayer:
        for lid, f, _ in self.layers:
            if lid == layer_id:
                return f
        raise KeyError(layer_id)

    def replace_pair(self, layer_id: str, pair: LoraPair) -> "AdapterSet":
        out = []
        found = False
        for lid, f, p in self.layers:
            if lid == layer_id:
                out.append((lid, f, pair))
                found = True
            else:
                out.append((lid, f, p))
        if not found:
            raise KeyError(layer_id)
        return AdapterSet(tuple(out))

    def replace_frozen(self, layer_id: str, frozen: FrozenLayer) -> "AdapterSet":
        out = []
        found = False
        for lid, f, p in self.layers:
            if lid == layer_id:
                out.append((lid, frozen, p))
                found = True
            else:
                out.append((lid, f, p))
        if not found:
            raise KeyError(layer_id)
        return AdapterSet(tuple(out))


def init_lora(k: int, d: int, r: int, alpha: float, seed) -> LoraPair:
    """Fresh adapter: A Kaiming-uniform with fan-in d, B all zeros.

    A entries are uniform on [-sqrt(6/d), +sqrt(6/d)]; the zero B makes the
    initial update exactly zero. `seed` may be an int, SeedSequence or
    Generator; identical inputs give bit-identical pairs.
    """
    if k < 1 or d < 1:
        raise InvalidDimensionsError(f"matrix sizes must be >= 1, got k={k}, d={d}")
    if r < 1 or r > min(k, d):
        raise InvalidDimensionsError(f"rank {r} not in [1, min({k}, {d})]")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / d)
    a = rng.uniform(-bound, bound, size=(r, d))
    b = np.zeros((k, r))
    return LoraPair(a=a, b=b, rank=r, alpha=alpha)


def lora_delta(pair: LoraPair) -> DenseMatrix:
    """The effective weight update (alpha/rank) * B @ A, shape k x d."""
    return pair.scale * (pair.b @ pair.a)


def effective_weight(layer: FrozenLayer, pair: LoraPair) -> DenseMatrix:
    """w0 + residual + lora_delta(pair)."""
    k, d = layer.shape
    if pair.out_dim != k or pair.in_dim != d:
        raise ShapeMismatchError(
            f"pair {pair.out_dim}x{pair.in_dim} vs frozen weight {k}x{d}"
        )
    return layer.w0 + layer.residual + lora_delta(pair)


def lora_gradients(
    layer: FrozenLayer, pair: LoraPair, x: np.ndarray, gy: np.ndarray
) -> tuple[DenseMatrix, DenseMatrix]:
    """Closed-form adapter gradients for a batch through y = W_eff @ x.

    x is n x d, gy is the upstream gradient n x k. With G = gy^T @ x (summed
    over the batch, not averaged - the trainer owns the 1/n) and s = alpha/r:

        gB = s * G @ A^T        (k x r)
        gA = s * B^T @ G        (r x d)

    Only A and B receive gradients; w0 and the residual are frozen.
    """
    x = np.asarray(x, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if x.ndim != 2 or gy.ndim != 2:
        raise ShapeMismatchError("x and gy must be 2-D batches")
    if x.shape[0] != gy.shape[0]:
        raise ShapeMismatchError(
            f"batch sizes differ: x has {x.shape[0]}, gy has {gy.shape[0]}"
        )
    if x.shape[1] != pair.in_dim or gy.shape[1] != pair.out_dim:
        raise ShapeMismatchError(
            f"x {x.shape} / gy {gy.shape} do not match layer "
            f"{pair.out_dim}x{pair.in_dim}"
        )
    g = gy.T @ x
    s = pair.scale
    gb = s * (g @ pair.a.T)
    ga = s * (pair.b.T @ g)
    return ga, gb


# --- text dump format -------------------------------------------------------
# First line "rows cols", then one row per line, entries as decimal floats
# separated by single spaces. repr() round-trips float64 exactly.


def dump_matrix(m: DenseMatrix) -> str:
    m = as_matrix(m)
    check_finite(m, "dumped matrix")
    buf = io.StringIO()
    buf.write(f"{m.shape[0]} {m.shape[1]}\n")
    for row in m:
        buf.write(" ".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def load_matrix(text: str) -> DenseMatrix:
    lines = [ln for ln in text.strip().splitlines()]
    if not lines:
        raise ShapeMismatchError("empty matrix dump")
    header = lines[0].split()
    if len(header) != 2:
        raise ShapeMismatchError(f"bad matrix dump header: {lines[0]!r}")
    rows, cols = int(header[0]), int(header[1])
    if len(lines) - 1 != rows:
        raise ShapeMismatchError(f"expected {rows} rows, got {len(lines) - 1}")
    out = np.empty((rows, cols), dtype=np.float64)
    for i, ln in enumerate(lines[1:]):
        vals = ln.split()
        if len(vals) != cols:
            raise ShapeMismatchError(f"row {i}: expected {cols} entries, got {len(vals)}")
        out[i] = [float(v) for v in vals]
    return out
