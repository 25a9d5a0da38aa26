"""Lossy matrix compression for server-to-client aggregates.

Three mechanisms, each with exact byte accounting (NONE is the 32-bit
baseline the ledger compares against):

    HALF_PRECISION  round-trip through IEEE float16; 2 bytes per entry.
    QUANT_UNIFORM   affine uniform quantization to 2^bits levels over the
                    matrix [min, max] range; worst-case round-trip error is
                    (max - min) / (2 (2^bits - 1)). A constant matrix encodes
                    as its range header alone.
    SPARSIFY_TOPK   keep the ceil(keep_fraction * n) largest-magnitude
                    entries (ties broken toward the earlier flat index),
                    stored as (int32 index, float64 value) pairs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..adapters import DenseMatrix, as_matrix
from ..errors import NonFiniteError


class CompressionMode(enum.Enum):
    NONE = "none"
    HALF_PRECISION = "half_precision"
    QUANT_UNIFORM = "quant_uniform"
    SPARSIFY_TOPK = "sparsify_topk"

    @classmethod
    def parse(cls, name: str) -> "CompressionMode":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(
                f"unknown compression mode {name!r}; expected one of "
                f"{[m.name.lower() for m in cls]}"
            ) from None


@dataclass(frozen=True)
class CompressionSpec:
    mode: CompressionMode = CompressionMode.NONE
    bits: int = 8  # QUANT_UNIFORM only
    keep_fraction: float = 1.0  # SPARSIFY_TOPK only

    def __post_init__(self):
        if self.bits not in (8, 16):
            raise ValueError(f"quantization bits must be 8 or 16, got {self.bits}")
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ValueError(
                f"keep_fraction must lie in (0, 1], got {self.keep_fraction}"
            )


@dataclass(frozen=True)
class CompressedMatrix:
    """Encoded form plus exact size; decode() reconstructs the dense matrix."""

    mode: CompressionMode
    shape: tuple[int, int]
    encoded_bytes: int
    data: np.ndarray | None = None  # NONE / HALF payload
    codes: np.ndarray | None = None  # QUANT level indices
    vmin: float = 0.0
    vmax: float = 0.0
    bits: int = 8
    indices: np.ndarray | None = None  # SPARSIFY flat indices
    values: np.ndarray | None = None  # SPARSIFY kept values

    def decode(self) -> DenseMatrix:
        if self.mode is CompressionMode.NONE:
            return self.data.astype(np.float64)
        if self.mode is CompressionMode.HALF_PRECISION:
            return self.data.astype(np.float64)
        if self.mode is CompressionMode.QUANT_UNIFORM:
            if self.codes is None:  # degenerate constant matrix
                return np.full(self.shape, self.vmin)
            levels = (1 << self.bits) - 1
            step = (self.vmax - self.vmin) / levels
            return self.vmin + self.codes.astype(np.float64) * step
        if self.mode is CompressionMode.SPARSIFY_TOPK:
            flat = np.zeros(self.shape[0] * self.shape[1])
            flat[self.indices] = self.values
            return flat.reshape(self.shape)
        raise ValueError(f"unhandled mode {self.mode}")


def compress(matrix: DenseMatrix, spec: CompressionSpec) -> CompressedMatrix:
    m = as_matrix(matrix)
    n = m.size
    shape = (m.shape[0], m.shape[1])

    if spec.mode is CompressionMode.NONE:
        return CompressedMatrix(
            mode=spec.mode,
            shape=shape,
            encoded_bytes=4 * n,
            data=m.astype(np.float32),
        )

    if spec.mode is CompressionMode.HALF_PRECISION:
        half = m.astype(np.float16)
        if not np.all(np.isfinite(half)):
            raise NonFiniteError(
                "matrix entries overflow float16; half-precision transfer "
                "would ship Inf values"
            )
        return CompressedMatrix(
            mode=spec.mode, shape=shape, encoded_bytes=2 * n, data=half
        )

    if spec.mode is CompressionMode.QUANT_UNIFORM:
        vmin = float(m.min())
        vmax = float(m.max())
        header = 16  # two float64 range values
        if vmax == vmin:
            # degenerate range: the header alone reconstructs the matrix
            return CompressedMatrix(
                mode=spec.mode,
                shape=shape,
                encoded_bytes=header,
                vmin=vmin,
                vmax=vmax,
                bits=spec.bits,
            )
        levels = (1 << spec.bits) - 1
        scaled = (m - vmin) * (levels / (vmax - vmin))
        codes = np.rint(scaled).astype(np.uint16 if spec.bits == 16 else np.uint8)
        return CompressedMatrix(
            mode=spec.mode,
            shape=shape,
            encoded_bytes=header + n * spec.bits // 8,
            codes=codes,
            vmin=vmin,
            vmax=vmax,
            bits=spec.bits,
        )

    if spec.mode is CompressionMode.SPARSIFY_TOPK:
        keep = math.ceil(spec.keep_fraction * n)
        flat = m.ravel()
        # stable sort on -|x|: equal magnitudes keep ascending index order
        order = np.argsort(-np.abs(flat), kind="stable")[:keep]
        indices = np.sort(order).astype(np.int32)
        values = flat[indices].copy()
        return CompressedMatrix(
            mode=spec.mode,
            shape=shape,
            encoded_bytes=keep * (4 + 8),
            indices=indices,
            values=values,
        )

    raise ValueError(f"unhandled mode {spec.mode}")
