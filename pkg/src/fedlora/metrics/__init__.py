"""Measurement layer: divergence, communication accounting, compression."""

from .communication import (
    ClientTraffic,
    CommLedger,
    CommRecord,
    LayerShape,
    comm_account,
)
from .compression import (
    CompressedMatrix,
    CompressionMode,
    CompressionSpec,
    compress,
)
from .divergence import DivergenceReport, divergence, report_to_json_dict

__all__ = [
    "ClientTraffic",
    "CommLedger",
    "CommRecord",
    "CompressedMatrix",
    "CompressionMode",
    "CompressionSpec",
    "DivergenceReport",
    "LayerShape",
    "comm_account",
    "compress",
    "divergence",
    "report_to_json_dict",
]
