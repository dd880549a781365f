"""Bridge-block analysis and refinement of transmission networks in the DC model."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import GridBlocksError
from .network import Bus, Line, PowerNetwork, load_case, parse_matpower, rebalance
from .spectral import LaplacianSystem, build_system, dc_flow, effective_resistance

__all__ = [
    "Bus",
    "GridBlocksError",
    "LaplacianSystem",
    "Line",
    "PowerNetwork",
    "build_system",
    "dc_flow",
    "effective_resistance",
    "load_case",
    "parse_matpower",
    "rebalance",
]
