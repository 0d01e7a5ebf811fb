"""Desk-scale laboratory for the range of the simple random walk on Z^d."""

__version__ = "0.1.0"

from .errors import ContractError, ResourceError
from .lattice import Cube, RngStream, WalkPath, simulate_walk

__all__ = [
    "ContractError",
    "Cube",
    "ResourceError",
    "RngStream",
    "WalkPath",
    "simulate_walk",
    "__version__",
]
