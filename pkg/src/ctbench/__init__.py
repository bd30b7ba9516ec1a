"""Simulated apple-like CT data: phantoms, parallel-beam projection,
degradation, limited-view reconstruction, quality scoring and
label-balanced dataset splits."""

from ctbench.errors import CtbenchError, DataError, SolverLimitReached

__version__ = "0.1.0"

__all__ = ["CtbenchError", "DataError", "SolverLimitReached", "__version__"]
