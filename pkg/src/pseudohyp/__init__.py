"""Numerical verification of pseudohyperbolicity for flows and maps."""
import os

# the TBB layer is not installed everywhere; OpenMP is
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
