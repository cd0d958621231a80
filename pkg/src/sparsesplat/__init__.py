"""Sparse-view Gaussian splatting with per-pixel, ray-constrained Gaussians."""

import os

# numba reads these once, at import; allow raising the thread count later
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, os.cpu_count() or 1)))
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
