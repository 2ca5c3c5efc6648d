"""Backend switch for the hot kernels.

Set ``IVFOREST_DISABLE_NUMBA=1`` before import to run the pure-numpy path.
"""
import os

_DISABLE = os.environ.get("IVFOREST_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

if _numba is not None and "NUMBA_THREADING_LAYER" not in os.environ:
    # skip probing an outdated TBB; OpenMP or the builtin queue are fine
    _numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

USE_NUMBA = _numba is not None and not _DISABLE
BACKEND = "numba" if USE_NUMBA else "numpy"


def set_threads(n):
    """Cap the number of worker threads used by parallel kernels."""
    if _numba is not None and n:
        _numba.set_num_threads(max(1, min(int(n), _numba.config.NUMBA_NUM_THREADS)))
