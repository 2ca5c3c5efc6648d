"""Hot kernels behind a backend switch (see ``ivforest._accel``)."""
from .._accel import BACKEND, USE_NUMBA
from . import _vector as numpy_backend
from ._common import KIND_IV, KIND_REGRESSION, WEAK_COV_TOL, seed_state

if USE_NUMBA:
    from . import _loops as active
else:
    active = numpy_backend


def get_backend(name=None):
    """Kernel module for ``name`` ('numba' | 'numpy'); default is the active one."""
    if name is None:
        return active
    if name == "numpy":
        return numpy_backend
    if name == "numba":
        from . import _loops
        return _loops
    raise ValueError(f"unknown kernel backend {name!r}")


__all__ = ["BACKEND", "KIND_IV", "KIND_REGRESSION", "WEAK_COV_TOL", "active",
           "get_backend", "numpy_backend", "seed_state"]
