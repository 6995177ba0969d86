"""Kernel backend selection.

The hot inner loops (3x3 convolutions, exact distance transforms) have two
implementations: numba @njit kernels and a pure numpy/scipy path.  The env
variable MCSEG_BACKEND picks one:

    MCSEG_BACKEND=numba   use JIT kernels (default when numba imports)
    MCSEG_BACKEND=numpy   force the numpy/scipy fallback

numba kernels only cover the 2-D case; 3-D inputs always take the fallback.
`benchmarks/bench_backends.py` compares the two.
"""

import os

try:
    from mcseg import _kernels  # noqa: F401  (triggers numba import)

    HAVE_NUMBA = True
except ImportError:
    _kernels = None
    HAVE_NUMBA = False

_VALID = ("numba", "numpy")


def _from_env() -> str:
    name = os.environ.get("MCSEG_BACKEND", "").strip().lower()
    if name and name not in _VALID:
        raise ValueError(f"MCSEG_BACKEND must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("MCSEG_BACKEND=numba but numba is not importable")
    if not name:
        name = "numba" if HAVE_NUMBA else "numpy"
    return name


def _apply_thread_policy() -> None:
    """Keep BLAS off the JIT kernels' cores.

    With the numba backend active, a multi-threaded BLAS pool spin-waits on
    the same cores as the OMP parallel regions and serializes every kernel
    launch (measured ~3.5x slowdown per training step on a 2-core host), so
    BLAS is pinned to one thread; the tensordot ops left on that path are
    small.  The numpy backend gets the full pool back.
    """
    try:
        import threadpoolctl
    except ImportError:
        return
    limit = 1 if _active == "numba" else (os.cpu_count() or 1)
    threadpoolctl.threadpool_limits(limit, user_api="blas")


_active = _from_env()
_apply_thread_policy()


def active_backend() -> str:
    return _active


def set_backend(name: str) -> str:
    """Switch backends at runtime (tests and benchmarks). Returns the old name."""
    global _active
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    old = _active
    _active = name
    _apply_thread_policy()
    return old


def use_numba(ndim_spatial: int) -> bool:
    """True when the JIT path should handle an op over this many spatial axes."""
    return _active == "numba" and HAVE_NUMBA and ndim_spatial == 2
