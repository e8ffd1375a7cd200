"""Backend selection for the hot kernels.

Numba is used when importable unless ``ETCHSIM_BACKEND=numpy`` (or
``ETCHSIM_DISABLE_NUMBA=1``) is set in the environment. Both backends produce
bit-identical results; the numpy path exists for platforms without numba and
as a cross-check.
"""
import os
import warnings

_env_backend = os.environ.get("ETCHSIM_BACKEND", "").strip().lower()
_env_disable = os.environ.get("ETCHSIM_DISABLE_NUMBA", "").strip() not in ("", "0", "false")

try:
    import numba

    HAVE_NUMBA = True
    # numba falls back to OpenMP/workqueue on its own; the TBB version notice is noise
    warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

if _env_backend not in ("", "numba", "numpy"):
    raise ImportError(f"ETCHSIM_BACKEND must be 'numba' or 'numpy', got {_env_backend!r}")

DEFAULT_BACKEND = "numba" if HAVE_NUMBA and not _env_disable and _env_backend != "numpy" else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is present, identity decorator otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def resolve_backend(name=None):
    name = DEFAULT_BACKEND if name is None else name
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return name


def set_threads(n):
    """Set the kernel thread count; returns the previous value (None if not applicable)."""
    if not HAVE_NUMBA:
        return None
    n = int(n)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    prev = numba.get_num_threads()
    # numba refuses counts above its pool size; oversubscription is clamped
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return prev


def threads_from_env(default=1):
    raw = os.environ.get("ETCHSIM_THREADS")
    if raw is None or raw.strip() == "":
        return default
    return int(raw)
