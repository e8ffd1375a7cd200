"""Stateless counter-based uniform draws.

``draw(seed, step, site)`` hashes its three 64-bit inputs with chained
SplitMix64 finalizers and maps the top 53 bits to [0, 1). No state is
carried between calls, so results do not depend on evaluation order or
thread count.
"""
import numpy as np

from ._accel import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def draw_u64(seed, step, site):
    h = mix64(seed + _GOLDEN)
    h = mix64(h ^ (step + _GOLDEN * np.uint64(2)))
    h = mix64(h ^ (site + _GOLDEN * np.uint64(3)))
    return h


@njit(cache=True, inline="always")
def draw_nb(seed, step, site):
    """Scalar draw for use inside jitted kernels; arguments must be uint64."""
    return float(draw_u64(seed, step, site) >> _S11) * _INV53


def _u64(v):
    a = np.asarray(v)
    if a.dtype.kind == "u":
        return a.astype(np.uint64)
    # negative ints wrap to their two's-complement bit pattern
    return a.astype(np.int64).view(np.uint64) if a.dtype.kind == "i" else np.asarray(
        [int(x) & 0xFFFFFFFFFFFFFFFF for x in np.ravel(a)], dtype=np.uint64).reshape(a.shape)


def _mix64_np(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def draw_u64_np(seed, step, site):
    seed, step, site = np.broadcast_arrays(_u64(seed), _u64(step), _u64(site))
    with np.errstate(over="ignore"):
        h = _mix64_np(seed + _GOLDEN)
        h = _mix64_np(h ^ (step + _GOLDEN * np.uint64(2)))
        h = _mix64_np(h ^ (site + _GOLDEN * np.uint64(3)))
    return h


def draw(seed, step, site):
    """Uniform value(s) in [0, 1) determined only by (seed, step, site)."""
    h = draw_u64_np(seed, step, site)
    out = (h >> _S11).astype(np.float64) * _INV53
    return float(out) if out.ndim == 0 else out


def derive_seed(*keys):
    """Combine integers into a single 64-bit seed (deterministic)."""
    h = np.uint64(0x243F6A8885A308D3)
    with np.errstate(over="ignore"):
        for k in keys:
            h = _mix64_np(np.asarray(h ^ _u64(k) + _GOLDEN, dtype=np.uint64))
    return int(h)
