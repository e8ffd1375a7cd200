"""Cellular-automaton time stepper.

Each step classifies every surface site against the pre-step lattice,
draws a stateless uniform per site, and commits all removals at once.
Because neither the classification nor the draws depend on visiting
order, the result is identical for any number of kernel threads.

Masks are modelled as an unetchable layer sitting on the face: neighbors
beyond an exposed face count as present above protected columns and
absent above open columns. A site under a protected column is therefore
fully coordinated until its neighbors are etched away from the side.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _accel, _kernels_np
from .lattice import DEFAULT_FACES, LatticeGrid, SiteState, all_coords
from .layout import MaskSet, to_lattice_bitmaps
from .rng import draw  # noqa: F401  re-exported
from .rules import RuleTable

if _accel.HAVE_NUMBA:
    from . import _kernels_nb
else:  # pragma: no cover
    _kernels_nb = None


def _kernels(backend):
    return _kernels_nb if _accel.resolve_backend(backend) == "numba" else _kernels_np


@dataclass
class StepSpec:
    table: RuleTable
    step_duration: float = 1.0
    top_mask: np.ndarray | None = None
    bottom_mask: np.ndarray | None = None
    n_steps: int = 1

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError("step count must be >= 0")
        if not self.step_duration >= 0:
            raise ValueError("step duration must be >= 0")


@dataclass
class Metrics:
    max_depth: float
    undercut: float
    removed_volume: float

    def as_dict(self):
        return {"max_depth": self.max_depth, "undercut": self.undercut, "removed_volume": self.removed_volume}


@dataclass
class SimulationState:
    grid: LatticeGrid
    surface: np.ndarray
    in_surface: np.ndarray
    seed: int = 0
    step_index: int = 0
    elapsed_time: float = 0.0
    backend: str = None
    removed_count: int = 0
    # mask used for undercut bookkeeping (the one the state was initialised with)
    reference_top_mask: np.ndarray = field(default=None, repr=False)

    def copy(self):
        return SimulationState(
            self.grid.copy(), self.surface.copy(), self.in_surface.copy(), self.seed,
            self.step_index, self.elapsed_time, self.backend, self.removed_count,
            None if self.reference_top_mask is None else self.reference_top_mask.copy(),
        )


def _rescan(state):
    g = state.grid
    k = _kernels(state.backend)
    state.surface = k.rescan(g.states, g.geom, g.face_codes, g.top_mask, g.bottom_mask, state.in_surface)


def _apply_etch_stops(grid, boxes):
    if not boxes:
        return
    q = grid.lattice_constant / 4.0
    x, y, z = all_coords(grid.dims)
    px, py, pz = x * q, y * q, z * q
    eps = 1e-9 * max(grid.lattice_constant, 1.0)
    for box in boxes:
        sel = ((px >= box.min[0] - eps) & (px <= box.max[0] + eps)
               & (py >= box.min[1] - eps) & (py <= box.max[1] + eps)
               & (pz >= box.min[2] - eps) & (pz <= box.max[2] + eps))
        grid.states[sel] = SiteState.ETCH_STOP


def init(dims, lattice_constant=1.0, masks: MaskSet | None = None, *, seed=0, faces=DEFAULT_FACES,
         top_mask=None, bottom_mask=None, backend=None) -> SimulationState:
    """Build a fresh simulation state.

    ``masks`` is rasterized onto the column grid; ``top_mask`` /
    ``bottom_mask`` (uint8 arrays of shape (4*nx, 4*ny)) override it.
    """
    backend = _accel.resolve_backend(backend)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) <= 0:
        raise ValueError(f"domain dims must be three positive integers, got {dims}")
    top, bot = to_lattice_bitmaps(masks, dims, lattice_constant)
    if top_mask is not None:
        top = top_mask
    if bottom_mask is not None:
        bot = bottom_mask
    grid = LatticeGrid(dims, float(lattice_constant), faces=faces, top_mask=top, bottom_mask=bot)
    _apply_etch_stops(grid, masks.etch_stops if masks is not None else ())
    state = SimulationState(grid, np.zeros(0, np.int64), np.zeros(grid.n_sites, np.uint8), int(seed),
                            backend=backend, reference_top_mask=grid.top_mask.copy())
    _rescan(state)
    return state


def _set_masks(state, spec):
    changed = False
    g = state.grid
    for attr, new in (("top_mask", spec.top_mask), ("bottom_mask", spec.bottom_mask)):
        if new is None:
            continue
        new = np.ascontiguousarray(new, dtype=np.uint8)
        if new.shape != getattr(g, attr).shape:
            raise ValueError(f"{attr} shape {new.shape} does not match footprint {getattr(g, attr).shape}")
        if not np.array_equal(new, getattr(g, attr)):
            setattr(g, attr, new)
            changed = True
    if changed:
        _rescan(state)


def step_once(state: SimulationState, spec: StepSpec):
    """One synchronous update. Returns (number removed, number of sites with p > 0)."""
    _set_masks(state, spec)
    g = state.grid
    k = _kernels(state.backend)
    probs = spec.table.site_probabilities()
    flags, active = k.step_flags(g.states, state.surface, probs, np.uint64(state.seed & 0xFFFFFFFFFFFFFFFF),
                                 np.uint64(state.step_index), g.geom, g.face_codes, g.top_mask, g.bottom_mask)
    nrem = int(np.count_nonzero(flags))
    if nrem:
        state.surface = k.commit(g.states, state.surface, flags, state.in_surface, g.geom, g.face_codes)
        state.removed_count += nrem
    state.step_index += 1
    state.elapsed_time += spec.step_duration
    return nrem, int(active)


def step(state: SimulationState, spec: StepSpec) -> SimulationState:
    step_once(state, spec)
    return state


@contextmanager
def kernel_threads(n):
    if n is None:
        yield
        return
    prev = _accel.set_threads(n)
    try:
        yield
    finally:
        if prev is not None:
            _accel.set_threads(prev)


def run(state: SimulationState, recipe_steps, snapshot_stride=0, threads=None, on_snapshot=None,
        stop_at_fixed_point=False):
    """Execute the recipe in order; return (state, snapshots).

    A snapshot (a VoxelVolume) is taken after every ``snapshot_stride``-th
    step, counted over the whole run. Once no surface site can be removed
    under the current step spec, the remaining steps of that spec are
    fast-forwarded (counters advance, the lattice cannot change).
    ``stop_at_fixed_point`` additionally ends the run there.
    """
    from .mesh import voxelize

    snapshots = []
    last_vol = None
    count = 0
    with kernel_threads(threads):
        for spec in recipe_steps:
            frozen = False
            for _ in range(spec.n_steps):
                if frozen:
                    state.step_index += 1
                    state.elapsed_time += spec.step_duration
                else:
                    nrem, active = step_once(state, spec)
                    if nrem:
                        last_vol = None
                    frozen = active == 0
                count += 1
                if snapshot_stride and count % snapshot_stride == 0:
                    if last_vol is None:
                        last_vol = voxelize(state)
                    snapshots.append(last_vol)
                    if on_snapshot is not None:
                        on_snapshot(count, last_vol)
            if frozen and stop_at_fixed_point:
                break
    return state, snapshots


def run_to_fixed_point(state, spec: StepSpec, max_steps=100000, threads=None):
    """Step until no surface site has a nonzero removal probability."""
    with kernel_threads(threads):
        for _ in range(max_steps):
            _, active = step_once(state, spec)
            if active == 0:
                return state, True
    return state, False


def column_distance_to_open(mask, pitch):
    """Per-column distance to the nearest open column (periodic footprint)."""
    if not (mask == 0).any():
        return np.zeros(mask.shape)
    w, h = mask.shape
    tiled = np.tile(mask != 0, (3, 3))
    d = ndimage.distance_transform_edt(tiled, sampling=pitch)
    return d[w:2 * w, h:2 * h]


def metrics(state: SimulationState) -> Metrics:
    g = state.grid
    a = g.lattice_constant
    q = a / 4.0
    removed = np.flatnonzero(g.states == SiteState.REMOVED)
    if removed.size == 0:
        return Metrics(0.0, 0.0, 0.0)
    x, y, z = _kernels_np.decode(removed, g.dims[0], g.dims[1])
    Z = 4 * g.dims[2]
    max_depth = float(Z - z.min()) * q
    undercut = 0.0
    ref = state.reference_top_mask if state.reference_top_mask is not None else g.top_mask
    covered = ref[x, y] != 0
    if covered.any():
        dist = column_distance_to_open(ref, q)
        undercut = float(dist[x[covered], y[covered]].max())
    volume = removed.size * a ** 3 / 8.0
    return Metrics(max_depth, undercut, volume)


def surface_rescan(state: SimulationState):
    """Surface list from a full rescan (for integrity checks)."""
    g = state.grid
    flags = np.zeros(g.n_sites, np.uint8)
    return _kernels_np.rescan(g.states, g.dims, g.face_codes, g.top_mask, g.bottom_mask, flags)


def removal_count(state):
    return int(np.count_nonzero(state.grid.states == SiteState.REMOVED))


def steps_for(duration, step_duration):
    """Whole steps covering ``duration`` (rounded up, tolerant to float noise)."""
    if duration <= 0:
        return 0
    k = duration / step_duration
    return int(math.ceil(k - 1e-9 * max(1.0, k)))
