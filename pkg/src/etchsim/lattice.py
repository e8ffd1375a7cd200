"""Diamond-cubic lattice geometry.

Integer site coordinates are in units of a/4 (a = cubic lattice constant).
A coordinate triple is a lattice site iff all components are even with sum
divisible by 4 (sublattice A, the FCC sites) or all are odd with sum = 3 mod 4
(sublattice B, the FCC sites shifted by (1, 1, 1)).

Sites are stored densely, eight per conventional cell, in the order
``index = ((cz * ny + cy) * nx + cx) * 8 + basis`` so that cells are x-fastest.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numpy as np


class SiteState(IntEnum):
    REMOVED = 0
    SOLID = 1
    ETCH_STOP = 2


class Face(IntEnum):
    """Boundary policy of one domain face."""

    SOLID = 0
    EXPOSED = 1
    PERIODIC = 2


# basis atoms of the conventional cell, in a/4 units
BASIS = np.array(
    [
        [0, 0, 0], [0, 2, 2], [2, 0, 2], [2, 2, 0],
        [1, 1, 1], [1, 3, 3], [3, 1, 3], [3, 3, 1],
    ],
    dtype=np.int64,
)

# (x & 3, y & 3, z & 3) packed as 16*bx + 4*by + bz -> basis slot, -1 if no site
BASIS_LUT = np.full(64, -1, dtype=np.int64)
for _b, (_x, _y, _z) in enumerate(BASIS):
    BASIS_LUT[16 * _x + 4 * _y + _z] = _b

# first shell (|d|^2 = 3), row 0 for sublattice A, row 1 for B
OFFSETS_1 = np.array(
    [
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]],
        [[-1, -1, -1], [-1, 1, 1], [1, -1, 1], [1, 1, -1]],
    ],
    dtype=np.int64,
)

# second shell (|d|^2 = 8), same for both sublattices
OFFSETS_2 = np.array(
    [
        [2, 2, 0], [2, -2, 0], [-2, 2, 0], [-2, -2, 0],
        [2, 0, 2], [2, 0, -2], [-2, 0, 2], [-2, 0, -2],
        [0, 2, 2], [0, 2, -2], [0, -2, 2], [0, -2, -2],
    ],
    dtype=np.int64,
)

# third shell used by the rules: |d|^2 = 19 (12 sites of type (3, 3, 1)).
# With this shell an ideal (111) terrace atom counts (3, 9, 9) and a (110)
# atom (3, 7, 7); the nearer |d|^2 = 11 shell would give (3, 9, 6) on (111).
_OFF3_A = [
    [-3, -3, 1], [-3, -1, 3], [-3, 1, -3], [-3, 3, -1],
    [-1, -3, 3], [-1, 3, -3], [1, -3, -3], [1, 3, 3],
    [3, -3, -1], [3, -1, -3], [3, 1, 3], [3, 3, 1],
]
OFFSETS_3 = np.array([_OFF3_A, [[-c for c in v] for v in _OFF3_A]], dtype=np.int64)

# geometric third-nearest shell (|d|^2 = 11), kept for reference
_OFF11_A = [
    [-3, -1, -1], [-3, 1, 1], [-1, -3, -1], [-1, -1, -3],
    [-1, 1, 3], [-1, 3, 1], [1, -3, 1], [1, -1, 3],
    [1, 1, -3], [1, 3, -1], [3, -1, 1], [3, 1, -1],
]
OFFSETS_3_NEAREST = np.array([_OFF11_A, [[-c for c in v] for v in _OFF11_A]], dtype=np.int64)

SHELL_SIZES = (4, 12, 12)
SHELL_RADII_SQ = (3, 8, 19)

# default boundary: lateral periodic, top and bottom exposed
DEFAULT_FACES = (Face.PERIODIC, Face.PERIODIC, Face.PERIODIC, Face.PERIODIC, Face.EXPOSED, Face.EXPOSED)


class NeighborCounts(NamedTuple):
    n1: int
    n2: int
    n3: int


def is_valid_site(x, y, z) -> bool:
    x, y, z = int(x), int(y), int(z)
    px, py, pz = x & 1, y & 1, z & 1
    if not (px == py == pz):
        return False
    return (x + y + z) % 4 == (0 if px == 0 else 3)


def _check_site(coord):
    if len(coord) != 3 or not is_valid_site(*coord):
        raise ValueError(f"{tuple(coord)} is not a diamond-lattice site (a/4 units)")


def site_position(coord, lattice_constant):
    """Physical position (same length unit as ``lattice_constant``) of a site."""
    _check_site(coord)
    q = float(lattice_constant) / 4.0
    return (coord[0] * q, coord[1] * q, coord[2] * q)


def sublattice(coord) -> int:
    return int(coord[0]) & 1


def neighbor_offsets(order, sublattice=0):
    """Offsets (k, 3) of the coordination shell ``order`` for a site on ``sublattice``."""
    if order not in (1, 2, 3):
        raise ValueError(f"neighbor order must be 1, 2 or 3, got {order!r}")
    if sublattice not in (0, 1):
        raise ValueError("sublattice must be 0 (even) or 1 (odd)")
    if order == 1:
        return OFFSETS_1[sublattice].copy()
    if order == 2:
        return OFFSETS_2.copy()
    return OFFSETS_3[sublattice].copy()


def encode(x, y, z, dims):
    """Site coordinates -> flat index (vectorized, no validation)."""
    nx, ny, _ = dims
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    z = np.asarray(z, dtype=np.int64)
    b = BASIS_LUT[((x & 3) << 4) | ((y & 3) << 2) | (z & 3)]
    cell = ((z >> 2) * ny + (y >> 2)) * nx + (x >> 2)
    return (cell << 3) + b


def decode(idx, dims):
    """Flat index -> (x, y, z) site coordinates (vectorized)."""
    nx, ny, _ = dims
    idx = np.asarray(idx, dtype=np.int64)
    b = idx & 7
    cell = idx >> 3
    cx = cell % nx
    cy = (cell // nx) % ny
    cz = cell // (nx * ny)
    return (4 * cx + BASIS[b, 0], 4 * cy + BASIS[b, 1], 4 * cz + BASIS[b, 2])


def all_coords(dims):
    n = 8 * dims[0] * dims[1] * dims[2]
    return decode(np.arange(n, dtype=np.int64), dims)


@dataclass
class LatticeGrid:
    """Bounded diamond lattice with per-site states and face boundary policies.

    ``top_mask`` / ``bottom_mask`` are uint8 arrays of shape (4*nx, 4*ny)
    indexed by atom column (x, y) in a/4 units; 1 marks a column protected by
    mask material on that face. ``None`` means the face is fully open.
    """

    dims: tuple
    lattice_constant: float = 1.0
    states: np.ndarray = None
    faces: tuple = DEFAULT_FACES
    top_mask: np.ndarray | None = None
    bottom_mask: np.ndarray | None = None
    _face_arr: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        nx, ny, nz = (int(d) for d in self.dims)
        if min(nx, ny, nz) <= 0:
            raise ValueError(f"lattice dims must be positive, got {self.dims}")
        self.dims = (nx, ny, nz)
        if self.lattice_constant <= 0:
            raise ValueError("lattice_constant must be positive")
        if self.states is None:
            self.states = np.full(8 * nx * ny * nz, SiteState.SOLID, dtype=np.int8)
        elif self.states.shape != (8 * nx * ny * nz,):
            raise ValueError("states length must be 8*nx*ny*nz")
        faces = tuple(Face(f) for f in self.faces)
        if len(faces) != 6:
            raise ValueError("faces needs six entries (x-, x+, y-, y+, z-, z+)")
        for axis in range(3):
            lo, hi = faces[2 * axis], faces[2 * axis + 1]
            if (lo == Face.PERIODIC) != (hi == Face.PERIODIC):
                raise ValueError("periodic faces must come in pairs")
        self.faces = faces
        self._face_arr = np.array([int(f) for f in faces], dtype=np.int64)
        self.top_mask = self._check_mask(self.top_mask)
        self.bottom_mask = self._check_mask(self.bottom_mask)

    def _check_mask(self, m):
        shape = (4 * self.dims[0], 4 * self.dims[1])
        if m is None:
            return np.zeros(shape, dtype=np.uint8)
        m = np.ascontiguousarray(m, dtype=np.uint8)
        if m.shape != shape:
            raise ValueError(f"face mask shape {m.shape} does not match footprint {shape}")
        return m

    @property
    def n_sites(self):
        return self.states.size

    @property
    def extent(self):
        """Site-coordinate extents (X, Y, Z) in a/4 units."""
        return (4 * self.dims[0], 4 * self.dims[1], 4 * self.dims[2])

    @property
    def geom(self):
        return np.array(self.dims, dtype=np.int64)

    @property
    def face_codes(self):
        return self._face_arr

    def contains(self, coord):
        X, Y, Z = self.extent
        x, y, z = coord
        return 0 <= x < X and 0 <= y < Y and 0 <= z < Z and is_valid_site(x, y, z)

    def index(self, coord):
        if not self.contains(coord):
            raise ValueError(f"{tuple(coord)} is not a site inside the domain {self.extent}")
        return int(encode(coord[0], coord[1], coord[2], self.dims))

    def coord(self, idx):
        x, y, z = decode(idx, self.dims)
        return (int(x), int(y), int(z))

    def state_at(self, coord):
        return SiteState(int(self.states[self.index(coord)]))

    def copy(self):
        return LatticeGrid(
            self.dims, self.lattice_constant, self.states.copy(), self.faces,
            self.top_mask.copy(), self.bottom_mask.copy(),
        )

    def cell_states(self):
        """View of the states as (nz, ny, nx, 8)."""
        nx, ny, nz = self.dims
        return self.states.reshape(nz, ny, nx, 8)


def present(grid: LatticeGrid, x, y, z):
    """Vectorized occupancy of possibly out-of-domain coordinates.

    Returns a uint8 array: 1 where a neighbor there counts as present
    (solid, etch-stop, solid face, mask material), 0 where it is absent.
    """
    x = np.array(x, dtype=np.int64, copy=True)
    y = np.array(y, dtype=np.int64, copy=True)
    z = np.asarray(z, dtype=np.int64)
    X, Y, Z = grid.extent
    f = grid.faces
    out = np.zeros(np.broadcast(x, y, z).shape, dtype=np.uint8)
    x, y, z = np.broadcast_arrays(x, y, z)
    x, y = x.copy(), y.copy()
    decided = np.zeros(out.shape, dtype=bool)

    for arr, ext, lo, hi in ((x, X, f[0], f[1]), (y, Y, f[2], f[3])):
        below, above = arr < 0, arr >= ext
        if lo == Face.PERIODIC:
            arr[below] += ext
            arr[above] -= ext
        else:
            for sel, face in ((below, lo), (above, hi)):
                sel = sel & ~decided
                out[sel] = 1 if face == Face.SOLID else 0
                decided |= sel

    xc = np.clip(x, 0, X - 1)
    yc = np.clip(y, 0, Y - 1)
    for sel, face, mask in ((z < 0, f[4], grid.bottom_mask), (z >= Z, f[5], grid.top_mask)):
        sel = sel & ~decided
        if face == Face.SOLID:
            out[sel] = 1
        elif face == Face.EXPOSED:
            out[sel] = mask[xc[sel], yc[sel]]
        else:
            raise ValueError("periodic z faces are not supported")
        decided |= sel

    inside = ~decided
    if inside.any():
        idx = encode(x[inside], y[inside], z[inside], grid.dims)
        out[inside] = grid.states[idx] != SiteState.REMOVED
    return out


def neighbor_counts(grid: LatticeGrid, coord) -> NeighborCounts:
    """Counts of present neighbors in the three coordination shells of ``coord``."""
    if not grid.contains(coord):
        raise ValueError(f"{tuple(coord)} is outside the domain")
    s = sublattice(coord)
    c = np.asarray(coord, dtype=np.int64)
    counts = []
    for offs in (OFFSETS_1[s], OFFSETS_2, OFFSETS_3[s]):
        pts = c + offs
        counts.append(int(present(grid, pts[:, 0], pts[:, 1], pts[:, 2]).sum()))
    return NeighborCounts(*counts)


def is_surface(grid: LatticeGrid, coord) -> bool:
    """True for a SOLID site with an absent first- or second-shell neighbor."""
    if grid.state_at(coord) != SiteState.SOLID:
        return False
    n = neighbor_counts(grid, coord)
    return n.n1 < 4 or n.n2 < 12
