"""Voxel volumes, cuberille surface extraction and file export (SUZV, STL, OBJ)."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .lattice import SiteState

SUZV_MAGIC = b"SUZV"
SUZV_VERSION = 1
_SUZV_HEADER = struct.Struct("<4sIIIId")
STL_HEADER = b"etchsim binary STL".ljust(80, b"\0")
_STL_DTYPE = np.dtype([("normal", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")])

EMPTY, SOLID, ETCH_STOP = 0, 1, 2


class FormatError(ValueError):
    pass


@dataclass(eq=False)
class VoxelVolume:
    dims: tuple
    spacing: float
    occupancy: np.ndarray  # uint8, x-fastest

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"voxel dims must be positive, got {self.dims}")
        occ = np.ascontiguousarray(self.occupancy, dtype=np.uint8).ravel()
        if occ.size != self.dims[0] * self.dims[1] * self.dims[2]:
            raise ValueError("occupancy length must equal nx*ny*nz")
        occ.setflags(write=False)
        self.occupancy = occ

    def array(self):
        """Occupancy as (nz, ny, nx)."""
        nx, ny, nz = self.dims
        return self.occupancy.reshape(nz, ny, nx)

    def solid_count(self):
        return int(np.count_nonzero(self.occupancy))

    def __eq__(self, other):
        return (isinstance(other, VoxelVolume) and self.dims == other.dims
                and self.spacing == other.spacing and np.array_equal(self.occupancy, other.occupancy))


@dataclass(eq=False)
class SurfaceMesh:
    """Triangle mesh. ``grid_vertices`` holds vertex positions in voxel units
    (integers or half-integers) so enclosed volume can be computed exactly."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    spacing: float = 1.0
    grid_vertices: np.ndarray | None = None
    # (axis, sign, i, j, k, split) per unit face, for simplify(); split marks
    # faces fanned around a checkerboard edge
    faces: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_triangles(self):
        return int(self.triangles.shape[0])

    def validate(self):
        t = self.triangles
        if t.size and (t.min() < 0 or t.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        return self


def _empty_mesh(spacing):
    return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3)), spacing,
                       np.zeros((0, 3)), np.zeros((0, 6), np.int64))


# -- voxelization -----------------------------------------------------------------

def voxelize(state, threshold=4) -> VoxelVolume:
    """One voxel per conventional cell; solid iff >= ``threshold`` of its 8 atoms remain.

    A solid voxel is marked etch-stop when etch-stop atoms are at least as
    many as ordinary solid atoms in it.
    """
    grid = getattr(state, "grid", state)
    cells = grid.cell_states()
    n_solid = np.count_nonzero(cells == SiteState.SOLID, axis=-1)
    n_stop = np.count_nonzero(cells == SiteState.ETCH_STOP, axis=-1)
    occ = np.zeros(cells.shape[:3], dtype=np.uint8)
    keep = (n_solid + n_stop) >= threshold
    occ[keep] = SOLID
    occ[keep & (n_stop >= n_solid)] = ETCH_STOP
    return VoxelVolume(grid.dims, grid.lattice_constant, occ.ravel())


# -- extraction -----------------------------------------------------------------

def _unit_faces(solid):
    """All exposed unit faces of a (nz, ny, nx) boolean array.

    Returns int64 (F, 5): axis (0=x, 1=y, 2=z), sign (+1/-1), voxel i, j, k.
    """
    nz, ny, nx = solid.shape
    pad = np.zeros((nz + 2, ny + 2, nx + 2), dtype=bool)
    pad[1:-1, 1:-1, 1:-1] = solid
    core = pad[1:-1, 1:-1, 1:-1]
    out = []
    # array axis order is (z, y, x); geometric axis a maps to array axis 2 - a
    for axis in range(3):
        arr_ax = 2 - axis
        for sign in (1, -1):
            sl = [slice(1, -1)] * 3
            sl[arr_ax] = slice(1 + sign, pad.shape[arr_ax] - 1 + sign)
            nb = pad[tuple(sl)]
            k, j, i = np.nonzero(core & ~nb)
            out.append(np.column_stack((np.full(i.size, axis), np.full(i.size, sign), i, j, k)))
    return np.concatenate(out).astype(np.int64) if out else np.zeros((0, 5), np.int64)


_EYE = np.eye(3, dtype=np.int64)


def _face_corners(faces):
    """Grid-point corners (F, 4, 3), counter-clockwise seen from outside."""
    F = faces.shape[0]
    axis, sign = faces[:, 0], faces[:, 1]
    base = faces[:, 2:5].copy()
    base[np.arange(F), axis] += (sign > 0)
    u = _EYE[(axis + 1) % 3]
    v = _EYE[(axis + 2) % 3]
    corners = np.stack([base, base + u, base + u + v, base + v], axis=1)
    neg = sign < 0
    corners[neg] = corners[neg][:, ::-1]
    return corners


def _checkerboard_edges(solid):
    """Grid edges around which the four voxels form a diagonal checkerboard.

    Returns dict: (edge axis, gx, gy, gz of the edge start) -> (voxel A, voxel B),
    voxels as (i, j, k) tuples.
    """
    nz, ny, nx = solid.shape
    pad = np.zeros((nz + 2, ny + 2, nx + 2), dtype=bool)
    pad[1:-1, 1:-1, 1:-1] = solid
    res = {}
    for e in range(3):
        u, v = (e + 1) % 3, (e + 2) % 3
        # voxel (p) in padded coords; edge at grid point g along e, with the four
        # voxels at offsets {-1, 0} in u and v relative to g
        def shifted(du, dv):
            sl = [None, None, None]
            for ax in range(3):
                ext = pad.shape[2 - ax]
                if ax == e:
                    sl[2 - ax] = slice(1, ext - 1)
                else:
                    d = du if ax == u else dv
                    sl[2 - ax] = slice(1 + d, ext + d)
            return pad[tuple(sl)]
        s00, s10, s01, s11 = shifted(-1, -1), shifted(0, -1), shifted(-1, 0), shifted(0, 0)
        diag1 = s00 & s11 & ~s10 & ~s01
        diag2 = s10 & s01 & ~s00 & ~s11
        for mask, (a, b) in ((diag1, ((-1, -1), (0, 0))), (diag2, ((0, -1), (-1, 0)))):
            kk, jj, ii = np.nonzero(mask)
            for gi, gj, gk in zip(ii, jj, kk):
                g = [int(gi), int(gj), int(gk)]
                vox = []
                for du, dv in (a, b):
                    p = list(g)
                    p[u] += du
                    p[v] += dv
                    vox.append(tuple(p))
                res[(e, g[0], g[1], g[2])] = (vox[0], vox[1])
    return res


def _pack(coords, dims):
    nx, ny, nz = dims
    c = np.asarray(coords, dtype=np.int64)
    return (c[..., 2] * (ny + 1) + c[..., 1]) * (nx + 1) + c[..., 0]


def extract_surface(vol: VoxelVolume) -> SurfaceMesh:
    """Cuberille surface: two triangles per face between solid and empty/outside.

    Edges shared by two diagonally touching solid voxels are split at their
    midpoint, one copy per voxel, so every mesh edge has exactly two
    incident triangles.
    """
    solid = vol.array() != 0
    faces = _unit_faces(solid)
    if faces.shape[0] == 0:
        return _empty_mesh(vol.spacing)
    corners = _face_corners(faces)
    keys = _pack(corners, vol.dims)
    uniq, inv = np.unique(keys.ravel(), return_inverse=True)
    inv = inv.reshape(-1, 4)
    nx, ny, _ = vol.dims
    gv = np.column_stack((uniq % (nx + 1), (uniq // (nx + 1)) % (ny + 1), uniq // ((nx + 1) * (ny + 1))))
    gv = gv.astype(np.float64)

    normals_f = _EYE[faces[:, 0]] * faces[:, 1:2]
    split = _checkerboard_edges(solid)

    tris = []
    tri_n = []
    extra = []
    if split:
        edge_of = {}
        for key, (va, vb) in split.items():
            e, gx, gy, gz = key
            for vox in (va, vb):
                mid = [gx + 0.5 * (e == 0), gy + 0.5 * (e == 1), gz + 0.5 * (e == 2)]
                edge_of[(key, vox)] = len(gv) + len(extra)
                extra.append(mid)
        needs = np.zeros(faces.shape[0], dtype=bool)
        for fi in range(faces.shape[0]):
            c = corners[fi]
            for q in range(4):
                a, b = c[q], c[(q + 1) % 4]
                d = b - a
                e = int(np.flatnonzero(d)[0])
                start = np.minimum(a, b)
                if (e, int(start[0]), int(start[1]), int(start[2])) in split:
                    needs[fi] = True
                    break
        for fi in np.flatnonzero(needs):
            c = corners[fi]
            vox = tuple(int(t) for t in faces[fi, 2:5])
            ring = []
            for q in range(4):
                ring.append(int(inv[fi, q]))
                a, b = c[q], c[(q + 1) % 4]
                e = int(np.flatnonzero(b - a)[0])
                start = np.minimum(a, b)
                key = (e, int(start[0]), int(start[1]), int(start[2]))
                if key in split:
                    ring.append(edge_of[(key, vox)])
            center = len(gv) + len(extra)
            extra.append(list(c.mean(axis=0)))
            for q in range(len(ring)):
                tris.append((center, ring[q], ring[(q + 1) % len(ring)]))
                tri_n.append(normals_f[fi])
        plain = ~needs
    else:
        plain = np.ones(faces.shape[0], dtype=bool)
    face_info = np.column_stack((faces, (~plain).astype(np.int64)))

    q = inv[plain]
    t_plain = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]], axis=0)
    n_plain = np.concatenate([normals_f[plain], normals_f[plain]], axis=0)
    # interleave so each face's two triangles are adjacent
    order = np.arange(t_plain.shape[0]).reshape(2, -1).T.ravel()
    t_plain, n_plain = t_plain[order], n_plain[order]
    if tris:
        t_all = np.concatenate([t_plain, np.array(tris, dtype=np.int64)])
        n_all = np.concatenate([n_plain, np.array(tri_n, dtype=np.int64)])
        gv = np.concatenate([gv, np.array(extra, dtype=np.float64)])
    else:
        t_all, n_all = t_plain, n_plain
    return SurfaceMesh(gv * vol.spacing, t_all.astype(np.int64), n_all.astype(np.float64), vol.spacing, gv,
                       face_info)


def _greedy_rectangles(grid2d):
    """Greedy decomposition of a boolean (U, V) grid into maximal rectangles."""
    g = grid2d.copy()
    U, V = g.shape
    rects = []
    for v0 in range(V):
        u0 = 0
        while u0 < U:
            if not g[u0, v0]:
                u0 += 1
                continue
            u1 = u0
            while u1 + 1 < U and g[u1 + 1, v0]:
                u1 += 1
            v1 = v0
            while v1 + 1 < V and g[u0:u1 + 1, v1 + 1].all():
                v1 += 1
            g[u0:u1 + 1, v0:v1 + 1] = False
            rects.append((u0, v0, u1 + 1, v1 + 1))
            u0 = u1 + 1
    return rects


def _merged_rectangles(faces):
    """Maximal coplanar rectangles over unit faces: list of (corners (4, 3) CCW, normal)."""
    out = []
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        for sign in (1, -1):
            sel = faces[(faces[:, 0] == axis) & (faces[:, 1] == sign)]
            if sel.size == 0:
                continue
            vox = sel[:, 2:5]
            plane = vox[:, axis] + (1 if sign > 0 else 0)
            umin, vmin = vox[:, u].min(), vox[:, v].min()
            U = vox[:, u].max() - umin + 1
            V = vox[:, v].max() - vmin + 1
            normal = _EYE[axis] * sign
            for p in np.unique(plane):
                s = vox[plane == p]
                g2 = np.zeros((U, V), dtype=bool)
                g2[s[:, u] - umin, s[:, v] - vmin] = True
                for u0, v0, u1, v1 in _greedy_rectangles(g2):
                    pts = np.zeros((4, 3), np.int64)
                    pts[:, axis] = p
                    pts[:, u] = np.array([u0, u1, u1, u0]) + umin
                    pts[:, v] = np.array([v0, v0, v1, v1]) + vmin
                    out.append((pts if sign > 0 else pts[::-1], normal))
    return out


def simplify(mesh: SurfaceMesh) -> SurfaceMesh:
    """Merge coplanar unit faces with equal normals into maximal rectangles.

    Faces fanned around a checkerboard edge are kept as they are. Rectangle
    sides are split at every mesh vertex lying on them, so the result stays
    edge-manifold; area and enclosed volume are preserved exactly. The
    triangle count never grows.
    """
    if mesh.faces is None:
        raise ValueError("simplify needs a mesh produced by extract_surface")
    faces = mesh.faces
    if faces.shape[0] == 0:
        return _empty_mesh(mesh.spacing)
    rects = _merged_rectangles(faces[faces[:, 5] == 0])

    gv_old = mesh.grid_vertices
    on_grid = np.all(gv_old == np.round(gv_old), axis=1)
    kept = mesh.triangles[~np.all(on_grid[mesh.triangles], axis=1)]
    kept_n = mesh.normals[~np.all(on_grid[mesh.triangles], axis=1)]

    verts = []
    ids = {}

    def vid(p):
        key = (int(p[0]), int(p[1]), int(p[2]))
        if key not in ids:
            ids[key] = len(verts)
            verts.append(key)
        return ids[key]

    # every grid point used by a polygon, indexed by the axis-parallel lines through it
    points = {tuple(int(c) for c in p) for pts, _ in rects for p in pts}
    points.update(tuple(int(c) for c in gv_old[i]) for i in np.unique(kept) if on_grid[i])
    lines = {}
    for p in points:
        for e in range(3):
            lines.setdefault((e, p[(e + 1) % 3], p[(e + 2) % 3]), []).append(p[e])
    lines = {k: np.sort(np.array(v)) for k, v in lines.items()}

    tris, nrm = [], []
    for pts, normal in rects:
        ring = []
        for q in range(4):
            a, b = pts[q], pts[(q + 1) % 4]
            ring.append(vid(a))
            e = int(np.flatnonzero(b - a)[0])
            line = lines[(e, int(a[(e + 1) % 3]), int(a[(e + 2) % 3]))]
            lo, hi = sorted((a[e], b[e]))
            inner = line[np.searchsorted(line, lo, "right"):np.searchsorted(line, hi, "left")]
            if b[e] < a[e]:
                inner = inner[::-1]
            for c in inner:
                p = a.copy()
                p[e] = c
                ring.append(vid(p))
        if len(ring) == 4:
            tris += [(ring[0], ring[1], ring[2]), (ring[0], ring[2], ring[3])]
            nrm += [normal, normal]
        else:
            center = len(verts)
            verts.append(tuple(pts.mean(axis=0)))
            tris += [(center, ring[i], ring[(i + 1) % len(ring)]) for i in range(len(ring))]
            nrm += [normal] * len(ring)

    # retained fans: grid corners shared by coordinate, split vertices by identity
    remap = {}
    for i in np.unique(kept):
        if on_grid[i]:
            remap[int(i)] = vid(gv_old[i])
        else:
            remap[int(i)] = len(verts)
            verts.append(tuple(gv_old[i]))
    tris += [tuple(remap[int(i)] for i in t) for t in kept]
    nrm += list(kept_n)

    if len(tris) >= mesh.n_triangles:
        # split sides can outweigh the merge on tiny meshes
        return SurfaceMesh(mesh.vertices.copy(), mesh.triangles.copy(), mesh.normals.copy(), mesh.spacing,
                           mesh.grid_vertices.copy(), None)
    gv = np.array(verts, dtype=np.float64)
    return SurfaceMesh(gv * mesh.spacing, np.array(tris, dtype=np.int64).reshape(-1, 3),
                       np.array(nrm, dtype=np.float64).reshape(-1, 3), mesh.spacing, gv, None)


# -- measures ---------------------------------------------------------------------

def _coords(mesh, exact):
    if exact and mesh.grid_vertices is not None:
        return mesh.grid_vertices, mesh.spacing
    return mesh.vertices, 1.0


def enclosed_volume(mesh: SurfaceMesh, grid_units=False):
    """Signed-tetrahedron volume. With ``grid_units`` the result is in voxel
    units and exact (vertex coordinates are multiples of 1/2)."""
    v, s = _coords(mesh, True)
    if mesh.triangles.size == 0:
        return 0.0
    a, b, c = v[mesh.triangles[:, 0]], v[mesh.triangles[:, 1]], v[mesh.triangles[:, 2]]
    six = np.einsum("ij,ij->i", a, np.cross(b, c))
    vol = float(np.sum(six)) / 6.0
    return vol if grid_units else vol * s ** 3


def surface_area(mesh: SurfaceMesh, grid_units=False):
    v, s = _coords(mesh, True)
    if mesh.triangles.size == 0:
        return 0.0
    a, b, c = v[mesh.triangles[:, 0]], v[mesh.triangles[:, 1]], v[mesh.triangles[:, 2]]
    area = 0.5 * float(np.sum(np.linalg.norm(np.cross(b - a, c - a), axis=1)))
    return area if grid_units else area * s ** 2


def edge_incidence(mesh: SurfaceMesh):
    """Number of triangles incident to each undirected edge: dict (i, j) -> count."""
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}


def is_edge_manifold(mesh: SurfaceMesh):
    if mesh.triangles.size == 0:
        return True
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def is_consistently_oriented(mesh: SurfaceMesh):
    """Every directed edge appears exactly once (opposite orientation on the neighbor)."""
    if mesh.triangles.size == 0:
        return True
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 1))


# -- file I/O ---------------------------------------------------------------------

def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def stl_bytes(mesh: SurfaceMesh) -> bytes:
    n = mesh.n_triangles
    rec = np.zeros(n, dtype=_STL_DTYPE)
    if n:
        rec["normal"] = mesh.normals.astype("<f4")
        rec["v"] = mesh.vertices[mesh.triangles].astype("<f4")
    return STL_HEADER + struct.pack("<I", n) + rec.tobytes()


def write_stl(mesh: SurfaceMesh, path):
    _atomic_write(path, stl_bytes(mesh))


def read_stl(path) -> SurfaceMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 84:
        raise FormatError(f"{path}: too short for a binary STL")
    (n,) = struct.unpack_from("<I", data, 80)
    if len(data) != 84 + 50 * n:
        raise FormatError(f"{path}: expected {84 + 50 * n} bytes for {n} triangles, got {len(data)}")
    rec = np.frombuffer(data, dtype=_STL_DTYPE, count=n, offset=84)
    pts = rec["v"].reshape(-1, 3)
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    return SurfaceMesh(uniq.astype(np.float64), inv.reshape(-1, 3).astype(np.int64),
                       rec["normal"].astype(np.float64), 1.0, None, None)


def obj_text(mesh: SurfaceMesh) -> str:
    lines = ["# etchsim surface mesh"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    return "\n".join(lines) + "\n"


def write_obj(mesh: SurfaceMesh, path):
    _atomic_write(path, obj_text(mesh).encode("ascii"))


def read_obj(path) -> SurfaceMesh:
    verts, tris = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
            else:
                raise FormatError(f"{path}:{ln}: unsupported record {parts[0]!r}")
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    t = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if t.size:
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
    else:
        n = np.zeros((0, 3))
    return SurfaceMesh(v, t, n, 1.0, None, None)


def voxel_bytes(vol: VoxelVolume) -> bytes:
    nx, ny, nz = vol.dims
    return _SUZV_HEADER.pack(SUZV_MAGIC, SUZV_VERSION, nx, ny, nz, float(vol.spacing)) + vol.occupancy.tobytes()


def write_voxel(vol: VoxelVolume, path):
    _atomic_write(path, voxel_bytes(vol))


def read_voxel(path) -> VoxelVolume:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SUZV_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, nx, ny, nz, spacing = _SUZV_HEADER.unpack_from(data)
    if magic != SUZV_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SUZV_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = nx * ny * nz
    body = data[_SUZV_HEADER.size:]
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} occupancy bytes, got {len(body)}")
    return VoxelVolume((nx, ny, nz), spacing, np.frombuffer(body, dtype=np.uint8).copy())
