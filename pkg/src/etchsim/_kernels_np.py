"""Pure-numpy kernels. Must stay bit-identical to ``_kernels_nb``."""
import numpy as np

from .lattice import BASIS, BASIS_LUT, OFFSETS_1, OFFSETS_2, OFFSETS_3
from .rng import draw_u64_np

SOLID_FACE, EXPOSED, PERIODIC = 0, 1, 2
_INV53 = 1.0 / 9007199254740992.0


def decode(idx, nx, ny):
    b = idx & 7
    cell = idx >> 3
    cx = cell % nx
    cy = (cell // nx) % ny
    cz = cell // (nx * ny)
    return 4 * cx + BASIS[b, 0], 4 * cy + BASIS[b, 1], 4 * cz + BASIS[b, 2]


def encode(x, y, z, nx, ny):
    b = BASIS_LUT[((x & 3) << 4) | ((y & 3) << 2) | (z & 3)]
    return ((((z >> 2) * ny + (y >> 2)) * nx + (x >> 2)) << 3) + b


def present(states, x, y, z, dims, faces, top, bot):
    """1 where the (possibly out-of-domain) coordinate holds a present neighbor."""
    nx, ny, nz = dims
    X, Y, Z = 4 * nx, 4 * ny, 4 * nz
    x, y, z = np.broadcast_arrays(np.asarray(x, np.int64), np.asarray(y, np.int64), np.asarray(z, np.int64))
    x = x.copy()
    y = y.copy()
    out = np.zeros(x.shape, dtype=np.uint8)
    decided = np.zeros(x.shape, dtype=bool)
    for arr, ext, lo, hi in ((x, X, faces[0], faces[1]), (y, Y, faces[2], faces[3])):
        below, above = arr < 0, arr >= ext
        if lo == PERIODIC:
            arr[below] += ext
            arr[above] -= ext
        else:
            for sel, face in ((below, lo), (above, hi)):
                sel = sel & ~decided
                out[sel] = 1 if face == SOLID_FACE else 0
                decided |= sel
    xc = np.clip(x, 0, X - 1)
    yc = np.clip(y, 0, Y - 1)
    for sel, face, mask in ((z < 0, faces[4], bot), (z >= Z, faces[5], top)):
        sel = sel & ~decided
        if face == SOLID_FACE:
            out[sel] = 1
        elif face == EXPOSED:
            out[sel] = mask[xc[sel], yc[sel]]
        else:
            raise ValueError("periodic z faces are not supported")
        decided |= sel
    inside = ~decided
    if inside.any():
        idx = encode(x[inside], y[inside], z[inside], nx, ny)
        out[inside] = states[idx] != 0
    return out


def shell_counts(states, idx, dims, faces, top, bot, shells=3):
    nx, ny, _ = dims
    x, y, z = decode(idx, nx, ny)
    sub = x & 1
    counts = []
    for order in range(shells):
        n = np.zeros(idx.shape, dtype=np.int64)
        for k in range(4 if order == 0 else 12):
            if order == 0:
                d = OFFSETS_1[sub, k]
            elif order == 1:
                d = np.broadcast_to(OFFSETS_2[k], (idx.size, 3))
            else:
                d = OFFSETS_3[sub, k]
            n += present(states, x + d[:, 0], y + d[:, 1], z + d[:, 2], dims, faces, top, bot)
        counts.append(n)
    return counts


def step_flags(states, surface, site_probs, seed, step, dims, faces, top, bot):
    """Removal flags for the surface list under a synchronous update.

    Returns (flags uint8, number of sites with nonzero probability).
    """
    if surface.size == 0:
        return np.zeros(0, dtype=np.uint8), 0
    n1, n2, n3 = shell_counts(states, surface, dims, faces, top, bot)
    p = site_probs[n1 * 169 + n2 * 13 + n3]
    u = (draw_u64_np(np.uint64(seed), np.uint64(step), surface.astype(np.uint64)) >> np.uint64(11)).astype(
        np.float64) * _INV53
    flags = ((p > 0.0) & (u < p)).astype(np.uint8)
    return flags, int(np.count_nonzero(p > 0.0))


def _neighbors_in_domain(idx, dims, faces):
    nx, ny, nz = dims
    X, Y, Z = 4 * nx, 4 * ny, 4 * nz
    x, y, z = decode(idx, nx, ny)
    sub = x & 1
    out = []
    offs = [OFFSETS_1[sub, k] for k in range(4)] + [np.broadcast_to(OFFSETS_2[k], (idx.size, 3)) for k in range(12)]
    for d in offs:
        xx, yy, zz = x + d[:, 0], y + d[:, 1], z + d[:, 2]
        if faces[0] == PERIODIC:
            xx = xx % X
        if faces[2] == PERIODIC:
            yy = yy % Y
        ok = (xx >= 0) & (xx < X) & (yy >= 0) & (yy < Y) & (zz >= 0) & (zz < Z)
        out.append(encode(xx[ok], yy[ok], zz[ok], nx, ny))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def commit(states, surface, flags, in_surf, dims, faces):
    """Apply removals and return the updated surface list."""
    sel = flags.astype(bool)
    removed = surface[sel]
    states[removed] = 0
    in_surf[removed] = 0
    keep = surface[~sel]
    if removed.size == 0:
        return keep
    cand = _neighbors_in_domain(removed, dims, faces)
    cand = cand[(states[cand] == 1) & (in_surf[cand] == 0)]
    # first occurrence order, matching the serial scan of the jitted path
    _, first = np.unique(cand, return_index=True)
    cand = cand[np.sort(first)]
    in_surf[cand] = 1
    return np.concatenate([keep, cand])


def rescan(states, dims, faces, top, bot, in_surf):
    """Full scan: every SOLID site with an absent first- or second-shell neighbor."""
    in_surf[:] = 0
    solid = np.flatnonzero(states == 1).astype(np.int64)
    chunks = []
    for start in range(0, solid.size, 1 << 20):
        idx = solid[start:start + (1 << 20)]
        n1, n2 = shell_counts(states, idx, dims, faces, top, bot, shells=2)
        chunks.append(idx[(n1 < 4) | (n2 < 12)])
    surf = np.concatenate(chunks) if chunks else np.zeros(0, np.int64)
    in_surf[surf] = 1
    return surf
