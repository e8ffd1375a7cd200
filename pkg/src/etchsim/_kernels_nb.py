"""Jitted kernels for the cellular-automaton step."""
import numpy as np

from ._accel import njit, prange
from .lattice import BASIS, BASIS_LUT, OFFSETS_1, OFFSETS_2, OFFSETS_3
from .rng import draw_nb

SOLID_FACE, EXPOSED, PERIODIC = 0, 1, 2


@njit(cache=True, inline="always")
def _site_index(x, y, z, nx, ny):
    b = BASIS_LUT[((x & 3) << 4) | ((y & 3) << 2) | (z & 3)]
    return ((((z >> 2) * ny + (y >> 2)) * nx + (x >> 2)) << 3) + b


@njit(cache=True, inline="always")
def _site_coord(idx, nx, ny):
    b = idx & 7
    cell = idx >> 3
    cx = cell % nx
    cy = (cell // nx) % ny
    cz = cell // (nx * ny)
    return 4 * cx + BASIS[b, 0], 4 * cy + BASIS[b, 1], 4 * cz + BASIS[b, 2]


@njit(cache=True, inline="always")
def _present(states, x, y, z, nx, ny, nz, faces, top, bot):
    X = 4 * nx
    Y = 4 * ny
    if x < 0:
        if faces[0] != PERIODIC:
            return 1 if faces[0] == SOLID_FACE else 0
        x += X
    elif x >= X:
        if faces[1] != PERIODIC:
            return 1 if faces[1] == SOLID_FACE else 0
        x -= X
    if y < 0:
        if faces[2] != PERIODIC:
            return 1 if faces[2] == SOLID_FACE else 0
        y += Y
    elif y >= Y:
        if faces[3] != PERIODIC:
            return 1 if faces[3] == SOLID_FACE else 0
        y -= Y
    if z < 0:
        if faces[4] == SOLID_FACE:
            return 1
        return bot[x, y]
    if z >= 4 * nz:
        if faces[5] == SOLID_FACE:
            return 1
        return top[x, y]
    return 1 if states[_site_index(x, y, z, nx, ny)] != 0 else 0


@njit(cache=True)
def _counts(states, idx, nx, ny, nz, faces, top, bot):
    x, y, z = _site_coord(idx, nx, ny)
    s = x & 1
    n1 = 0
    for k in range(4):
        n1 += _present(states, x + OFFSETS_1[s, k, 0], y + OFFSETS_1[s, k, 1], z + OFFSETS_1[s, k, 2],
                       nx, ny, nz, faces, top, bot)
    n2 = 0
    for k in range(12):
        n2 += _present(states, x + OFFSETS_2[k, 0], y + OFFSETS_2[k, 1], z + OFFSETS_2[k, 2],
                       nx, ny, nz, faces, top, bot)
    n3 = 0
    for k in range(12):
        n3 += _present(states, x + OFFSETS_3[s, k, 0], y + OFFSETS_3[s, k, 1], z + OFFSETS_3[s, k, 2],
                       nx, ny, nz, faces, top, bot)
    return n1, n2, n3


@njit(cache=True, parallel=True)
def step_flags(states, surface, site_probs, seed, step, dims, faces, top, bot):
    nx, ny, nz = dims[0], dims[1], dims[2]
    n = surface.shape[0]
    flags = np.zeros(n, dtype=np.uint8)
    useed = np.uint64(seed)
    ustep = np.uint64(step)
    active = 0
    for i in prange(n):
        idx = surface[i]
        n1, n2, n3 = _counts(states, idx, nx, ny, nz, faces, top, bot)
        p = site_probs[n1 * 169 + n2 * 13 + n3]
        if p > 0.0:
            active += 1
            if draw_nb(useed, ustep, np.uint64(idx)) < p:
                flags[i] = 1
    return flags, active


@njit(cache=True, parallel=True)
def commit(states, surface, flags, in_surf, dims, faces):
    nx, ny, nz = dims[0], dims[1], dims[2]
    X, Y, Z = 4 * nx, 4 * ny, 4 * nz
    n = surface.shape[0]
    nrem = 0
    for i in range(n):
        nrem += flags[i]
    removed = np.empty(nrem, dtype=np.int64)
    keep = np.empty(n - nrem, dtype=np.int64)
    a = 0
    b = 0
    for i in range(n):
        if flags[i]:
            removed[a] = surface[i]
            a += 1
        else:
            keep[b] = surface[i]
            b += 1
    for k in prange(nrem):
        states[removed[k]] = 0
        in_surf[removed[k]] = 0

    # candidates are gathered in the same order as the numpy path:
    # offset-major, then removed-site order
    cand = np.full(16 * nrem, -1, dtype=np.int64)
    for k in prange(nrem):
        x, y, z = _site_coord(removed[k], nx, ny)
        s = x & 1
        for j in range(16):
            if j < 4:
                xx = x + OFFSETS_1[s, j, 0]
                yy = y + OFFSETS_1[s, j, 1]
                zz = z + OFFSETS_1[s, j, 2]
            else:
                xx = x + OFFSETS_2[j - 4, 0]
                yy = y + OFFSETS_2[j - 4, 1]
                zz = z + OFFSETS_2[j - 4, 2]
            if faces[0] == PERIODIC:
                xx = xx % X
            if faces[2] == PERIODIC:
                yy = yy % Y
            if 0 <= xx < X and 0 <= yy < Y and 0 <= zz < Z:
                cand[j * nrem + k] = _site_index(xx, yy, zz, nx, ny)

    out = np.empty(n - nrem + 16 * nrem, dtype=np.int64)
    out[: n - nrem] = keep
    m = n - nrem
    for c in cand:
        if c >= 0 and states[c] == 1 and in_surf[c] == 0:
            in_surf[c] = 1
            out[m] = c
            m += 1
    return out[:m].copy()


@njit(cache=True, parallel=True)
def rescan(states, dims, faces, top, bot, in_surf):
    nx, ny, nz = dims[0], dims[1], dims[2]
    n = states.shape[0]
    for idx in prange(n):
        in_surf[idx] = 0
        if states[idx] != 1:
            continue
        x, y, z = _site_coord(idx, nx, ny)
        s = x & 1
        hit = False
        for k in range(4):
            if _present(states, x + OFFSETS_1[s, k, 0], y + OFFSETS_1[s, k, 1], z + OFFSETS_1[s, k, 2],
                        nx, ny, nz, faces, top, bot) == 0:
                hit = True
                break
        if not hit:
            for k in range(12):
                if _present(states, x + OFFSETS_2[k, 0], y + OFFSETS_2[k, 1], z + OFFSETS_2[k, 2],
                            nx, ny, nz, faces, top, bot) == 0:
                    hit = True
                    break
        if hit:
            in_surf[idx] = 1
    return np.flatnonzero(in_surf).astype(np.int64)
