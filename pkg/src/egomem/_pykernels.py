"""Pure-Python versions of the hot kernels.

These are the reference semantics for ``_kernels.pyx``; both must produce
bit-identical results, so arithmetic here is written in exactly the same
order as the compiled code. Do not "simplify" expressions in one file
without mirroring the change in the other.
"""
from collections import deque
from math import floor, sqrt

import numpy as np

NO_HIT = 1e300
HIT_WALL = -1
HIT_NOTHING = -2


def _wall_distance(occ, nz, nx, res, ox, oz, dx, dz, tmax):
    u = ox / res
    v = oz / res
    ix = int(floor(u))
    iz = int(floor(v))
    if ix < 0 or ix >= nx or iz < 0 or iz >= nz or occ[iz][ix]:
        return 0.0
    if dx > 0.0:
        step_x = 1
        t_max_x = ((ix + 1) - u) * res / dx
        t_delta_x = res / dx
    elif dx < 0.0:
        step_x = -1
        t_max_x = (ix - u) * res / dx
        t_delta_x = -res / dx
    else:
        step_x = 0
        t_max_x = NO_HIT
        t_delta_x = NO_HIT
    if dz > 0.0:
        step_z = 1
        t_max_z = ((iz + 1) - v) * res / dz
        t_delta_z = res / dz
    elif dz < 0.0:
        step_z = -1
        t_max_z = (iz - v) * res / dz
        t_delta_z = -res / dz
    else:
        step_z = 0
        t_max_z = NO_HIT
        t_delta_z = NO_HIT
    while True:
        if t_max_x < t_max_z:
            t = t_max_x
            ix += step_x
            t_max_x += t_delta_x
        else:
            t = t_max_z
            iz += step_z
            t_max_z += t_delta_z
        if t > tmax:
            return NO_HIT
        if ix < 0 or ix >= nx or iz < 0 or iz >= nz:
            return t
        if occ[iz][ix]:
            return t


def cast_rays(occ, res, obj_x, obj_z, obj_r, ox, oz, angles, dmax):
    """Cast one ray per angle from (ox, oz).

    Returns ``(depth, hit)``: metric depth of the first hit (``dmax`` when
    nothing is hit) and the hit code per ray (instance index, ``HIT_WALL`` or
    ``HIT_NOTHING``).
    """
    occ_rows = occ.tolist()
    nz, nx = occ.shape
    ox_ = [float(v) for v in obj_x]
    oz_ = [float(v) for v in obj_z]
    or_ = [float(v) for v in obj_r]
    n_obj = len(ox_)
    n = len(angles)
    depth = np.empty(n, dtype=np.float64)
    hit = np.empty(n, dtype=np.int64)
    from math import cos, sin

    for k in range(n):
        a = float(angles[k])
        dx = sin(a)
        dz = cos(a)
        best_t = _wall_distance(occ_rows, nz, nx, res, ox, oz, dx, dz, dmax)
        best = HIT_WALL if best_t <= dmax else HIT_NOTHING
        for j in range(n_obj):
            cx = ox - ox_[j]
            cz = oz - oz_[j]
            b = dx * cx + dz * cz
            c = cx * cx + cz * cz - or_[j] * or_[j]
            if c <= 0.0:
                t = 0.0
            else:
                if b >= 0.0:
                    continue
                disc = b * b - c
                if disc < 0.0:
                    continue
                t = -b - sqrt(disc)
            if t < best_t and t <= dmax:
                best_t = t
                best = j
        depth[k] = best_t if best != HIT_NOTHING else dmax
        hit[k] = best
    return depth, hit


def segment_clear(occ, res, x0, z0, x1, z1):
    """True iff no obstacle cell intersects the segment (x0,z0)-(x1,z1)."""
    nz, nx = occ.shape
    ddx = x1 - x0
    ddz = z1 - z0
    length = sqrt(ddx * ddx + ddz * ddz)
    ix = int(floor(x0 / res))
    iz = int(floor(z0 / res))
    if ix < 0 or ix >= nx or iz < 0 or iz >= nz or occ[iz, ix]:
        return False
    if length == 0.0:
        return True
    dx = ddx / length
    dz = ddz / length
    t = _wall_distance(occ, nz, nx, res, x0, z0, dx, dz, length)
    return t == NO_HIT


def segments_clear(occ, res, x0, z0, xs, zs):
    return np.array([segment_clear(occ, res, x0, z0, float(x), float(z)) for x, z in zip(xs, zs)], dtype=bool)


def bfs_plan(trav, sx, sz, sh, gx, gz, fwd_dx, fwd_dz, sweep, sweep_len):
    """Breadth-first search over (cell, heading) states.

    Actions are expanded in the fixed order forward, turn_left, turn_right,
    which makes the returned minimal path unique. Returns a list of action
    codes (0, 1, 2) or ``None`` if the goal cell is unreachable.
    """
    nz, nx = trav.shape
    if sx == gx and sz == gz:
        return []
    n_states = nz * nx * 12
    parent = np.full(n_states, -1, dtype=np.int64)
    parent_action = np.zeros(n_states, dtype=np.int8)
    start = (sz * nx + sx) * 12 + sh
    parent[start] = start
    queue = deque([start])
    tr = trav.tolist()
    fdx = [int(v) for v in fwd_dx]
    fdz = [int(v) for v in fwd_dz]
    sw = [[(int(sweep[h, k, 0]), int(sweep[h, k, 1])) for k in range(int(sweep_len[h]))] for h in range(12)]
    found = -1
    while queue:
        s = queue.popleft()
        h = s % 12
        cell = s // 12
        iz = cell // nx
        ix = cell % nx
        for action in range(3):
            if action == 0:
                ok = True
                for ox, oz in sw[h]:
                    cx = ix + ox
                    cz = iz + oz
                    if cx < 0 or cx >= nx or cz < 0 or cz >= nz or not tr[cz][cx]:
                        ok = False
                        break
                if not ok:
                    continue
                nxs = ix + fdx[h]
                nzs = iz + fdz[h]
                nh = h
            elif action == 1:
                nxs = ix
                nzs = iz
                nh = (h + 11) % 12
            else:
                nxs = ix
                nzs = iz
                nh = (h + 1) % 12
            ns = (nzs * nx + nxs) * 12 + nh
            if parent[ns] != -1:
                continue
            parent[ns] = s
            parent_action[ns] = action
            if nxs == gx and nzs == gz:
                found = ns
                break
            queue.append(ns)
        if found != -1:
            break
    if found == -1:
        return None
    actions = []
    s = found
    while s != start:
        actions.append(int(parent_action[s]))
        s = int(parent[s])
    actions.reverse()
    return actions
