# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ray-casting, line-of-sight and planning kernels.

Mirror of ``_pykernels``; arithmetic order is kept identical so that both
backends return bit-identical results.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, sin, cos
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double NO_HIT = 1e300
cdef long HIT_WALL = -1
cdef long HIT_NOTHING = -2


cdef double _wall_distance(const unsigned char[:, ::1] occ, Py_ssize_t nz, Py_ssize_t nx, double res,
                           double ox, double oz, double dx, double dz, double tmax) noexcept nogil:
    cdef double u = ox / res
    cdef double v = oz / res
    cdef long ix = <long>floor(u)
    cdef long iz = <long>floor(v)
    cdef long step_x, step_z
    cdef double t_max_x, t_max_z, t_delta_x, t_delta_z, t
    if ix < 0 or ix >= nx or iz < 0 or iz >= nz or occ[iz, ix]:
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
        if occ[iz, ix]:
            return t


def cast_rays(const unsigned char[:, ::1] occ, double res, const double[::1] obj_x, const double[::1] obj_z,
              const double[::1] obj_r, double ox, double oz, const double[::1] angles, double dmax):
    cdef Py_ssize_t nz = occ.shape[0]
    cdef Py_ssize_t nx = occ.shape[1]
    cdef Py_ssize_t n = angles.shape[0]
    cdef Py_ssize_t n_obj = obj_x.shape[0]
    depth_arr = np.empty(n, dtype=np.float64)
    hit_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] depth = depth_arr
    cdef long long[::1] hit = hit_arr
    cdef Py_ssize_t k, j
    cdef double a, dx, dz, best_t, cx, cz, b, c, disc, t
    cdef long best
    with nogil:
        for k in range(n):
            a = angles[k]
            dx = sin(a)
            dz = cos(a)
            best_t = _wall_distance(occ, nz, nx, res, ox, oz, dx, dz, dmax)
            best = HIT_WALL if best_t <= dmax else HIT_NOTHING
            for j in range(n_obj):
                cx = ox - obj_x[j]
                cz = oz - obj_z[j]
                b = dx * cx + dz * cz
                c = cx * cx + cz * cz - obj_r[j] * obj_r[j]
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
    return depth_arr, hit_arr


cdef bint _segment_clear(const unsigned char[:, ::1] occ, double res, double x0, double z0,
                         double x1, double z1) noexcept nogil:
    cdef Py_ssize_t nz = occ.shape[0]
    cdef Py_ssize_t nx = occ.shape[1]
    cdef double ddx = x1 - x0
    cdef double ddz = z1 - z0
    cdef double length = sqrt(ddx * ddx + ddz * ddz)
    cdef long ix = <long>floor(x0 / res)
    cdef long iz = <long>floor(z0 / res)
    if ix < 0 or ix >= nx or iz < 0 or iz >= nz or occ[iz, ix]:
        return False
    if length == 0.0:
        return True
    return _wall_distance(occ, nz, nx, res, x0, z0, ddx / length, ddz / length, length) == NO_HIT


def segment_clear(const unsigned char[:, ::1] occ, double res, double x0, double z0, double x1, double z1):
    return bool(_segment_clear(occ, res, x0, z0, x1, z1))


def segments_clear(const unsigned char[:, ::1] occ, double res, double x0, double z0,
                   const double[::1] xs, const double[::1] zs):
    cdef Py_ssize_t n = xs.shape[0]
    out_arr = np.empty(n, dtype=np.uint8)
    cdef unsigned char[::1] out = out_arr
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = _segment_clear(occ, res, x0, z0, xs[i], zs[i])
    return out_arr.astype(bool)


def bfs_plan(const unsigned char[:, ::1] trav, long sx, long sz, long sh, long gx, long gz,
             const long long[::1] fwd_dx, const long long[::1] fwd_dz, const long long[:, :, ::1] sweep,
             const long long[::1] sweep_len):
    cdef Py_ssize_t nz = trav.shape[0]
    cdef Py_ssize_t nx = trav.shape[1]
    if sx == gx and sz == gz:
        return []
    cdef long n_states = nz * nx * 12
    cdef long *parent = <long *>malloc(n_states * sizeof(long))
    cdef signed char *parent_action = <signed char *>malloc(n_states * sizeof(signed char))
    cdef long *queue = <long *>malloc(n_states * sizeof(long))
    if parent == NULL or parent_action == NULL or queue == NULL:
        free(parent); free(parent_action); free(queue)
        raise MemoryError()
    cdef long i, s, h, cell, iz, ix, action, nxs, nzs, nh, ns, cx, cz, k
    cdef long head = 0, tail = 0, found = -1
    cdef long start = (sz * nx + sx) * 12 + sh
    cdef bint ok
    with nogil:
        for i in range(n_states):
            parent[i] = -1
            parent_action[i] = 0
        parent[start] = start
        queue[tail] = start
        tail += 1
        while head < tail:
            s = queue[head]
            head += 1
            h = s % 12
            cell = s // 12
            iz = cell // nx
            ix = cell % nx
            for action in range(3):
                if action == 0:
                    ok = True
                    for k in range(sweep_len[h]):
                        cx = ix + sweep[h, k, 0]
                        cz = iz + sweep[h, k, 1]
                        if cx < 0 or cx >= nx or cz < 0 or cz >= nz or not trav[cz, cx]:
                            ok = False
                            break
                    if not ok:
                        continue
                    nxs = ix + fwd_dx[h]
                    nzs = iz + fwd_dz[h]
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
                parent_action[ns] = <signed char>action
                if nxs == gx and nzs == gz:
                    found = ns
                    break
                queue[tail] = ns
                tail += 1
            if found != -1:
                break
    actions = None
    if found != -1:
        actions = []
        s = found
        while s != start:
            actions.append(<int>parent_action[s])
            s = parent[s]
        actions.reverse()
    free(parent)
    free(parent_action)
    free(queue)
    return actions
