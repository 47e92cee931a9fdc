"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the pure-Python
reference in ``_pykernels`` is used. ``EGOMEM_KERNELS=python`` forces the
fallback (handy for cross-checking the two).
"""
import os

import numpy as np

from . import _pykernels

NO_HIT = _pykernels.NO_HIT
HIT_WALL = _pykernels.HIT_WALL
HIT_NOTHING = _pykernels.HIT_NOTHING

_compiled = None
if os.environ.get("EGOMEM_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # pragma: no cover - depends on build
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def _backend(name):
    if name is None:
        return _compiled if _compiled is not None else _pykernels
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def cast_rays(occ, res, obj_x, obj_z, obj_r, ox, oz, angles, dmax, backend=None):
    return _backend(backend).cast_rays(
        np.ascontiguousarray(occ, dtype=np.uint8), float(res), _f64(obj_x), _f64(obj_z), _f64(obj_r),
        float(ox), float(oz), _f64(angles), float(dmax),
    )


def segment_clear(occ, res, x0, z0, x1, z1, backend=None):
    return _backend(backend).segment_clear(
        np.ascontiguousarray(occ, dtype=np.uint8), float(res), float(x0), float(z0), float(x1), float(z1)
    )


def segments_clear(occ, res, x0, z0, xs, zs, backend=None):
    return _backend(backend).segments_clear(
        np.ascontiguousarray(occ, dtype=np.uint8), float(res), float(x0), float(z0), _f64(xs), _f64(zs)
    )


def bfs_plan(trav, start, goal, fwd_dx, fwd_dz, sweep, sweep_len, backend=None):
    sx, sz, sh = (int(v) for v in start)
    gx, gz = (int(v) for v in goal)
    return _backend(backend).bfs_plan(
        np.ascontiguousarray(trav, dtype=np.uint8), sx, sz, sh, gx, gz,
        np.ascontiguousarray(fwd_dx, dtype=np.int64), np.ascontiguousarray(fwd_dz, dtype=np.int64),
        np.ascontiguousarray(sweep, dtype=np.int64), np.ascontiguousarray(sweep_len, dtype=np.int64),
    )
