"""Egocentric ray-cast frame features and visibility / proximity predicates.

A frame feature holds ``R`` rays spread across the field of view, left to
right. Each ray contributes a block ``[depth / d_max, one-hot category]``
where the category is wall, one of the object classes, or nothing within
``d_max``.
"""
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .worldgen import ObjectInstance, room_at

N_RAYS = 24
FOV = math.pi / 2
D_MAX = 5.0
SEEN_THRESHOLD = 0.05
VISIT_DISTANCE = 1.0


@dataclass(frozen=True)
class FeatureLayout:
    n_rays: int = N_RAYS
    n_classes: int = 8
    fov: float = FOV
    d_max: float = D_MAX

    @property
    def block(self):
        return self.n_classes + 3  # depth, wall, classes..., nothing

    @property
    def size(self):
        return self.n_rays * self.block

    @property
    def wall_slot(self):
        return 1

    def class_slot(self, c):
        return 2 + c

    @property
    def nothing_slot(self):
        return self.n_classes + 2

    def ray_offsets(self):
        step = self.fov / self.n_rays
        return -self.fov / 2 + (np.arange(self.n_rays) + 0.5) * step


def layout_for(env, n_rays=N_RAYS):
    return FeatureLayout(n_rays=n_rays, n_classes=len(env.object_taxonomy))


def _pose_xzt(pose):
    if hasattr(pose, "theta"):
        return float(pose.x), float(pose.z), float(pose.theta)
    x, z, th = pose
    return float(x), float(z), float(th)


def cast(env, pose, layout=None):
    """Raw ray cast: ``(depth_m, hit)`` per ray; ``hit`` is an instance index,
    ``kernels.HIT_WALL`` or ``kernels.HIT_NOTHING``."""
    layout = layout or layout_for(env)
    x, z, th = _pose_xzt(pose)
    ox, oz, orad, _ = env.object_arrays()
    angles = th + layout.ray_offsets()
    return kernels.cast_rays(env.occupancy, env.grid_resolution, ox, oz, orad, x, z, angles, layout.d_max)


def encode_rays(env, depth, hit, layout=None):
    layout = layout or layout_for(env)
    classes = env.object_arrays()[3]
    feat = np.zeros((layout.n_rays, layout.block), dtype=np.float64)
    feat[:, 0] = depth / layout.d_max
    for k in range(layout.n_rays):
        h = int(hit[k])
        if h == kernels.HIT_WALL:
            feat[k, layout.wall_slot] = 1.0
        elif h == kernels.HIT_NOTHING:
            feat[k, layout.nothing_slot] = 1.0
        else:
            feat[k, layout.class_slot(int(classes[h]))] = 1.0
    return feat.reshape(-1)


def egocentric_features(env, pose, layout=None):
    layout = layout or layout_for(env)
    depth, hit = cast(env, pose, layout)
    return encode_rays(env, depth, hit, layout)


def walkthrough_features(env, poses, layout=None):
    """Features and per-ray hits for every pose row ``(x, z, theta)``."""
    layout = layout or layout_for(env)
    feats = np.empty((len(poses), layout.size), dtype=np.float64)
    hits = np.empty((len(poses), layout.n_rays), dtype=np.int64)
    for t, p in enumerate(poses):
        depth, hit = cast(env, p, layout)
        feats[t] = encode_rays(env, depth, hit, layout)
        hits[t] = hit
    return feats, hits


def decode_categories(feature, layout):
    """Category index per ray: 0 wall, 1..|O| object class + 1, |O|+1 nothing."""
    blocks = np.asarray(feature).reshape(layout.n_rays, layout.block)
    return np.argmax(blocks[:, 1:], axis=1)


def footprint_samples(obj):
    """Footprint center followed by 8 boundary points at 45 degree spacing."""
    x, z = obj.position
    r = obj.footprint_radius
    pts = [(x, z)]
    for k in range(8):
        a = k * math.pi / 4
        pts.append((x + r * math.sin(a), z + r * math.cos(a)))
    return pts


def _object(env, obj):
    return env.objects[obj] if isinstance(obj, (int, np.integer)) else obj


def is_visible_any_angle(env, position, obj):
    """True iff a wall-free segment joins ``position`` to some footprint sample."""
    obj = _object(env, obj)
    pts = footprint_samples(obj)
    xs = np.array([p[0] for p in pts])
    zs = np.array([p[1] for p in pts])
    return bool(kernels.segments_clear(env.occupancy, env.grid_resolution, position[0], position[1], xs, zs).any())


def seen_fraction(env, pose, obj, layout=None):
    """Fraction of field-of-view rays whose first hit is instance ``obj`` (an index)."""
    if not isinstance(obj, (int, np.integer)):
        obj = env.objects.index(obj)
    layout = layout or layout_for(env)
    _, hit = cast(env, pose, layout)
    return float(np.count_nonzero(hit == obj)) / layout.n_rays


@dataclass(frozen=True)
class RoomTarget:
    label: int


def is_visited(env, position, target):
    """Objects: closer than 1.0 m (visibility ignored). Rooms: standing inside one with that label."""
    if isinstance(target, RoomTarget):
        return room_at(env, position) == target.label
    obj = _object(env, target)
    if not isinstance(obj, ObjectInstance):
        raise TypeError(f"cannot test a visit to {target!r}")
    dx = position[0] - obj.position[0]
    dz = position[1] - obj.position[1]
    return math.sqrt(dx * dx + dz * dz) < VISIT_DISTANCE


# -- feature cache file ---------------------------------------------------------

CACHE_MAGIC = b"EGFC"
CACHE_VERSION = 1


def write_feature_cache(path, layout, walkthrough_ids, features):
    """Write ``features`` (list of ``[T_i, F]`` arrays) as float32 rows.

    Header: magic, version, R, |O|, F, row count, walkthrough count, then per
    walkthrough its id (length-prefixed UTF-8) and step count.
    """
    rows = sum(len(f) for f in features)
    parts = [CACHE_MAGIC, struct.pack("<6I", CACHE_VERSION, layout.n_rays, layout.n_classes, layout.size, rows,
                                      len(walkthrough_ids))]
    for wid, f in zip(walkthrough_ids, features):
        raw = str(wid).encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(f)))
    for f in features:
        parts.append(np.ascontiguousarray(f, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class FeatureCache:
    def __init__(self, layout, index, data):
        self.layout = layout
        self.index = index  # walkthrough_id -> (row offset, T)
        self.data = data

    def get(self, walkthrough_id, step=None):
        off, T = self.index[walkthrough_id]
        block = self.data[off:off + T]
        return block if step is None else block[step]

    def __len__(self):
        return len(self.index)


def read_feature_cache(path):
    buf = open(path, "rb").read()
    if buf[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache")
    version, n_rays, n_classes, size, rows, n_w = struct.unpack_from("<6I", buf, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported feature cache version {version}")
    layout = FeatureLayout(n_rays=n_rays, n_classes=n_classes)
    if layout.size != size:
        raise ValueError(f"{path}: header F={size} inconsistent with R={n_rays}, |O|={n_classes}")
    off = 28
    index = {}
    row = 0
    for _ in range(n_w):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        wid = buf[off:off + n].decode("utf-8")
        off += n
        (T,) = struct.unpack_from("<I", buf, off)
        off += 4
        index[wid] = (row, T)
        row += T
    if row != rows:
        raise ValueError(f"{path}: index covers {row} rows, header says {rows}")
    data = np.frombuffer(buf, dtype="<f4", count=rows * size, offset=off).reshape(rows, size).astype(np.float64)
    return FeatureCache(layout, index, data)
