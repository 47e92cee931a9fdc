"""Local environment state labels.

For every object class the label records where the nearest instance lies
relative to the agent: 0 absent, 1 forward, 2 right, 3 behind, 4 left. An
instance only counts when it is closer than ``delta`` and some straight line
from the agent reaches its footprint without crossing a wall.
"""
import json
import math
from dataclasses import dataclass

import numpy as np

from .observation import is_visible_any_angle

ABSENT, FORWARD, RIGHT, BEHIND, LEFT = 0, 1, 2, 3, 4
DIRECTION_NAMES = ("forward", "right", "behind", "left")
N_STATES = 5
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class DirectionParams:
    delta: float = 3.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")


def _xzt(pose):
    if hasattr(pose, "theta"):
        return float(pose.x), float(pose.z), float(pose.theta)
    x, z, th = pose
    return float(x), float(z), float(th)


def relative_angle(pose, target):
    """Clockwise angle in ``[0, 2π)`` from the heading to the agent→target vector."""
    x, z, th = _xzt(pose)
    dx = target[0] - x
    dz = target[1] - z
    if dx == 0.0 and dz == 0.0:
        raise ValueError("target coincides with the agent position")
    # bearing measured clockwise from +z, same convention as headings
    a = (math.atan2(dx, dz) - th) % TWO_PI
    return 0.0 if a >= TWO_PI else a


def discretize_direction(angle):
    """Half-open 90° bins centred on forward, right, behind, left."""
    k = math.floor((angle % TWO_PI + math.pi / 4) / (math.pi / 2)) % 4
    return k + 1


def local_state_label(env, pose, params=DirectionParams()):
    x, z, _ = _xzt(pose)
    n_cls = len(env.object_taxonomy)
    y = np.zeros(n_cls, dtype=np.uint8)
    if not env.objects:
        return y
    ox, oz, _, cls = env.object_arrays()
    dist = np.hypot(ox - x, oz - z)
    for c in range(n_cls):
        idx = np.flatnonzero(cls == c)
        if idx.size == 0:
            continue
        j = int(idx[np.argmin(dist[idx])])  # argmin keeps the first (lowest index) tie
        if dist[j] < params.delta and is_visible_any_angle(env, (x, z), j):
            y[c] = discretize_direction(relative_angle(pose, env.objects[j].position))
    return y


# -- independent oracle -----------------------------------------------------------


def _segment_hits_box(x0, z0, x1, z1, bx0, bz0, bx1, bz1):
    """Liang-Barsky clip of a segment against a closed axis-aligned box."""
    t0, t1 = 0.0, 1.0
    for p, q in ((-(x1 - x0), x0 - bx0), (x1 - x0, bx1 - x0), (-(z1 - z0), z0 - bz0), (z1 - z0, bz1 - z0)):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        r = q / p
        if p < 0.0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return False
    return True


def _oracle_visible(wall_boxes, res, extent, px, pz, obj):
    cx, cz = obj.position
    rad = obj.footprint_radius
    samples = [(cx, cz)] + [(cx + rad * math.sin(k * math.pi / 4), cz + rad * math.cos(k * math.pi / 4))
                            for k in range(8)]
    for sx, sz in samples:
        if not (0.0 <= sx < extent[0] and 0.0 <= sz < extent[1]):
            continue
        lo_x, hi_x = min(px, sx), max(px, sx)
        lo_z, hi_z = min(pz, sz), max(pz, sz)
        blocked = False
        for bx, bz in wall_boxes:
            if bx + res < lo_x or bx > hi_x or bz + res < lo_z or bz > hi_z:
                continue
            if _segment_hits_box(px, pz, sx, sz, bx, bz, bx + res, bz + res):
                blocked = True
                break
        if not blocked:
            return True
    return False


def oracle_local_state(env, pose, params=DirectionParams()):
    """Exhaustive reference: sort every instance by distance, clip sight lines
    against every wall cell, compute the bearing with plain vector algebra."""
    x, z, th = _xzt(pose)
    res = env.grid_resolution
    nz, nx = env.occupancy.shape
    extent = (nx * res, nz * res)
    walls = [(ix * res, iz * res) for iz in range(nz) for ix in range(nx) if env.occupancy[iz, ix]]
    y = [0] * len(env.object_taxonomy)
    by_class = {}
    for i, o in enumerate(env.objects):
        d = math.sqrt((o.position[0] - x) ** 2 + (o.position[1] - z) ** 2)
        by_class.setdefault(o.class_id, []).append((d, i, o))
    for c, items in by_class.items():
        items.sort(key=lambda t: (t[0], t[1]))
        d, _, o = items[0]
        if not d < params.delta:
            continue
        if not _oracle_visible(walls, res, extent, x, z, o):
            continue
        # heading vector h=(sin th, cos th); right-hand vector r=(cos th, -sin th)
        vx, vz = o.position[0] - x, o.position[1] - z
        fwd = vx * math.sin(th) + vz * math.cos(th)
        right = vx * math.cos(th) - vz * math.sin(th)
        deg = math.degrees(math.atan2(right, fwd)) % 360.0
        if deg >= 315.0 or deg < 45.0:
            y[c] = FORWARD
        elif deg < 135.0:
            y[c] = RIGHT
        elif deg < 225.0:
            y[c] = BEHIND
        else:
            y[c] = LEFT
    return np.array(y, dtype=np.uint8)


def walkthrough_labels(env, poses, params=DirectionParams()):
    return np.stack([local_state_label(env, p, params) for p in poses]) if len(poses) else \
        np.zeros((0, len(env.object_taxonomy)), dtype=np.uint8)


def rotate_label(y, quarter_turns_right=1):
    """Label seen after turning right by 90° ``quarter_turns_right`` times."""
    y = np.asarray(y)
    out = y.copy()
    nz = y > 0
    out[nz] = (y[nz] - 1 - quarter_turns_right) % 4 + 1
    return out


LABEL_SCHEMA_VERSION = 1


def save_labels(path, labels_by_walkthrough):
    """JSON lines ``{walkthrough_id, step, y}``; first line is a header."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema_version": LABEL_SCHEMA_VERSION, "kind": "labels"}) + "\n")
        for wid, labels in labels_by_walkthrough:
            for t, y in enumerate(labels):
                fh.write(json.dumps({"walkthrough_id": wid, "step": t, "y": [int(v) for v in y]},
                                    separators=(",", ":")) + "\n")


def load_labels(path):
    out = {}
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != LABEL_SCHEMA_VERSION or header.get("kind") != "labels":
            raise ValueError(f"{path}: unsupported label file header {header}")
        for line in fh:
            rec = json.loads(line)
            out.setdefault(rec["walkthrough_id"], []).append(rec["y"])
    return {k: np.array(v, dtype=np.uint8) for k, v in out.items()}
