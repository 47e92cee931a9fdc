"""Shortest-path agent producing fixed-length walkthroughs.

Headings are 12 bins of 30 degrees, measured clockwise from +z when viewed
top-down, so heading ``h`` points along ``(sin θ, cos θ)`` in ``(x, z)``.
A forward step moves 0.25 m along the heading and lands on the grid cell
containing that point; poses therefore always sit on cell centers, which
keeps the planner's (cell, heading) graph exact.
"""
import json
import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

from . import kernels
from .worldgen import traversable_mask

FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2
ACTION_NAMES = ("forward", "turn_left", "turn_right")
N_HEADINGS = 12
STEP_METERS = 0.25
HEADING_STEP = math.pi / 6


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class Pose:
    x: float
    z: float
    h: int  # heading bin, theta = h * pi / 6

    @property
    def theta(self):
        return self.h * HEADING_STEP

    def as_triple(self):
        return (self.x, self.z, self.theta)


def heading_bin(theta):
    k = theta / HEADING_STEP
    h = int(round(k))
    if abs(k - h) > 1e-9:
        raise ValueError(f"heading {theta} is not a multiple of pi/6")
    return h % N_HEADINGS


class MotionModel:
    """Forward-step offsets and swept cells per heading for a grid resolution."""

    def __init__(self, resolution):
        self.resolution = resolution
        step_cells = STEP_METERS / resolution
        self.fwd_dx = np.zeros(N_HEADINGS, dtype=np.int64)
        self.fwd_dz = np.zeros(N_HEADINGS, dtype=np.int64)
        sweeps = []
        for h in range(N_HEADINGS):
            th = h * HEADING_STEP
            tx = 0.5 + step_cells * math.sin(th)
            tz = 0.5 + step_cells * math.cos(th)
            dx, dz = math.floor(tx), math.floor(tz)
            self.fwd_dx[h], self.fwd_dz[h] = dx, dz
            cells = []
            for s in np.linspace(0.0, 1.0, 65)[1:]:
                c = (math.floor(0.5 + s * dx), math.floor(0.5 + s * dz))
                if c != (0, 0) and c not in cells:
                    cells.append(c)
            sweeps.append(cells)
        m = max(len(c) for c in sweeps)
        self.sweep = np.zeros((N_HEADINGS, m, 2), dtype=np.int64)
        self.sweep_len = np.zeros(N_HEADINGS, dtype=np.int64)
        for h, cells in enumerate(sweeps):
            self.sweep_len[h] = len(cells)
            for k, c in enumerate(cells):
                self.sweep[h, k] = c

    def forward_ok(self, trav, ix, iz, h):
        nz, nx = trav.shape
        for k in range(self.sweep_len[h]):
            cx = ix + int(self.sweep[h, k, 0])
            cz = iz + int(self.sweep[h, k, 1])
            if cx < 0 or cx >= nx or cz < 0 or cz >= nz or not trav[cz, cx]:
                return False
        return True


_MOTION = {}


def motion_model(resolution):
    if resolution not in _MOTION:
        _MOTION[resolution] = MotionModel(resolution)
    return _MOTION[resolution]


def _trav(env):
    cache = env.__dict__.get("_trav")
    if cache is None:
        cache = traversable_mask(env).astype(np.uint8)
        object.__setattr__(env, "_trav", cache)
    return cache


def pose_cell(env, pose):
    return env.cell_of(pose.x, pose.z)


def pose_at_cell(env, ix, iz, h):
    x, z = env.cell_center(ix, iz)
    return Pose(x, z, h % N_HEADINGS)


def step(env, pose, action):
    """Apply one action; a blocked forward step leaves the pose unchanged."""
    if action == TURN_LEFT:
        return Pose(pose.x, pose.z, (pose.h - 1) % N_HEADINGS)
    if action == TURN_RIGHT:
        return Pose(pose.x, pose.z, (pose.h + 1) % N_HEADINGS)
    if action != FORWARD:
        raise ValueError(f"unknown action {action!r}")
    mm = motion_model(env.grid_resolution)
    ix, iz = pose_cell(env, pose)
    if not mm.forward_ok(_trav(env), ix, iz, pose.h):
        return pose
    return pose_at_cell(env, ix + int(mm.fwd_dx[pose.h]), iz + int(mm.fwd_dz[pose.h]), pose.h)


def plan_shortest_path(env, start, goal):
    """Minimal action list from ``start`` (a Pose) to the goal cell ``(ix, iz)``."""
    mm = motion_model(env.grid_resolution)
    trav = _trav(env)
    gx, gz = goal
    nz, nx = trav.shape
    if not (0 <= gx < nx and 0 <= gz < nz) or not trav[gz, gx]:
        raise PlanningError(f"goal cell {goal} is not traversable")
    sx, sz = pose_cell(env, start)
    actions = kernels.bfs_plan(trav, (sx, sz, start.h), (gx, gz), mm.fwd_dx, mm.fwd_dz, mm.sweep, mm.sweep_len)
    if actions is None:
        raise PlanningError(f"goal cell {goal} unreachable from {(sx, sz)}")
    return actions


@dataclass
class Walkthrough:
    env_id: str
    seed: int
    poses: np.ndarray  # [T, 3] (x, z, theta)
    actions: np.ndarray  # [T-1] uint8

    @property
    def T(self):
        return len(self.poses)

    def pose(self, t):
        x, z, th = self.poses[t]
        return Pose(float(x), float(z), heading_bin(float(th)))

    def to_record(self, walkthrough_id=None):
        rec = {
            "env_id": self.env_id,
            "seed": self.seed,
            "T": self.T,
            "poses": [[float(x), float(z), float(th)] for x, z, th in self.poses],
            "actions": [int(a) for a in self.actions],
        }
        if walkthrough_id is not None:
            rec["walkthrough_id"] = walkthrough_id
        return rec

    @classmethod
    def from_record(cls, rec):
        return cls(env_id=rec["env_id"], seed=int(rec["seed"]),
                   poses=np.asarray(rec["poses"], dtype=np.float64).reshape(-1, 3),
                   actions=np.asarray(rec["actions"], dtype=np.uint8))


def walkthrough_rng(env, seed):
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(env.id.encode())]))


def cluster_goals(env, rng):
    """k-means centroids of traversable cells, snapped to traversable cells."""
    trav = _trav(env).astype(bool)
    iz, ix = np.nonzero(trav)
    pts = np.stack([ix, iz], axis=1).astype(np.float64)
    area = len(pts) * env.grid_resolution ** 2
    k = int(np.clip(round(area / 4.0), 4, 64))
    k = min(k, len(pts))
    centroids, _ = kmeans2(pts, k, iter=20, minit="++", seed=rng)
    cells = []
    for c in centroids:
        j = int(np.argmin(((pts - c) ** 2).sum(axis=1)))
        cell = (int(pts[j, 0]), int(pts[j, 1]))
        if cell not in cells:
            cells.append(cell)
    return cells


def generate_walkthrough(env, seed, T=128):
    """Goal-visiting walkthrough of exactly ``T`` poses; pure in (env, seed, T)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = walkthrough_rng(env, seed)
    centroids = cluster_goals(env, rng)
    start_cell = centroids[int(rng.integers(len(centroids)))]
    pose = pose_at_cell(env, start_cell[0], start_cell[1], int(rng.integers(N_HEADINGS)))
    others = [c for c in centroids if c != start_cell]
    dist = [math.hypot(c[0] - start_cell[0], c[1] - start_cell[1]) for c in others]
    n_goals = int(rng.integers(8, 17))
    nearest = [others[i] for i in np.argsort(dist, kind="stable")[:n_goals]]
    actions = []
    poses = [pose]
    while len(poses) < T:
        goals = [nearest[i] for i in rng.permutation(len(nearest))]
        progressed = False
        for goal in goals:
            if len(poses) >= T:
                break
            try:
                plan = plan_shortest_path(env, pose, goal)
            except Exception:
                continue
            for a in plan:
                if len(poses) >= T:
                    break
                pose = step(env, pose, a)
                actions.append(a)
                poses.append(pose)
                progressed = True
        if not progressed:
            pose = step(env, pose, TURN_LEFT)
            actions.append(TURN_LEFT)
            poses.append(pose)
    return Walkthrough(
        env_id=env.id, seed=int(seed),
        poses=np.array([p.as_triple() for p in poses], dtype=np.float64),
        actions=np.array(actions, dtype=np.uint8),
    )


def replay(env, start, actions):
    poses = [start]
    for a in actions:
        poses.append(step(env, poses[-1], int(a)))
    return poses


def save_walkthroughs(path, walkthroughs, ids=None):
    with open(path, "w") as fh:
        for i, w in enumerate(walkthroughs):
            fh.write(json.dumps(w.to_record(ids[i] if ids else None), separators=(",", ":")))
            fh.write("\n")


def load_walkthroughs(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(Walkthrough.from_record(json.loads(line)))
    return out
