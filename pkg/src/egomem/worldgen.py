"""Procedural indoor environments: rooms, doors, occupancy grid and objects.

Coordinates: ``x`` grows along grid columns, ``z`` along grid rows, both in
meters; cell ``(ix, iz)`` covers ``[ix*res, (ix+1)*res) x [iz*res, (iz+1)*res)``.
The occupancy array is indexed ``occ[iz, ix]``.
"""
import base64
import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

SCHEMA_VERSION = 1

OBJECT_TAXONOMY = ["chair", "table", "couch", "bed", "sink", "toilet", "tv", "plant"]
OBJECT_TAXONOMY_20 = OBJECT_TAXONOMY + [
    "oven", "refrigerator", "microwave", "book", "clock", "vase", "bench", "laptop",
    "bowl", "cup", "bottle", "lamp",
]
ROOM_TAXONOMY = ["kitchen", "bedroom", "bathroom", "living room", "hallway", "office"]

# relative placement weights per room label; unlisted classes get weight 0
PLACEMENT_PRIOR = {
    "kitchen": {"table": 3, "sink": 3, "chair": 2, "plant": 1, "oven": 3, "refrigerator": 3,
                "microwave": 2, "bowl": 2, "cup": 1, "bottle": 1},
    "bedroom": {"bed": 5, "chair": 1, "tv": 2, "plant": 1, "clock": 2, "lamp": 2, "book": 1},
    "bathroom": {"sink": 4, "toilet": 5, "plant": 1, "bottle": 1, "cup": 1},
    "living room": {"couch": 4, "tv": 3, "table": 2, "plant": 2, "vase": 2, "lamp": 2, "book": 1},
    "hallway": {"plant": 3, "chair": 1, "bench": 2, "clock": 1, "vase": 1},
    "office": {"table": 3, "chair": 4, "plant": 1, "laptop": 3, "book": 2, "lamp": 1},
}


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldParams:
    n_rooms: int = 5
    grid_size: tuple = (12.0, 12.0)
    objects_per_room: int = 3
    resolution: float = 0.125
    n_object_classes: int = 8
    footprint_radius: float = 0.2
    extra_door_prob: float = 0.3
    door_width: float = 1.0
    min_room_side: float = 2.5
    wall_margin: float = 0.35
    min_object_spacing: float = 0.8
    door_clearance: float = 1.0
    agent_clearance: float = 0.15


@dataclass(frozen=True)
class Room:
    label: int
    bounds: tuple  # (x0, z0, x1, z1) meters, half-open
    cells: tuple  # (ix0, iz0, ix1, iz1) inclusive

    def contains(self, x, z):
        x0, z0, x1, z1 = self.bounds
        return x0 <= x < x1 and z0 <= z < z1

    @property
    def centroid(self):
        x0, z0, x1, z1 = self.bounds
        return ((x0 + x1) / 2, (z0 + z1) / 2)


@dataclass(frozen=True)
class ObjectInstance:
    class_id: int
    position: tuple
    footprint_radius: float = 0.2


@dataclass(frozen=True)
class Door:
    rooms: tuple  # indices into EnvironmentSpec.rooms
    cells: tuple  # ((ix, iz), ...)

    @property
    def center(self):
        return self.cells[len(self.cells) // 2]


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    id: str
    seed: int
    grid_resolution: float
    occupancy: np.ndarray
    rooms: tuple
    objects: tuple
    doors: tuple
    object_taxonomy: tuple
    room_taxonomy: tuple
    params: WorldParams = field(default_factory=WorldParams)

    @property
    def shape(self):
        return self.occupancy.shape

    @property
    def extent(self):
        nz, nx = self.occupancy.shape
        return nx * self.grid_resolution, nz * self.grid_resolution

    def cell_of(self, x, z):
        return int(np.floor(x / self.grid_resolution)), int(np.floor(z / self.grid_resolution))

    def cell_center(self, ix, iz):
        r = self.grid_resolution
        return (ix + 0.5) * r, (iz + 0.5) * r

    def object_arrays(self):
        """``(x, z, radius, class_id)`` arrays over all instances, cached."""
        cache = self.__dict__.get("_obj_arrays")
        if cache is None:
            xs = np.array([o.position[0] for o in self.objects], dtype=np.float64)
            zs = np.array([o.position[1] for o in self.objects], dtype=np.float64)
            rs = np.array([o.footprint_radius for o in self.objects], dtype=np.float64)
            cs = np.array([o.class_id for o in self.objects], dtype=np.int64)
            cache = (xs, zs, rs, cs)
            object.__setattr__(self, "_obj_arrays", cache)
        return cache

    def object_room(self, i):
        x, z = self.objects[i].position
        for k, room in enumerate(self.rooms):
            if room.contains(x, z):
                return k
        return None

    def to_json(self):
        return dumps_environment(self)


# -- grid helpers ----------------------------------------------------------------

def navigable_mask(occ):
    """Free cells whose 8-neighbourhood holds no obstacle (outside the grid counts as obstacle)."""
    free = ~occ.astype(bool)
    padded = np.pad(free, 1, constant_values=False)
    nz, nx = occ.shape
    out = np.ones_like(free)
    for dz in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out &= padded[1 + dz:1 + dz + nz, 1 + dx:1 + dx + nx]
    return out


def navigable_cells(env):
    mask = navigable_mask(env.occupancy)
    iz, ix = np.nonzero(mask)
    return set(zip(ix.tolist(), iz.tolist()))


def traversable_mask(env, clearance=None):
    """Navigable cells whose centers keep clear of every object footprint."""
    clearance = env.params.agent_clearance if clearance is None else clearance
    mask = navigable_mask(env.occupancy)
    if env.objects:
        nz, nx = mask.shape
        r = env.grid_resolution
        cx = (np.arange(nx) + 0.5) * r
        cz = (np.arange(nz) + 0.5) * r
        for obj in env.objects:
            ox, oz = obj.position
            lim = obj.footprint_radius + clearance
            d2 = (cx[None, :] - ox) ** 2 + (cz[:, None] - oz) ** 2
            mask &= d2 > lim * lim
    return mask


def flood_fill(mask, start, connectivity=4):
    """Cells reachable from ``start=(ix, iz)`` within a boolean mask."""
    nz, nx = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    sx, sz = start
    if not mask[sz, sx]:
        return seen
    steps = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    if connectivity == 8:
        steps += [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    seen[sz, sx] = True
    queue = deque([(sx, sz)])
    while queue:
        x, z = queue.popleft()
        for dx, dz in steps:
            a, b = x + dx, z + dz
            if 0 <= a < nx and 0 <= b < nz and mask[b, a] and not seen[b, a]:
                seen[b, a] = True
                queue.append((a, b))
    return seen


def room_at(env, position):
    """Label of the room containing ``position``; ``None`` in doorways or walls."""
    x, z = position
    w, h = env.extent
    if not (0.0 <= x < w and 0.0 <= z < h):
        raise ValueError(f"position {position} outside the grid [0,{w})x[0,{h})")
    for room in env.rooms:
        if room.contains(x, z):
            return room.label
    return None


def room_index_at(env, position):
    x, z = position
    for k, room in enumerate(env.rooms):
        if room.contains(x, z):
            return k
    return None


# -- generation ------------------------------------------------------------------

def _split_rooms(rng, nx, nz, n_rooms, min_cells):
    leaves = [(1, 1, nx - 2, nz - 2)]
    while len(leaves) < n_rooms:
        order = sorted(range(len(leaves)), key=lambda i: -((leaves[i][2] - leaves[i][0] + 1) * (leaves[i][3] - leaves[i][1] + 1)))
        for i in order:
            x0, z0, x1, z1 = leaves[i]
            w, h = x1 - x0 + 1, z1 - z0 + 1
            axes = [0, 1] if w >= h else [1, 0]
            done = False
            for axis in axes:
                span = w if axis == 0 else h
                if span < 2 * min_cells + 1:
                    continue
                lo = min_cells
                hi = span - min_cells - 1
                p = int(rng.integers(lo, hi + 1))
                if axis == 0:
                    a = (x0, z0, x0 + p - 1, z1)
                    b = (x0 + p + 1, z0, x1, z1)
                else:
                    a = (x0, z0, x1, z0 + p - 1)
                    b = (x0, z0 + p + 1, x1, z1)
                leaves[i:i + 1] = [a, b]
                done = True
                break
            if done:
                break
        else:
            raise GenerationError(f"cannot fit {n_rooms} rooms of side >= {min_cells} cells in a {nx}x{nz} grid")
    return leaves


def _shared_wall(a, b, door_cells):
    """Door candidate span between two leaf rectangles, or None."""
    ax0, az0, ax1, az1 = a
    bx0, bz0, bx1, bz1 = b
    for (p, q) in ((a, b), (b, a)):
        px0, pz0, px1, pz1 = p
        qx0, qz0, qx1, qz1 = q
        if px1 + 2 == qx0:
            lo, hi = max(pz0, qz0), min(pz1, qz1)
            if hi - lo + 1 >= door_cells + 2:
                return ("x", px1 + 1, lo + 1, hi - 1)
        if pz1 + 2 == qz0:
            lo, hi = max(px0, qx0), min(px1, qx1)
            if hi - lo + 1 >= door_cells + 2:
                return ("z", pz1 + 1, lo + 1, hi - 1)
    return None


def generate_environment(seed, params=None, env_id=None, object_taxonomy=None):
    """Build a deterministic random floorplan for ``seed``."""
    params = params or WorldParams()
    if params.n_rooms < 2:
        raise GenerationError("n_rooms must be >= 2")
    gw, gh = params.grid_size
    if gw < 8.0 or gh < 8.0:
        raise GenerationError("grid_size must be at least 8m x 8m")
    if object_taxonomy is None:
        object_taxonomy = OBJECT_TAXONOMY if params.n_object_classes <= 8 else OBJECT_TAXONOMY_20
        object_taxonomy = object_taxonomy[:params.n_object_classes]
    object_taxonomy = tuple(object_taxonomy)
    res = params.resolution
    nx = int(round(gw / res))
    nz = int(round(gh / res))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x57A9]))
    min_cells = int(np.ceil(params.min_room_side / res))
    door_cells = int(round(params.door_width / res))

    for _attempt in range(20):
        leaves = _split_rooms(rng, nx, nz, params.n_rooms, min_cells)
        n = len(leaves)
        adjacency = {}
        for i in range(n):
            for j in range(i + 1, n):
                wall = _shared_wall(leaves[i], leaves[j], door_cells)
                if wall is not None:
                    adjacency[(i, j)] = wall
        # random spanning tree over the room adjacency graph
        parent = list(range(n))

        def find(u):
            while parent[u] != u:
                parent[u] = parent[parent[u]]
                u = parent[u]
            return u

        edges = sorted(adjacency)
        order = rng.permutation(len(edges))
        tree = []
        for k in order:
            i, j = edges[k]
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[ri] = rj
                tree.append((i, j))
        if len(tree) == n - 1:
            break
    else:
        raise GenerationError("could not connect rooms with doors")

    chosen = set(tree)
    for e in edges:
        if e not in chosen and rng.random() < params.extra_door_prob:
            chosen.add(e)

    occ = np.ones((nz, nx), dtype=bool)
    for x0, z0, x1, z1 in leaves:
        occ[z0:z1 + 1, x0:x1 + 1] = False
    doors = []
    for (i, j) in sorted(chosen):
        axis, line, lo, hi = adjacency[(i, j)]
        start = int(rng.integers(lo, hi - door_cells + 2))
        cells = []
        for k in range(start, start + door_cells):
            if axis == "x":
                occ[k, line] = False
                cells.append((line, k))
            else:
                occ[line, k] = False
                cells.append((k, line))
        doors.append(Door(rooms=(i, j), cells=tuple(cells)))

    if len(ROOM_TAXONOMY) >= n:
        labels = rng.permutation(len(ROOM_TAXONOMY))[:n]
    else:
        labels = rng.integers(0, len(ROOM_TAXONOMY), size=n)
    rooms = tuple(
        Room(label=int(lab), bounds=(x0 * res, z0 * res, (x1 + 1) * res, (z1 + 1) * res), cells=(x0, z0, x1, z1))
        for lab, (x0, z0, x1, z1) in zip(labels, leaves)
    )

    door_centers = [((d.center[0] + 0.5) * res, (d.center[1] + 0.5) * res) for d in doors]
    objects = []
    base = EnvironmentSpec(
        id=env_id or f"env-{int(seed)}", seed=int(seed), grid_resolution=res, occupancy=occ, rooms=rooms,
        objects=(), doors=tuple(doors), object_taxonomy=object_taxonomy, room_taxonomy=tuple(ROOM_TAXONOMY),
        params=params,
    )
    for room in rooms:
        prior = PLACEMENT_PRIOR[ROOM_TAXONOMY[room.label]]
        weights = np.array([prior.get(name, 0) for name in object_taxonomy], dtype=np.float64)
        if weights.sum() == 0:
            weights[:] = 1.0
        weights /= weights.sum()
        count = int(rng.integers(1, params.objects_per_room + 1))
        x0, z0, x1, z1 = room.bounds
        m = params.wall_margin
        for _ in range(count):
            cls = int(rng.choice(len(object_taxonomy), p=weights))
            for _try in range(40):
                px = float(np.round(rng.uniform(x0 + m, x1 - m), 4))
                pz = float(np.round(rng.uniform(z0 + m, z1 - m), 4))
                if any((px - o.position[0]) ** 2 + (pz - o.position[1]) ** 2 < params.min_object_spacing ** 2 for o in objects):
                    continue
                if any((px - dx) ** 2 + (pz - dz) ** 2 < params.door_clearance ** 2 for dx, dz in door_centers):
                    continue
                cand = ObjectInstance(class_id=cls, position=(px, pz), footprint_radius=params.footprint_radius)
                trial = _with_objects(base, objects + [cand])
                if _single_component(traversable_mask(trial)):
                    objects.append(cand)
                    break
    return _with_objects(base, objects)


def _with_objects(env, objects):
    return EnvironmentSpec(
        id=env.id, seed=env.seed, grid_resolution=env.grid_resolution, occupancy=env.occupancy, rooms=env.rooms,
        objects=tuple(objects), doors=env.doors, object_taxonomy=env.object_taxonomy,
        room_taxonomy=env.room_taxonomy, params=env.params,
    )


def _single_component(mask):
    _, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    return count == 1


# -- invariant checker -------------------------------------------------------------

def check_environment(env):
    """Return a list of invariant violations (empty when the environment is valid)."""
    problems = []
    occ = env.occupancy
    res = env.grid_resolution
    free = ~occ
    for k, room in enumerate(env.rooms):
        x0, z0, x1, z1 = room.bounds
        if not (x1 > x0 and z1 > z0):
            problems.append(f"room {k} has empty bounds")
        if not 0 <= room.label < len(env.room_taxonomy):
            problems.append(f"room {k} label {room.label} invalid")
        cx0, cz0, cx1, cz1 = room.cells
        if occ[cz0:cz1 + 1, cx0:cx1 + 1].any():
            problems.append(f"room {k} contains obstacle cells")
    for a in range(len(env.rooms)):
        for b in range(a + 1, len(env.rooms)):
            ra, rb = env.rooms[a].cells, env.rooms[b].cells
            if not (ra[2] < rb[0] or rb[2] < ra[0] or ra[3] < rb[1] or rb[3] < ra[1]):
                problems.append(f"rooms {a} and {b} overlap")
    for d in env.doors:
        for (ix, iz) in d.cells:
            if occ[iz, ix]:
                problems.append(f"door cell {(ix, iz)} is blocked")
            touching = set()
            for dx, dz in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                k = room_index_at(env, ((ix + dx + 0.5) * res, (iz + dz + 0.5) * res))
                if k is not None:
                    touching.add(k)
            if touching != set(d.rooms):
                problems.append(f"door cell {(ix, iz)} touches rooms {sorted(touching)} not {sorted(d.rooms)}")
    for i, obj in enumerate(env.objects):
        if not 0 <= obj.class_id < len(env.object_taxonomy):
            problems.append(f"object {i} class {obj.class_id} invalid")
        x, z = obj.position
        ix, iz = env.cell_of(x, z)
        if occ[iz, ix]:
            problems.append(f"object {i} sits on an obstacle")
        inside = [k for k, room in enumerate(env.rooms) if room.contains(x, z)]
        if len(inside) != 1:
            problems.append(f"object {i} lies in {len(inside)} rooms")
    iz, ix = np.nonzero(free)
    if len(ix):
        reach = flood_fill(free, (int(ix[0]), int(iz[0])))
        if int(reach.sum()) != len(ix):
            problems.append("free space is not connected")
    return problems


# -- serialization -------------------------------------------------------------------

def dumps_environment(env):
    nz, nx = env.occupancy.shape
    bits = np.packbits(env.occupancy.astype(np.uint8).reshape(-1))
    doc = {
        "schema_version": SCHEMA_VERSION,
        "id": env.id,
        "seed": env.seed,
        "grid_resolution": env.grid_resolution,
        "shape": [nz, nx],
        "occupancy": base64.b64encode(bits.tobytes()).decode("ascii"),
        "rooms": [{"label": r.label, "bounds": list(r.bounds), "cells": list(r.cells)} for r in env.rooms],
        "doors": [{"rooms": list(d.rooms), "cells": [list(c) for c in d.cells]} for d in env.doors],
        "objects": [{"class_id": o.class_id, "position": list(o.position), "footprint_radius": o.footprint_radius}
                    for o in env.objects],
        "object_taxonomy": list(env.object_taxonomy),
        "room_taxonomy": list(env.room_taxonomy),
        "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(env.params).items()},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


class SchemaError(ValueError):
    pass


def loads_environment(text):
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"environment schema_version {doc.get('schema_version')!r} != {SCHEMA_VERSION}")
    nz, nx = doc["shape"]
    bits = np.frombuffer(base64.b64decode(doc["occupancy"]), dtype=np.uint8)
    occ = np.unpackbits(bits)[: nz * nx].reshape(nz, nx).astype(bool)
    params = dict(doc["params"])
    params["grid_size"] = tuple(params["grid_size"])
    return EnvironmentSpec(
        id=doc["id"], seed=doc["seed"], grid_resolution=doc["grid_resolution"], occupancy=occ,
        rooms=tuple(Room(label=r["label"], bounds=tuple(r["bounds"]), cells=tuple(r["cells"])) for r in doc["rooms"]),
        objects=tuple(ObjectInstance(class_id=o["class_id"], position=tuple(o["position"]),
                                     footprint_radius=o["footprint_radius"]) for o in doc["objects"]),
        doors=tuple(Door(rooms=tuple(d["rooms"]), cells=tuple(tuple(c) for c in d["cells"])) for d in doc["doors"]),
        object_taxonomy=tuple(doc["object_taxonomy"]), room_taxonomy=tuple(doc["room_taxonomy"]),
        params=WorldParams(**params),
    )


def save_environment(env, path):
    with open(path, "w") as fh:
        fh.write(dumps_environment(env))
        fh.write("\n")


def load_environment(path):
    with open(path) as fh:
        return loads_environment(fh.read())


def open_environment(occupancy, resolution=0.125, objects=(), rooms=None, env_id="custom", n_object_classes=8):
    """Build an environment from an explicit occupancy grid (tests, scripted scenes)."""
    occ = np.asarray(occupancy, dtype=bool)
    nz, nx = occ.shape
    if rooms is None:
        rooms = (Room(label=0, bounds=(0.0, 0.0, nx * resolution, nz * resolution), cells=(0, 0, nx - 1, nz - 1)),)
    taxonomy = tuple((OBJECT_TAXONOMY if n_object_classes <= 8 else OBJECT_TAXONOMY_20)[:n_object_classes])
    params = WorldParams(grid_size=(nx * resolution, nz * resolution), resolution=resolution,
                         n_object_classes=n_object_classes)
    return EnvironmentSpec(
        id=env_id, seed=0, grid_resolution=resolution, occupancy=occ, rooms=tuple(rooms), objects=tuple(objects),
        doors=(), object_taxonomy=taxonomy, room_taxonomy=tuple(ROOM_TAXONOMY), params=params,
    )
