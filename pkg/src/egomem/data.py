"""Dataset assembly, on-disk layout and validation.

A dataset directory holds::

    envs/<env_id>.json      environment files
    walkthroughs.jsonl      header line + one walkthrough per line
    features.bin            float32 frame features (see observation.write_feature_cache)
    labels.jsonl            header line + one (walkthrough_id, step, y) per line

Everything is derived from (config, seeds); worker count only changes the
order in which independent items are computed, never their values.
"""
import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import Walkthrough, generate_walkthrough, replay
from .localstate import load_labels, oracle_local_state, save_labels, walkthrough_labels
from .observation import (
    FeatureLayout, egocentric_features, layout_for, read_feature_cache, walkthrough_features, write_feature_cache,
)
from .worldgen import WorldParams, generate_environment, load_environment, save_environment

WALK_SCHEMA_VERSION = 1
DATA_DIR_ENV = "EGOMEM_DATA_DIR"


class DatasetError(ValueError):
    pass


def data_root():
    return Path(os.environ.get(DATA_DIR_ENV, "egomem-data"))


def parallel_map(fn, items, workers=1):
    """Ordered map; ``workers > 1`` uses a thread pool. Results never depend on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def derive_seed(*parts):
    """Stable 32-bit seed from ints/strings."""
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


@dataclass
class WalkRecord:
    walkthrough_id: str
    env_id: str
    walkthrough: Walkthrough
    feats: np.ndarray  # [T, F] float32-rounded
    labels: np.ndarray  # [T, |O|] uint8
    cache: dict = field(default_factory=dict)

    @property
    def poses(self):
        return self.walkthrough.poses

    @property
    def T(self):
        return len(self.feats)


@dataclass
class Dataset:
    envs: dict
    records: list
    layout: FeatureLayout

    def __len__(self):
        return len(self.records)

    @property
    def n_classes(self):
        return self.layout.n_classes

    def env_of(self, rec):
        return self.envs[rec.env_id]

    def subset(self, env_ids):
        env_ids = set(env_ids)
        return Dataset({k: v for k, v in self.envs.items() if k in env_ids},
                       [r for r in self.records if r.env_id in env_ids], self.layout)


def world_params(cfg):
    w = cfg["world"]
    return WorldParams(n_rooms=w["n_rooms"], grid_size=tuple(w["grid_size"]),
                       objects_per_room=w["objects_per_room"], n_object_classes=w["n_object_classes"])


def env_id_for(seed):
    return f"env-{seed:05d}"


def make_envs(seeds, params, workers=1):
    envs = parallel_map(lambda s: generate_environment(s, params, env_id=env_id_for(s)), seeds, workers)
    return {e.id: e for e in envs}


def walkthrough_id(env_id, index):
    return f"{env_id}-w{index:03d}"


def make_walkthroughs(envs, n_per_env, T, global_seed=0, workers=1):
    jobs = [(env_id, i) for env_id in envs for i in range(n_per_env)]

    def run(job):
        env_id, i = job
        return walkthrough_id(env_id, i), generate_walkthrough(envs[env_id], derive_seed(global_seed, env_id, i), T)

    return parallel_map(run, jobs, workers)


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def label_walkthroughs(envs, walks, layout=None, workers=1):
    def run(item):
        wid, w = item
        env = envs[w.env_id]
        feats, _ = walkthrough_features(env, w.poses, layout or layout_for(env))
        return WalkRecord(wid, w.env_id, w, _f32(feats), walkthrough_labels(env, w.poses))

    return parallel_map(run, walks, workers)


def build_dataset(env_seeds, cfg, workers=1):
    params = world_params(cfg)
    d = cfg["data"]
    envs = make_envs(env_seeds, params, workers)
    walks = make_walkthroughs(envs, d["walkthroughs_per_env"], d["T"], d["walkthrough_seed"], workers)
    layout = FeatureLayout(n_rays=d["n_rays"], n_classes=params.n_object_classes)
    records = label_walkthroughs(envs, walks, layout, workers)
    return Dataset(envs, records, layout)


def split_seeds(cfg):
    d = cfg["data"]
    base = d["env_seed"]
    train = list(range(base, base + d["train_envs"]))
    val = list(range(base + d["train_envs"], base + d["train_envs"] + d["val_envs"]))
    return train, val


def pano_targets(ds, rec):
    """Features at the query position facing 0°, 90°, 180°, 270° from its heading: ``[T, 4, F]``."""
    if "pano" not in rec.cache:
        env = ds.env_of(rec)
        T = rec.T
        out = np.empty((T, 4, ds.layout.size))
        for t in range(T):
            x, z, th = rec.poses[t]
            out[t, 0] = rec.feats[t]
            for k in range(1, 4):
                out[t, k] = egocentric_features(env, (x, z, th + k * np.pi / 2), ds.layout)
        rec.cache["pano"] = _f32(out)
    return rec.cache["pano"]


def visible_classes(layout, feats):
    """Boolean ``[T, |O|]``: class appears in any ray of the frame."""
    blocks = np.asarray(feats).reshape(len(feats), layout.n_rays, layout.block)
    return blocks[:, :, 2:2 + layout.n_classes].max(axis=1) > 0.5


# -- on-disk format ----------------------------------------------------------------


def save_walkthrough_file(path, items):
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema_version": WALK_SCHEMA_VERSION, "kind": "walkthroughs"}) + "\n")
        for wid, w in items:
            fh.write(json.dumps(w.to_record(wid), separators=(",", ":")) + "\n")


def load_walkthrough_file(path):
    out = []
    with open(path) as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:1: unreadable header ({exc})") from None
        if header.get("schema_version") != WALK_SCHEMA_VERSION or header.get("kind") != "walkthroughs":
            raise DatasetError(f"{path}:1: unsupported walkthrough header {header}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                w = Walkthrough.from_record(rec)
                if w.poses.shape != (int(rec["T"]), 3) or len(w.actions) != w.T - 1:
                    raise ValueError("pose/action counts disagree with T")
                out.append((rec["walkthrough_id"], w))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: corrupt walkthrough record ({exc})") from None
    return out


def save_envs(dirpath, envs):
    d = Path(dirpath) / "envs"
    d.mkdir(parents=True, exist_ok=True)
    for env_id, env in envs.items():
        save_environment(env, d / f"{env_id}.json")


def load_envs(dirpath):
    d = Path(dirpath) / "envs"
    return {p.stem: load_environment(p) for p in sorted(d.glob("*.json"))}


def save_dataset(dirpath, ds):
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    save_envs(dirpath, ds.envs)
    save_walkthrough_file(dirpath / "walkthroughs.jsonl", [(r.walkthrough_id, r.walkthrough) for r in ds.records])
    write_feature_cache(dirpath / "features.bin", ds.layout, [r.walkthrough_id for r in ds.records],
                        [r.feats for r in ds.records])
    save_labels(dirpath / "labels.jsonl", [(r.walkthrough_id, r.labels) for r in ds.records])
    return [dirpath / n for n in ("walkthroughs.jsonl", "features.bin", "labels.jsonl")]


def load_dataset(dirpath):
    dirpath = Path(dirpath)
    envs = load_envs(dirpath)
    walks = load_walkthrough_file(dirpath / "walkthroughs.jsonl")
    cache = read_feature_cache(dirpath / "features.bin")
    labels = load_labels(dirpath / "labels.jsonl")
    records = []
    for wid, w in walks:
        if w.env_id not in envs:
            raise DatasetError(f"walkthrough {wid} references missing environment {w.env_id}")
        records.append(WalkRecord(wid, w.env_id, w, cache.get(wid).copy(), labels[wid]))
    return Dataset(envs, records, cache.layout)


def validate_dataset(dirpath, sample_fraction=0.01, seed=0):
    """Schema checks, action replay, row counts and a label-oracle spot check.

    Returns a report dict; raises :class:`DatasetError` (naming file and line)
    on corrupt records.
    """
    dirpath = Path(dirpath)
    if not dirpath.exists():
        raise FileNotFoundError(f"{dirpath}: no such dataset directory")
    envs = load_envs(dirpath)
    walks = load_walkthrough_file(dirpath / "walkthroughs.jsonl")
    report = {"environments": len(envs), "walkthroughs": len(walks), "replay_failures": 0}
    for lineno, (wid, w) in enumerate(walks, start=2):
        env = envs.get(w.env_id)
        if env is None:
            raise DatasetError(f"{dirpath / 'walkthroughs.jsonl'}:{lineno}: unknown environment {w.env_id}")
        poses = replay(env, w.pose(0), w.actions)
        if not np.array_equal(np.array([p.as_triple() for p in poses]), w.poses):
            raise DatasetError(f"{dirpath / 'walkthroughs.jsonl'}:{lineno}: action replay does not reproduce poses")
    feat_path = dirpath / "features.bin"
    if feat_path.exists():
        try:
            cache = read_feature_cache(feat_path)
        except (ValueError, KeyError) as exc:
            raise DatasetError(f"{feat_path}: {exc}") from None
        report["feature_rows"] = int(cache.data.shape[0])
        for wid, w in walks:
            if wid not in cache.index or cache.index[wid][1] != w.T:
                raise DatasetError(f"{feat_path}: missing or short feature block for {wid}")
    label_path = dirpath / "labels.jsonl"
    if label_path.exists():
        labels = _read_labels_checked(label_path)
        report["label_rows"] = sum(len(v) for v in labels.values())
        rng = np.random.default_rng(seed)
        steps = [(wid, w, t) for wid, w in walks for t in range(w.T)]
        n = max(1, int(round(sample_fraction * len(steps))))
        checked = mismatched = 0
        for k in rng.choice(len(steps), size=min(n, len(steps)), replace=False):
            wid, w, t = steps[int(k)]
            if wid not in labels or t >= len(labels[wid]):
                raise DatasetError(f"{label_path}: no label for {wid} step {t}")
            expected = oracle_local_state(envs[w.env_id], w.pose(t))
            checked += 1
            mismatched += not np.array_equal(expected, labels[wid][t])
        report["label_spot_checks"] = checked
        report["label_mismatches"] = mismatched
        if mismatched:
            raise DatasetError(f"{label_path}: {mismatched}/{checked} sampled labels disagree with the oracle")
    report["ok"] = True
    return report


def _read_labels_checked(path):
    out = {}
    with open(path) as fh:
        header = fh.readline()
        try:
            h = json.loads(header)
        except json.JSONDecodeError:
            raise DatasetError(f"{path}:1: unreadable header") from None
        if h.get("kind") != "labels":
            raise DatasetError(f"{path}:1: not a label file")
        for lineno, line in enumerate(fh, start=2):
            try:
                rec = json.loads(line)
                y = [int(v) for v in rec["y"]]
                if any(v < 0 or v > 4 for v in y):
                    raise ValueError("label entry outside 0..4")
                rows = out.setdefault(rec["walkthrough_id"], [])
                if rec["step"] != len(rows):
                    raise ValueError(f"step {rec['step']} out of order")
                rows.append(y)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: corrupt label record ({exc})") from None
    return {k: np.array(v, dtype=np.uint8) for k, v in out.items()}
