"""Episodic memory queries: templated moment queries with ground truth taken
from simulator state, a window-scoring localizer, and Rank-1 evaluation.

Slots live in one index space: object classes ``0 .. |O|-1`` followed by
room labels ``|O| .. |O|+|R|-1``. Moments are inclusive step intervals.
"""
from collections import Counter
import copy
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numgrad as ng
from .data import parallel_map
from .envmemory import EnvMemoryModel, ModelConfig, environment_features_multi
from .numgrad.nn import Linear, Module
from .numgrad.tensor import Tensor
from .observation import SEEN_THRESHOLD, VISIT_DISTANCE, walkthrough_features
from .room import fuse
from .worldgen import ROOM_TAXONOMY

log = logging.getLogger(__name__)

QUERY_SCHEMA_VERSION = 1
TEMPLATES = ("see_o", "see_o_in_r", "see_o_then_o", "visit_r_then_r", "visit_or", "visit_o_then_o", "visit_o_in_r")
QUALIFIERS = ("first", "last", "none")
# slot kinds per template: "o" object class, "r" room label, "or" either, None unused
SLOT_KINDS = {
    "see_o": ("o", None), "see_o_in_r": ("o", "r"), "see_o_then_o": ("o", "o"), "visit_r_then_r": ("r", "r"),
    "visit_or": ("or", None), "visit_o_then_o": ("o", "o"), "visit_o_in_r": ("o", "r"),
}
IOU_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)


@dataclass(frozen=True)
class MomentQuery:
    walkthrough_id: str
    template: str
    slot1: int
    slot2: object  # int or None
    qualifier: str
    t_s: int
    t_e: int

    @property
    def group(self):
        return self.template.split("_", 1)[0]

    def to_record(self):
        return asdict(self)


@dataclass(frozen=True)
class EPMConfig:
    clips: int = 32
    clip_len: int = 4
    d_q: int = 32
    hidden: int = 128
    fused_dim: int = 64
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    then_gap: int = 16
    freeze: bool = False
    K: int = 16
    pose_mode: str = "relative"
    seed: int = 0
    walkthroughs_per_env: int = 0

    @property
    def max_span(self):
        """Windows cover fewer than ``max_span`` clips (``j - i < max_span``)."""
        return max(1, self.clips // 2)

    def to_dict(self):
        return asdict(self)


def config_from_tree(cfg, **overrides):
    e = cfg["epm"]
    kw = dict(clips=e["clips"], clip_len=e["clip_len"], d_q=e["d_q"], hidden=e["hidden"], fused_dim=e["fused_dim"],
              lr=e["lr"], epochs=e["epochs"], batch_size=e["batch_size"], then_gap=e["then_gap"],
              freeze=bool(e["freeze"]), K=cfg["memory"]["K"], pose_mode=cfg["pretrain"]["pose"], seed=e["seed"],
              walkthroughs_per_env=e["walkthroughs_per_env"])
    kw.update(overrides)
    return EPMConfig(**kw)


# -- predicates and intervals -----------------------------------------------------------


def runs(mask):
    """Maximal runs of ``True`` as inclusive ``(start, end)`` pairs."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(np.int8))
    return list(zip(np.flatnonzero(d == 1).tolist(), (np.flatnonzero(d == -1) - 1).tolist()))


@dataclass
class StepPredicates:
    """Per-step truth tables for one walkthrough.

    ``seen``/``visit`` are ``[T, |O|, |R| + 1]``: the last room column means
    "any room"; ``in_room`` is ``[T, |R|]``.
    """
    seen: np.ndarray
    visit: np.ndarray
    in_room: np.ndarray


def object_room_labels(env):
    out = []
    for i in range(len(env.objects)):
        k = env.object_room(i)
        out.append(-1 if k is None else env.rooms[k].label)
    return np.array(out, dtype=np.int64)


def step_predicates(env, poses, layout=None):
    poses = np.asarray(poses, dtype=np.float64)
    T = len(poses)
    n_o, n_r = len(env.object_taxonomy), len(env.room_taxonomy)
    _, hits = walkthrough_features(env, poses, layout)
    n_rays = hits.shape[1]
    ox, oz, _, oc = env.object_arrays()
    orooms = object_room_labels(env)
    seen = np.zeros((T, n_o, n_r + 1), dtype=bool)
    visit = np.zeros((T, n_o, n_r + 1), dtype=bool)
    for i in range(len(env.objects)):
        s = (hits == i).sum(axis=1) / n_rays >= SEEN_THRESHOLD
        v = np.hypot(poses[:, 0] - ox[i], poses[:, 1] - oz[i]) < VISIT_DISTANCE
        cols = [n_r] + ([orooms[i]] if orooms[i] >= 0 else [])
        for c in cols:
            seen[:, oc[i], c] |= s
            visit[:, oc[i], c] |= v
    in_room = np.zeros((T, n_r), dtype=bool)
    for room in env.rooms:
        x0, z0, x1, z1 = room.bounds
        in_room[:, room.label] |= (poses[:, 0] >= x0) & (poses[:, 0] < x1) & (poses[:, 1] >= z0) & (poses[:, 1] < z1)
    return StepPredicates(seen, visit, in_room)


def _single(intervals):
    if len(intervals) == 1:
        return [("none", intervals[0])]
    if len(intervals) > 1:
        return [("first", intervals[0]), ("last", intervals[-1])]
    return []


def sequence_moments(first, second, gap):
    """Moments ``(end of a first-run, end of the nearest later-ending second-run)`` with gap <= ``gap``."""
    ends2 = sorted(e for _, e in second)
    out = []
    for _, e1 in first:
        later = [e2 for e2 in ends2 if e2 > e1]
        if later and later[0] - e1 <= gap:
            out.append((e1, later[0]))
    return sorted(set(out))


def generate_queries(walkthrough_id, env, poses, layout=None, then_gap=16, max_span=None, preds=None):
    """All template instances for one walkthrough.

    Returns ``(queries, n_dropped)``; moments longer than ``max_span`` steps
    are dropped (counted, not returned).
    """
    p = preds if preds is not None else step_predicates(env, poses, layout)
    n_o, n_r = p.seen.shape[1], p.in_room.shape[1]
    found = []

    def emit(template, s1, s2, items):
        for qual, (a, b) in items:
            found.append(MomentQuery(walkthrough_id, template, int(s1), None if s2 is None else int(s2), qual,
                                     int(a), int(b)))

    for c in range(n_o):
        emit("see_o", c, None, _single(runs(p.seen[:, c, n_r])))
        emit("visit_or", c, None, _single(runs(p.visit[:, c, n_r])))
        for r in range(n_r):
            emit("see_o_in_r", c, n_o + r, _single(runs(p.seen[:, c, r])))
            emit("visit_o_in_r", c, n_o + r, _single(runs(p.visit[:, c, r])))
    for r in range(n_r):
        emit("visit_or", n_o + r, None, _single(runs(p.in_room[:, r])))
    for name, table, n in (("see_o_then_o", p.seen[:, :, n_r], n_o), ("visit_o_then_o", p.visit[:, :, n_r], n_o),
                           ("visit_r_then_r", p.in_room, n_r)):
        off = n_o if name == "visit_r_then_r" else 0
        rs = [runs(table[:, k]) for k in range(n)]
        for a in range(n):
            for b in range(n):
                if a != b and rs[a] and rs[b]:
                    emit(name, off + a, off + b, _single(sequence_moments(rs[a], rs[b], then_gap)))
    if max_span is None:
        return found, 0
    kept = [q for q in found if q.t_e - q.t_s + 1 <= max_span]
    return kept, len(found) - len(kept)


def generate_dataset_queries(ds, cfg, workers=1):
    """Queries for the walkthroughs of ``ds``; logs the dropped count.

    With ``cfg.walkthroughs_per_env > 0`` only the first that many
    walkthroughs of each environment (in dataset order) are used.
    """
    span = cfg.max_span * cfg.clip_len
    records = ds.records
    if cfg.walkthroughs_per_env > 0:
        counts = Counter()
        records = []
        for r in ds.records:
            counts[r.env_id] += 1
            if counts[r.env_id] <= cfg.walkthroughs_per_env:
                records.append(r)

    def run(rec):
        return generate_queries(rec.walkthrough_id, ds.env_of(rec), rec.poses, ds.layout, cfg.then_gap, span)

    out, dropped = [], 0
    for qs, n in parallel_map(run, records, workers):
        out += qs
        dropped += n
    if dropped:
        log.info("dropped %d queries with moments longer than %d steps", dropped, span)
    return out, dropped


def save_queries(path, queries):
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema_version": QUERY_SCHEMA_VERSION, "kind": "queries"}) + "\n")
        for q in queries:
            fh.write(json.dumps(q.to_record(), sort_keys=True) + "\n")


def load_queries(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != QUERY_SCHEMA_VERSION or header.get("kind") != "queries":
            raise ValueError(f"{path}: not a version {QUERY_SCHEMA_VERSION} query file")
        out = []
        for lineno, line in enumerate(fh, start=2):
            try:
                out.append(MomentQuery(**json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: corrupt query record ({exc})") from None
    return out


# -- query embedding -----------------------------------------------------------------


def slot_space(n_objects, n_rooms=len(ROOM_TAXONOMY)):
    return n_objects + n_rooms


def query_encoding_size(n_objects, n_rooms=len(ROOM_TAXONOMY)):
    return len(TEMPLATES) + 2 * slot_space(n_objects, n_rooms) + len(QUALIFIERS)


def _check_slot(kind, slot, n_objects, n_rooms):
    if kind is None:
        if slot is not None:
            raise ValueError(f"unexpected second slot {slot!r}")
        return
    if slot is None or not 0 <= slot < n_objects + n_rooms:
        raise ValueError(f"slot {slot!r} outside [0, {n_objects + n_rooms})")
    is_obj = slot < n_objects
    if (kind == "o" and not is_obj) or (kind == "r" and is_obj):
        raise ValueError(f"slot {slot} is not a{'n object' if kind == 'o' else ' room'}")


def encode_query(q, n_objects, n_rooms=len(ROOM_TAXONOMY)):
    """Raw one-hot encoding ``template ⊕ slot1 ⊕ slot2 ⊕ qualifier``."""
    if q.template not in TEMPLATES:
        raise ValueError(f"unknown template {q.template!r}")
    if q.qualifier not in QUALIFIERS:
        raise ValueError(f"unknown qualifier {q.qualifier!r}")
    k1, k2 = SLOT_KINDS[q.template]
    _check_slot(k1, q.slot1, n_objects, n_rooms)
    _check_slot(k2, q.slot2, n_objects, n_rooms)
    S = slot_space(n_objects, n_rooms)
    v = np.zeros(query_encoding_size(n_objects, n_rooms))
    v[TEMPLATES.index(q.template)] = 1.0
    v[len(TEMPLATES) + q.slot1] = 1.0
    if q.slot2 is not None:
        v[len(TEMPLATES) + S + q.slot2] = 1.0
    v[len(TEMPLATES) + 2 * S + QUALIFIERS.index(q.qualifier)] = 1.0
    return v


# -- localizer ---------------------------------------------------------------------


def candidate_windows(n_clips, max_span):
    """All ``(i, j)`` with ``0 <= i <= j < n_clips`` and ``j - i < max_span``, ordered by start then end."""
    pairs = [(i, j) for i in range(n_clips) for j in range(i, min(n_clips, i + max_span))]
    a = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return a[:, 0], a[:, 1]


def clip_features(feats, clips, clip_len):
    """Mean frame feature per clip ``[clips, F]`` and center steps ``clip_len*i + clip_len//2``."""
    feats = np.asarray(feats, dtype=np.float64)
    if len(feats) != clips * clip_len:
        raise ValueError(f"walkthrough of {len(feats)} steps does not split into {clips} clips of {clip_len}")
    g = feats.reshape(clips, clip_len, -1).mean(axis=1)
    return g, np.arange(clips) * clip_len + clip_len // 2


def iou(a, b):
    """Intersection over union of inclusive integer intervals, in step counts."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    return inter / ((a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter)


def iou_many(starts, ends, gt):
    """Vectorized :func:`iou` of many windows against one interval."""
    starts = np.asarray(starts)
    ends = np.asarray(ends)
    inter = np.maximum(np.minimum(ends, gt[1]) - np.maximum(starts, gt[0]) + 1, 0)
    union = (ends - starts + 1) + (gt[1] - gt[0] + 1) - inter
    return inter / union


def iou_target(x, lo=0.3, hi=0.7):
    """Training target ``clamp((IoU - lo) / (hi - lo), 0, 1)``; works on scalars and arrays."""
    out = np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


class Localizer(Module):
    def __init__(self, feature_dim, env_dim, query_dim, cfg, rng):
        self.env_dim = env_dim
        if env_dim:
            self.fuse = Linear(feature_dim + env_dim, cfg.fused_dim, rng)
            g = cfg.fused_dim
        else:
            g = feature_dim
        self.query_proj = Linear(query_dim, cfg.d_q, rng)
        self.fc1 = Linear(g + cfg.d_q, cfg.hidden, rng)
        self.fc2 = Linear(cfg.hidden, 1, rng)

    def video(self, g, h=None):
        """Fused clip features ``g'`` (identity on ``g`` without an environment path)."""
        g = g if isinstance(g, Tensor) else Tensor(g)
        return fuse(self.fuse, g, h) if self.env_dim else g

    def logits(self, pooled, rows, q_raw, q_rows):
        """Window logits for ``pooled[rows]`` paired with ``embed(q_raw)[q_rows]``.

        ``fc1`` on the concatenation is split into its window and query blocks
        so each pooled window is multiplied once, however many queries share it.
        """
        q = self.query_proj(Tensor(q_raw))
        g = pooled.shape[-1]
        w = self.fc1.weight
        win = ng.linear(pooled, ng.take(w, np.arange(g), axis=0))
        qry = ng.linear(q, ng.take(w, np.arange(g, w.shape[0]), axis=0), self.fc1.bias)
        x = ng.add(ng.take(win, rows), ng.take(qry, q_rows))
        return ng.reshape(self.fc2(ng.relu(x)), (len(rows),))


@dataclass
class LocalizerResult:
    model: Localizer
    env_model: object = None
    step_losses: list = field(default_factory=list)


class _Videos:
    """Per-walkthrough clip features and (frozen) environment features."""

    def __init__(self, ds, cfg, env_model):
        self.ds, self.cfg, self.env = ds, cfg, env_model
        self.by_id = {r.walkthrough_id: i for i, r in enumerate(ds.records)}
        self.g, self.centers, self.h = {}, {}, {}

    def clip(self, wid):
        if wid not in self.g:
            self.g[wid], self.centers[wid] = clip_features(self.ds.records[self.by_id[wid]].feats, self.cfg.clips,
                                                           self.cfg.clip_len)
        return self.g[wid]

    def env_items(self, wid):
        self.clip(wid)
        rec = self.ds.records[self.by_id[wid]]
        return [(rec.feats, rec.poses, int(t)) for t in self.centers[wid]]

    def env_feats(self, wids, grad):
        """``[len(wids) * clips, d]`` environment features, differentiable when ``grad``."""
        items = [it for w in wids for it in self.env_items(w)]
        if grad:
            return environment_features_multi(self.env, items, self.cfg.K, self.cfg.pose_mode)
        missing = [w for w in wids if w not in self.h]
        if missing:
            feats = environment_features_multi(self.env, [it for w in missing for it in self.env_items(w)],
                                               self.cfg.K, self.cfg.pose_mode).data
            for k, w in enumerate(missing):
                self.h[w] = feats[k * self.cfg.clips:(k + 1) * self.cfg.clips]
        return Tensor(np.concatenate([self.h[w] for w in wids]))


def _window_steps(cfg, starts, ends):
    return starts * cfg.clip_len, ends * cfg.clip_len + cfg.clip_len - 1


def _forward(model, videos, cfg, queries, grad_env):
    """Logits ``[B * W]`` for ``queries`` (plus the window arrays)."""
    wids = sorted({q.walkthrough_id for q in queries})
    slot = {w: k for k, w in enumerate(wids)}
    g = Tensor(np.concatenate([videos.clip(w) for w in wids]))
    h = videos.env_feats(wids, grad_env) if model.env_dim else None
    gp = model.video(g, h)  # [U * clips, G]
    starts, ends = candidate_windows(cfg.clips, cfg.max_span)
    W = len(starts)
    offs = np.arange(len(wids))[:, None] * cfg.clips
    pooled = ng.window_max(gp, (offs + starts).ravel(), (offs + ends).ravel())  # [U * W, G]
    rows = np.concatenate([slot[q.walkthrough_id] * W + np.arange(W) for q in queries])
    n_o = videos.ds.n_classes
    q_raw = np.stack([encode_query(q, n_o) for q in queries])
    q_rows = np.repeat(np.arange(len(queries)), W)
    return model.logits(pooled, rows, q_raw, q_rows), starts, ends


def _batches(queries, cfg, epoch):
    """Shuffle walkthroughs, keep each walkthrough's queries together, then chunk."""
    by_w = {}
    for q in queries:
        by_w.setdefault(q.walkthrough_id, []).append(q)
    wids = sorted(by_w)
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0xE9])).permutation(len(wids))
    flat = [q for k in order for q in by_w[wids[k]]]
    return [flat[s:s + cfg.batch_size] for s in range(0, len(flat), cfg.batch_size)]


def train_localizer(ds, queries, cfg, env_model=None):
    """Train the window scorer; ``env_model=None`` gives the frame-only localizer."""
    if not queries:
        raise ValueError("episodic memory training set is empty")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE90]))
    env = copy.deepcopy(env_model) if env_model is not None else None
    model = Localizer(ds.layout.size, env.d if env is not None else 0, query_encoding_size(ds.n_classes), cfg, rng)
    params = {f"loc.{k}": v for k, v in model.named_parameters().items()}
    grad_env = env is not None and not cfg.freeze
    if grad_env:
        params.update({f"env.{k}": v for k, v in env.named_parameters().items()})
    opt = ng.Adam(params, lr=cfg.lr)
    videos = _Videos(ds, cfg, env)
    result = LocalizerResult(model, env)
    starts, ends = candidate_windows(cfg.clips, cfg.max_span)
    ws, we = _window_steps(cfg, starts, ends)
    targets = {}
    for epoch in range(cfg.epochs):
        for batch in _batches(queries, cfg, epoch):
            y = []
            for q in batch:
                key = (q.t_s, q.t_e)
                if key not in targets:
                    targets[key] = iou_target(iou_many(ws, we, key))
                y.append(targets[key])
            opt.zero_grad()
            with ng.Tape() as tape:
                logits, _, _ = _forward(model, videos, cfg, batch, grad_env)
                loss = ng.bce_with_logits(logits, Tensor(np.concatenate(y)))
            tape.backward(loss)
            opt.step()
            if grad_env:
                videos.h.clear()
            result.step_losses.append(loss.item())
    return result


def rank_windows(scores, starts, ends):
    """Window order by score descending, ties by earlier start then earlier end."""
    return np.lexsort((ends, starts, -np.asarray(scores)))


def localize(result, ds, queries, cfg, chunk=64):
    """Per query: ranked windows as ``[(t_s, t_e, score), ...]`` in steps."""
    videos = _Videos(ds, cfg, result.env_model)
    out = []
    for s in range(0, len(queries), chunk):
        part = queries[s:s + chunk]
        logits, starts, ends = _forward(result.model, videos, cfg, part, False)
        W = len(starts)
        scores = 1.0 / (1.0 + np.exp(-logits.data.reshape(len(part), W)))
        ws, we = _window_steps(cfg, starts, ends)
        for row in scores:
            order = rank_windows(row, starts, ends)
            out.append([(int(ws[k]), int(we[k]), float(row[k])) for k in order])
    return out


def rank_at(predictions, gt, n, m):
    """True iff one of the top ``n`` predicted windows has IoU > ``m`` with ``gt``."""
    return any(iou((p[0], p[1]), gt) > m for p in predictions[:n])


def recall_table(ranked, queries, thresholds=IOU_THRESHOLDS, n=1):
    """R``n``@m overall, per see/visit group and per template."""

    def block(idx):
        if not idx:
            return None
        return {f"R{n}@{m}": float(np.mean([rank_at(ranked[i], (queries[i].t_s, queries[i].t_e), n, m)
                                             for i in idx])) for m in thresholds}

    everything = list(range(len(queries)))
    rep = {"all": block(everything), "n": len(queries), "groups": {}, "templates": {}}
    for g in ("see", "visit"):
        rep["groups"][g] = block([i for i in everything if queries[i].group == g])
    for t in TEMPLATES:
        rep["templates"][t] = block([i for i in everything if queries[i].template == t])
    return rep


def eval_localizer(result, ds, queries, cfg, thresholds=IOU_THRESHOLDS):
    return recall_table(localize(result, ds, queries, cfg), queries, thresholds)


def save_localizer(path, result, cfg, feature_dim, n_classes):
    state = {f"loc.{k}": v for k, v in result.model.state_dict().items()}
    hp = {"kind": "epm", "epm": cfg.to_dict(), "feature_dim": int(feature_dim), "env_dim": result.model.env_dim,
          "n_classes": int(n_classes), "model": None}
    if result.env_model is not None:
        state.update({f"env.{k}": v for k, v in result.env_model.state_dict().items()})
        hp["model"] = result.env_model.config.to_dict()
    ng.save_checkpoint(path, state, hp)


def load_localizer(path):
    state, hp = ng.load_checkpoint(path)
    if not hp or hp.get("kind") != "epm":
        raise ng.checkpoint.CheckpointError(f"{path}: not an episodic-memory checkpoint")
    cfg = EPMConfig(**hp["epm"])
    model = Localizer(hp["feature_dim"], hp["env_dim"], query_encoding_size(hp["n_classes"]), cfg,
                      np.random.default_rng(0))
    model.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("loc.")})
    env = None
    if hp["model"] is not None:
        env = EnvMemoryModel(ModelConfig(**hp["model"]), np.random.default_rng(0))
        env.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("env.")})
    return LocalizerResult(model, env), cfg
