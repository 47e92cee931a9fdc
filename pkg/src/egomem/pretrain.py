"""Pretraining objectives for the environment memory and their evaluation.

Objectives:

* ``env_state``  - 5-way cross-entropy on the local state of every class
* ``ssl_masked`` - regress the (masked) query frame feature
* ``pano_feat``  - regress the features seen facing 0/90/180/270 degrees
* ``none``       - no pretraining; downstream starts from random weights

Every random draw (query step, memory offset, pose noise) comes from a
generator seeded by ``(seed, epoch, item)``, so results do not depend on how
batches are assembled or on the worker count.
"""
import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numgrad as ng
from .data import parallel_map, pano_targets, visible_classes
from .envmemory import (
    EnvMemoryModel, ModelConfig, NoiseParams, N_STATES, POSE_MODES, build_memory, decode_query, forward_memory,
    pose_inputs, predict_local_state, sample_memory_frames, softmax_probs, add_pose_noise,
)
from .numgrad.nn import Linear, Module, parameter
from .numgrad.tensor import Tensor

OBJECTIVES = ("env_state", "ssl_masked", "pano_feat", "none")
OBJECTIVE_ALIASES = {"ssl": "ssl_masked", "pano": "pano_feat", "env_state": "env_state", "none": "none",
                     "ssl_masked": "ssl_masked", "pano_feat": "pano_feat", "scratch": "none"}
DIRECTIONS = ("forward", "right", "behind", "left")
RARE_KS = (1, 2, 4, 8)


@dataclass(frozen=True)
class PretrainConfig:
    objective: str = "env_state"
    pose_mode: str = "relative"
    noise: NoiseParams = NoiseParams()
    epochs: int = 40
    lr: float = 1e-3
    weight_decay: float = 2e-5
    batch_size: int = 64
    queries_per_walkthrough: int = 2
    K: int = 16
    seed: int = 0
    mask_query: bool = True
    overfit: bool = False  # fixed query per walkthrough, grid memory, no noise
    max_steps: int = 0  # 0 = no cap
    val_queries: int = 4

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.pose_mode not in POSE_MODES:
            raise ValueError(f"pose mode must be one of {POSE_MODES}, got {self.pose_mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["noise"] = asdict(self.noise)
        return d


def config_from_tree(cfg, **overrides):
    p = cfg["pretrain"]
    n = cfg["noise"]
    kw = dict(objective=OBJECTIVE_ALIASES[p["objective"]], pose_mode=p["pose"],
              noise=NoiseParams(pos=n["pos"], heading=n["heading"], enabled=bool(n["enabled"])),
              epochs=p["epochs"], lr=p["lr"], weight_decay=p["weight_decay"], batch_size=p["batch_size"],
              queries_per_walkthrough=p["queries_per_walkthrough"], K=cfg["memory"]["K"], seed=p["seed"])
    kw.update(overrides)
    kw["objective"] = OBJECTIVE_ALIASES.get(kw["objective"], kw["objective"])
    return PretrainConfig(**kw)


def model_config(cfg, layout):
    m = cfg["model"]
    return ModelConfig(feature_dim=layout.size, n_classes=layout.n_classes, d=m["d"], heads=m["heads"],
                       layers_enc=m["layers_enc"], layers_dec=m["layers_dec"], pose_dim=m["pose_dim"],
                       max_slots=max(64, cfg["memory"]["K"]))


class AuxHeads(Module):
    """Objective-specific parameters that are not part of the downstream model."""

    def __init__(self, objective, feature_dim, d, rng):
        if objective == "ssl_masked":
            self.mask_token = parameter((feature_dim,), rng, fan_in=feature_dim)
            self.ssl_head = Linear(feature_dim + d, feature_dim, rng)
        elif objective == "pano_feat":
            self.pano_head = Linear(d, 4 * feature_dim, rng)


@dataclass
class Batch:
    rec_idx: np.ndarray
    q_steps: np.ndarray
    mem_idx: np.ndarray
    mem_feats: np.ndarray
    mem_pose4: np.ndarray
    q_feats: np.ndarray
    q_pose4: np.ndarray
    labels: np.ndarray


def _item_rng(seed, epoch, item):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(item)]))


def _prepare(ds, cfg, rec_i, item, epoch, train):
    rec = ds.records[rec_i]
    T = rec.T
    rng = _item_rng(cfg.seed + (0 if train else 7919), epoch, item)
    if cfg.overfit:
        q = int(_item_rng(cfg.seed, 0, rec_i).integers(T))
        idx = sample_memory_frames(T, cfg.K, "inference")
        poses = rec.poses
    else:
        q = int(rng.integers(T))
        idx = sample_memory_frames(T, cfg.K, "train" if train else "inference", rng)
        noise = cfg.noise if train else NoiseParams(enabled=False)
        sel = np.concatenate([idx, [q]])
        poses = rec.poses.copy()
        poses[sel] = add_pose_noise(rec.poses[sel], rng, noise)
    mem_p4, q_p4 = pose_inputs(poses[idx], poses[q], cfg.pose_mode)
    return rec_i, q, idx, rec.feats[idx], mem_p4, rec.feats[q], q_p4, rec.labels[q]


def make_batch(ds, cfg, items, epoch, train=True, workers=1):
    """``items`` is a list of ``(record_index, item_id)``."""
    rows = parallel_map(lambda it: _prepare(ds, cfg, it[0], it[1], epoch, train), items, workers)
    cols = list(zip(*rows))
    return Batch(np.array(cols[0]), np.array(cols[1]), np.stack(cols[2]), np.stack(cols[3]), np.stack(cols[4]),
                 np.stack(cols[5]), np.stack(cols[6]), np.stack(cols[7]).astype(np.int64))


def _masked_memory(aux, batch):
    """Replace the query frame (and any memory slot showing the same step) by the mask token."""
    b, k, f = batch.mem_feats.shape
    m = (batch.mem_idx == batch.q_steps[:, None]).astype(np.float64)[:, :, None]
    keep = Tensor(batch.mem_feats * (1.0 - m))
    token = ng.expand(ng.reshape(aux.mask_token, (1, 1, f)), (b, k, f))
    mem = ng.add(keep, ng.mul(token, Tensor(np.broadcast_to(m, (b, k, f)).copy())))
    q = ng.expand(ng.reshape(aux.mask_token, (1, f)), (b, f))
    return mem, q


def objective_loss(model, aux, batch, cfg, ds=None):
    """Scalar loss tensor for one batch under ``cfg.objective``."""
    if cfg.objective == "env_state":
        r = forward_memory(model, batch.mem_feats, batch.mem_pose4, batch.q_feats, batch.q_pose4)
        logits = predict_local_state(model, r.h, batch.q_feats)
        b, o, _ = logits.shape
        return ng.cross_entropy(ng.reshape(logits, (b * o, N_STATES)), batch.labels.reshape(-1))
    if cfg.objective == "ssl_masked":
        if cfg.mask_query:
            mem, q = _masked_memory(aux, batch)
        else:
            mem, q = batch.mem_feats, Tensor(batch.q_feats)
        r = forward_memory(model, mem, batch.mem_pose4, q, batch.q_pose4)
        pred = aux.ssl_head(ng.concat([q, r.h], axis=-1))
        return ng.mse(pred, Tensor(batch.q_feats))
    if cfg.objective == "pano_feat":
        r = forward_memory(model, batch.mem_feats, batch.mem_pose4, batch.q_feats, batch.q_pose4)
        b = r.h.shape[0]
        pred = ng.reshape(aux.pano_head(r.h), (b, 4, model.config.feature_dim))
        targets = np.stack([pano_targets(ds, ds.records[i])[t] for i, t in zip(batch.rec_idx, batch.q_steps)])
        return ng.mse(pred, Tensor(targets))
    raise ValueError(f"objective {cfg.objective!r} has no loss")


def _epoch_items(ds, cfg, epoch):
    n = len(ds.records)
    reps = 1 if cfg.overfit else cfg.queries_per_walkthrough
    items = [(i, i * reps + r) for i in range(n) for r in range(reps)]
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x5EED])).permutation(len(items))
    return [items[j] for j in order] if not cfg.overfit else items


def _val_items(ds, cfg):
    return [(i, i * cfg.val_queries + r) for i in range(len(ds.records)) for r in range(cfg.val_queries)]


def evaluate_loss(model, aux, ds, cfg, workers=1):
    items = _val_items(ds, cfg)
    total = 0.0
    n = 0
    for s in range(0, len(items), 256):
        chunk = items[s:s + 256]
        batch = make_batch(ds, cfg, chunk, epoch=0, train=False, workers=workers)
        total += objective_loss(model, aux, batch, cfg, ds).item() * len(chunk)
        n += len(chunk)
    return total / n


@dataclass
class PretrainResult:
    model: EnvMemoryModel
    aux: AuxHeads
    curve: list = field(default_factory=list)  # dicts: epoch, step, train_loss, val_loss
    best_epoch: int = -1
    step_losses: list = field(default_factory=list)


def pretrain(train_ds, cfg, model=None, model_cfg=None, val_ds=None, workers=1, log=None):
    """Train ``model`` on ``train_ds``; keeps the weights with the lowest validation loss."""
    if not len(train_ds):
        raise ValueError("pretraining dataset is empty")
    if model is None:
        model = EnvMemoryModel(model_cfg or ModelConfig(train_ds.layout.size, train_ds.n_classes),
                               np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x30DE1])))
    aux = AuxHeads(cfg.objective, model.config.feature_dim, model.d,
                   np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA0C5])))
    result = PretrainResult(model, aux)
    if cfg.objective == "none":
        return result
    params = dict(model.named_parameters())
    params.update({f"aux.{k}": v for k, v in aux.named_parameters().items()})
    opt = ng.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    best = (float("inf"), None, None)
    step = 0
    for epoch in range(cfg.epochs):
        items = _epoch_items(train_ds, cfg, epoch)
        losses = []
        for s in range(0, len(items), cfg.batch_size):
            batch = make_batch(train_ds, cfg, items[s:s + cfg.batch_size], epoch, True, workers)
            opt.zero_grad()
            with ng.Tape() as tape:
                loss = objective_loss(model, aux, batch, cfg, train_ds)
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
            result.step_losses.append(loss.item())
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
        row = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses))}
        if val_ds is not None and len(val_ds):
            row["val_loss"] = evaluate_loss(model, aux, val_ds, cfg, workers)
            if row["val_loss"] < best[0]:
                best = (row["val_loss"], model.state_dict(), epoch)
        result.curve.append(row)
        if log is not None:
            log(row)
        if cfg.max_steps and step >= cfg.max_steps:
            break
    if best[1] is not None:
        model.load_state_dict(best[1])
        result.best_epoch = best[2]
    return result


def write_curve_csv(path, curve):
    keys = ["epoch", "step", "train_loss", "val_loss"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for row in curve:
            w.writerow({k: (repr(row[k]) if isinstance(row.get(k), float) else row.get(k, "")) for k in keys})


# -- evaluation ------------------------------------------------------------------


def average_precision(scores, positives):
    """Uninterpolated AP: mean precision over positives.

    Items with equal scores form one block; the precision of every positive
    in a block is taken at the end of the block, so the result does not depend
    on input order. Returns ``None`` when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = pos[order]
    cum_pos = np.cumsum(p)
    # index of the last element of each tie block
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    block_end = np.repeat(last, np.diff(np.r_[-1, last]))
    prec = cum_pos[block_end] / (block_end + 1.0)
    return float(prec[p].sum() / n_pos)


def eval_queries(ds, per_walkthrough=8):
    """Fixed evaluation query steps: evenly spaced through each walkthrough."""
    out = []
    for i, rec in enumerate(ds.records):
        steps = np.unique(np.floor((np.arange(per_walkthrough) + 0.5) * rec.T / per_walkthrough).astype(int))
        out += [(i, int(t)) for t in steps]
    return out


def predict_probs(model, ds, queries, K, pose_mode="relative", chunk=256):
    """Direction probabilities ``[N, |O|, 5]`` for (record, step) queries, inference sampling."""
    probs = []
    for s in range(0, len(queries), chunk):
        part = queries[s:s + chunk]
        mf, mp, qf, qp = [], [], [], []
        for i, t in part:
            rec = ds.records[i]
            idx = sample_memory_frames(rec.T, K, "inference")
            a, b = pose_inputs(rec.poses[idx], rec.poses[t], pose_mode)
            mf.append(rec.feats[idx]); mp.append(a); qf.append(rec.feats[t]); qp.append(b)
        r = forward_memory(model, np.stack(mf), np.stack(mp), np.stack(qf), np.stack(qp))
        logits = predict_local_state(model, r.h, np.stack(qf)).data
        probs.append(softmax_probs(logits))
    return np.concatenate(probs) if probs else np.zeros((0, ds.n_classes, N_STATES))


def eval_ap(model, ds, K, pose_mode="relative", per_walkthrough=8, probs=None):
    queries = eval_queries(ds, per_walkthrough)
    if probs is None:
        probs = predict_probs(model, ds, queries, K, pose_mode)
    labels = np.stack([ds.records[i].labels[t] for i, t in queries]).astype(int)
    return ap_report(probs, labels)


def ap_report(probs, labels):
    report = {"ap": {}, "n_positives": {}}
    aps = []
    for d, name in enumerate(DIRECTIONS, start=1):
        ap = average_precision(probs[:, :, d].ravel(), (labels == d).ravel())
        report["ap"][name] = ap
        report["n_positives"][name] = int((labels == d).sum())
        if ap is not None:
            aps.append(ap)
    report["mAP"] = float(np.mean(aps)) if aps else None
    report["absent_directions"] = [n for n in DIRECTIONS if report["ap"][n] is None]
    return report


def rare_object_stats(ds, K, per_walkthrough=8, ks=RARE_KS):
    """Fraction of labelled (query, class) instances whose class appears in < k memory frames."""
    counts = []
    for i, t in eval_queries(ds, per_walkthrough):
        rec = ds.records[i]
        vis = rec.cache.get("visible")
        if vis is None:
            vis = rec.cache["visible"] = visible_classes(ds.layout, rec.feats)
        idx = sample_memory_frames(rec.T, K, "inference")
        for c in np.flatnonzero(rec.labels[t]):
            counts.append(int(vis[idx, c].sum()))
    counts = np.array(counts)
    n = len(counts)
    return {"n_instances": n, "fraction_below": {str(k): (float((counts < k).mean()) if n else None) for k in ks}}


def eval_report(model, ds, K, pose_mode="relative", per_walkthrough=8):
    rep = eval_ap(model, ds, K, pose_mode, per_walkthrough)
    rep["rare_objects"] = rare_object_stats(ds, K, per_walkthrough)
    return rep


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
