"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test records one ``criterion N: PASS|FAIL ...`` line, printed together
at the end of the session. Criteria 4 to 7 share pretrained models through
the session-scoped ``lab`` fixture, so the expensive pretraining runs once per
(objective, pose, seed). Setting ``EGOMEM_ACCEPTANCE_CACHE`` to a directory
keeps checkpoints and their training times across sessions; the recorded
times still come from the run that produced each checkpoint.

Run only these with ``pytest tests/test_acceptance.py -v``; the full set
takes roughly two hours on one CPU core.
"""
import hashlib
import os
import time
from pathlib import Path

import numpy as np
import pytest

from egomem import config, numgrad as ng
from egomem import epm, pretrain as pt, room
from egomem.agent import pose_at_cell
from egomem.cli import EX_OK, run as cli_run
from egomem.data import build_dataset, make_envs, make_walkthroughs, split_seeds, world_params
from egomem.envmemory import (
    build_memory, decode_query, forward_memory, gather_queries, load_model, predict_local_state, save_model,
)
from egomem.localstate import local_state_label, oracle_local_state
from egomem.numgrad.gradcheck import max_relative_error
from egomem.numgrad.tensor import Tensor
from egomem.observation import FeatureLayout
from egomem.viz import render_attention
from egomem.worldgen import traversable_mask

import oracles
import test_envmemory
import test_gradcheck

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
VARIANTS = ("none", "ssl", "pano", "env_state")


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Lab:
    """Desk-scale datasets plus memoized pretraining and downstream runs."""

    def __init__(self, cache_dir):
        self.cfg = config.resolve("desk")
        train_seeds, val_seeds = split_seeds(self.cfg)
        t = time.process_time()
        self.train = build_dataset(train_seeds, self.cfg)
        self.val = build_dataset(val_seeds, self.cfg)
        self.build_seconds = time.process_time() - t
        self.cache = Path(cache_dir) if cache_dir else None
        if self.cache:
            self.cache.mkdir(parents=True, exist_ok=True)
        self.models = {}
        self.seconds = {}
        self.rooms = {}
        self.room_split = {}
        self.room_instances = None

    # -- pretraining ----------------------------------------------------------------

    def pretrained(self, objective, pose, seed):
        key = (objective, pose, seed)
        if key in self.models:
            return self.models[key]
        ckpt = self.cache / f"{objective}_{pose}_{seed}.ckpt" if self.cache else None
        if ckpt is not None and ckpt.exists():
            model, _, hp = load_model(ckpt)
            self.seconds[key] = hp["seconds"]
        else:
            pc = pt.config_from_tree(self.cfg, objective=objective, pose_mode=pose, seed=seed)
            t = time.process_time()
            res = pt.pretrain(self.train, pc, model_cfg=pt.model_config(self.cfg, self.train.layout), val_ds=self.val)
            model = res.model
            self.seconds[key] = time.process_time() - t
            if ckpt is not None:
                save_model(ckpt, model, {"seconds": self.seconds[key]})
        self.models[key] = model
        return model

    # -- room prediction ------------------------------------------------------------

    def _instances(self):
        if self.room_instances is None:
            rc = room.config_from_tree(self.cfg)
            ev = room.make_instances(self.val, 8, N=rc.window, evaluation=True)
            self.room_instances = ev, np.array([x.label for x in ev])
        return self.room_instances

    def room_report(self, variant, seed):
        """Room EvalReport for ``variant`` ('baseline' or a pretraining objective), split by the same-seed baseline."""
        key = (variant, seed)
        if key in self.rooms:
            return self.rooms[key]
        rc = room.config_from_tree(self.cfg, seed=seed)
        train_inst = room.make_instances(self.train, rc.queries_per_walkthrough, seed=seed, N=rc.window)
        ev, labels = self._instances()
        t = time.process_time()
        if variant == "baseline":
            res = room.train_room(self.train, train_inst, rc)
            probs = room.predict_room(res, self.val, ev, rc)
            self.room_split[seed] = room.entropy_split(probs, rc.hard_fraction)
        else:
            self.room_report("baseline", seed)
            env_model = self.pretrained(variant, "relative", seed)
            res = room.train_room(self.train, train_inst, rc, env_model)
            probs = room.predict_room(res, self.val, ev, rc)
        easy, hard = self.room_split[seed]
        rep = room.eval_room(probs.argmax(axis=1), labels, easy, hard)
        rep["seconds"] = time.process_time() - t
        self.rooms[key] = rep
        return rep


@pytest.fixture(scope="session")
def lab():
    return Lab(os.environ.get("EGOMEM_ACCEPTANCE_CACHE"))


@pytest.fixture
def criterion(record_criterion):
    """``criterion(n, ok, detail)`` records the result line and fails the test when ``ok`` is false."""

    def check(n, ok, detail):
        record_criterion(n, ok, detail)
        assert ok, f"criterion {n}: {detail}"

    return check


# -- 1: label oracle --------------------------------------------------------------------


def test_c1_label_oracle_equivalence(criterion):
    t = time.process_time()
    cfg = config.resolve("desk")
    envs = list(make_envs(range(1000, 1020), world_params(cfg)).values())
    rng = np.random.default_rng(0)
    mismatches = 0
    for k in range(1000):
        env = envs[k % len(envs)]
        iz, ix = np.nonzero(traversable_mask(env))
        j = rng.integers(len(ix))
        pose = pose_at_cell(env, ix[j], iz[j], rng.integers(12))
        mismatches += not np.array_equal(local_state_label(env, pose), oracle_local_state(env, pose))
    dt = time.process_time() - t
    criterion(1, mismatches == 0 and dt < 60, f"{mismatches}/1000 mismatches across 20 envs in {dt:.1f}s (< 60s)")


# -- 2: gradients -----------------------------------------------------------------------


def test_c2_gradient_integrity(criterion):
    t = time.process_time()
    worst_op, worst_name = 0.0, None
    for param in test_gradcheck._cases():
        fn, tensors = param.values[0](np.random.default_rng(7))
        err = max_relative_error(fn, tensors, h=1e-5)
        if err >= worst_op:
            worst_op, worst_name = err, param.id
    model = test_envmemory.toy_model(11)
    mf, mp, qf, qp = test_envmemory.toy_inputs(np.random.default_rng(12), K=2)

    def loss():
        r = forward_memory(model, mf, mp, qf, qp)
        return ng.cross_entropy(ng.reshape(predict_local_state(model, r.h, qf), (2, 5)), [3, 1])

    e2e = max_relative_error(loss, model.parameters(), h=1e-5)
    dt = time.process_time() - t
    ok = worst_op < 1e-4 and e2e < 1e-3 and dt < 120
    criterion(2, ok, f"worst op {worst_name} {worst_op:.2e} (< 1e-4), end-to-end {e2e:.2e} (< 1e-3), {dt:.1f}s (< 120s)")


# -- 3: determinism -----------------------------------------------------------------------


def _pipeline(d, workers):
    small = ["--set", "data.walkthroughs_per_env=4", "--workers", str(workers)]
    steps = [
        ["gen-env", "--seed", "0", "--count", "2", "--out", str(d / "envs")],
        ["gen-walkthroughs", "--seed", "0", "--envs", str(d / "envs"), "--out", str(d / "w.jsonl")],
        ["label", "--envs", str(d / "envs"), "--walkthroughs", str(d / "w.jsonl"), "--out", str(d / "ds")],
        ["pretrain", "--seed", "0", "--data", str(d / "ds"), "--epochs", "2", "--out", str(d / "m.ckpt")],
    ]
    for argv in steps:
        assert cli_run(argv + small) == EX_OK, argv
    files = sorted(p for p in d.rglob("*") if p.is_file() and not p.name.endswith("manifest.json"))
    return {str(p.relative_to(d)): sha256(p) for p in files}


def test_c3_determinism(tmp_path, criterion, capsys):
    runs = {name: _pipeline(tmp_path / name, w) for name, w in (("a", 1), ("b", 1), ("c", 4))}
    capsys.readouterr()
    same_runs = runs["a"] == runs["b"]
    same_workers = runs["a"] == runs["c"]
    kinds = sorted({k.split("/")[0] for k in runs["a"]})
    criterion(3, same_runs and same_workers and "m.ckpt" in runs["a"],
              f"{len(runs['a'])} artifacts ({', '.join(kinds)}): identical across runs {same_runs}, "
              f"across workers 1/4 {same_workers}")


# -- 4: pose ablation ---------------------------------------------------------------------


def test_c4_pose_ablation(lab, criterion):
    K = lab.cfg["memory"]["K"]
    maps = {}
    for pose in ("relative", "none"):
        maps[pose] = [pt.eval_ap(lab.pretrained("env_state", pose, s), lab.val, K, pose)["mAP"] for s in SEEDS]
    gap = 100 * (np.mean(maps["relative"]) - np.mean(maps["none"]))
    minutes = sum(lab.seconds[("env_state", p, s)] for p in maps for s in SEEDS) / 60
    detail = (f"mAP relative {np.mean(maps['relative']):.3f} {np.round(maps['relative'], 3).tolist()} vs none "
              f"{np.mean(maps['none']):.3f} {np.round(maps['none'], 3).tolist()}: gap {gap:+.1f} points (>= 3), "
              f"pretraining {minutes:.1f} min (< 60)")
    criterion(4, gap >= 3 and minutes < 60, detail)


# -- 5: room prediction -------------------------------------------------------------------


def test_c5_room_ordering(lab, criterion):
    base = [lab.room_report("baseline", s) for s in SEEDS]
    fused = [lab.room_report("env_state", s) for s in SEEDS]
    d_hard = 100 * (np.mean([r["hard"] for r in fused]) - np.mean([r["hard"] for r in base]))
    d_all = 100 * (np.mean([r["all"] for r in fused]) - np.mean([r["all"] for r in base]))
    minutes = sum(r["seconds"] for r in base + fused) / 60
    detail = (f"hard {np.mean([r['hard'] for r in base]):.3f} -> {np.mean([r['hard'] for r in fused]):.3f} "
              f"({d_hard:+.1f} points, >= 2); all {np.mean([r['all'] for r in base]):.3f} -> "
              f"{np.mean([r['all'] for r in fused]):.3f} ({d_all:+.1f}, >= -1); {minutes:.1f} min (< 30)")
    criterion(5, d_hard >= 2 and d_all >= -1 and minutes < 30, detail)


# -- 6: episodic memory -------------------------------------------------------------------


def test_c6_epm_ordering(lab, criterion):
    t = time.process_time()
    base_ec = epm.config_from_tree(lab.cfg)
    train_q, _ = epm.generate_dataset_queries(lab.train, base_ec)
    val_q, _ = epm.generate_dataset_queries(lab.val, base_ec)
    scores = {"frame": [], "fused": []}
    for s in SEEDS:
        ec = epm.config_from_tree(lab.cfg, seed=s)
        env_model = lab.pretrained("env_state", "relative", s)
        for name, m in (("frame", None), ("fused", env_model)):
            res = epm.train_localizer(lab.train, train_q, ec, m)
            scores[name].append(epm.eval_localizer(res, lab.val, val_q, ec)["groups"]["visit"]["R1@0.3"])
    minutes = (time.process_time() - t) / 60
    gap = 100 * (np.mean(scores["fused"]) - np.mean(scores["frame"]))
    detail = (f"visit R1@0.3 frame {np.mean(scores['frame']):.3f} {np.round(scores['frame'], 3).tolist()} vs fused "
              f"{np.mean(scores['fused']):.3f} {np.round(scores['fused'], 3).tolist()}: {gap:+.1f} points (>= 2); "
              f"{len(train_q)} train / {len(val_q)} val queries; {minutes:.1f} min (< 30)")
    criterion(6, gap >= 2 and minutes < 30, detail)


# -- 7: variant harness -------------------------------------------------------------------


def test_c7_variant_harness(lab, criterion):
    reports = {v: [lab.room_report(v, s) for s in SEEDS] for v in VARIANTS}
    keys = {v: sorted(r[0]) for v, r in reports.items()}
    comparable = len({tuple(k) for k in keys.values()}) == 1
    hard = {v: float(np.mean([r["hard"] for r in reports[v]])) for v in VARIANTS}
    ok = comparable and hard["env_state"] >= hard["none"]
    detail = ("hard accuracy " + ", ".join(f"{'scratch' if v == 'none' else v} {hard[v]:.3f}" for v in VARIANTS)
              + f"; env_state >= scratch {hard['env_state'] >= hard['none']}; reports comparable {comparable}")
    criterion(7, ok, detail)


# -- 8: metric fixtures ---------------------------------------------------------------------


def test_c8_metric_fixtures(criterion):
    t = time.process_time()
    checks = {
        "iou identical": epm.iou((3, 8), (3, 8)) == 1.0,
        "iou 5/15": epm.iou((0, 9), (5, 14)) == 5 / 15,
        "iou disjoint": epm.iou((0, 3), (4, 9)) == 0.0,
        "rank_at top-1": epm.rank_at([(0, 9, 0.9), (20, 29, 0.5)], (0, 9), 1, 0.5),
        "rank_at miss": not epm.rank_at([(20, 29, 0.9), (0, 9, 0.5)], (0, 9), 1, 0.5),
        "rank_at top-2": epm.rank_at([(20, 29, 0.9), (0, 9, 0.5)], (0, 9), 2, 0.5),
        "AP tie block": pt.average_precision([0.5] * 6, [0, 1, 0, 0, 1, 0]) == 2 / 6,
        "AP ranked": pt.average_precision([0.9, 0.8, 0.7, 0.6, 0.5, 0.4], [1, 0, 1, 1, 0, 0])
        == (1 + 2 / 3 + 3 / 4) / 3,
        "entropy ln 6": abs(room.entropy(np.full((1, 6), 1 / 6))[0] - np.log(6)) < 1e-12,
        "entropy_split": [list(x) for x in room.entropy_split(
            np.array([[0.9, 0.02, 0.02, 0.02, 0.02, 0.02], [1 / 6] * 6, [0.5, 0.5, 0, 0, 0, 0]]), 1 / 3)]
        == [[0, 2], [1]],
        "cross_entropy ln 5": abs(ng.cross_entropy(Tensor(np.zeros(5)), 3).item() - np.log(5)) < 1e-12,
    }
    dt = time.process_time() - t
    failed = [k for k, v in checks.items() if not v]
    criterion(8, not failed and dt < 10, f"{len(checks) - len(failed)}/{len(checks)} fixtures in {dt:.2f}s (< 10s)"
              + (f"; failed: {failed}" if failed else ""))


# -- 9: query generation soundness ------------------------------------------------------------


def test_c9_query_replay(criterion):
    t = time.process_time()
    cfg = config.resolve("desk")
    envs = make_envs(range(2000, 2010), world_params(cfg))
    walks = make_walkthroughs(envs, 1, cfg["data"]["T"], 0)
    layout = FeatureLayout(n_rays=cfg["data"]["n_rays"], n_classes=cfg["world"]["n_object_classes"])
    ec = epm.config_from_tree(cfg)
    total = failed = 0
    for wid, w in walks:
        env = envs[w.env_id]
        tables = oracles.replay_predicates(env, w.poses, layout)
        qs, _ = epm.generate_queries(wid, env, w.poses, layout, ec.then_gap, ec.max_span * ec.clip_len)
        for q in qs:
            total += 1
            try:
                oracles.check_query(q, tables, layout.n_classes, len(env.room_taxonomy), ec.then_gap)
            except AssertionError:
                failed += 1
    dt = time.process_time() - t
    criterion(9, total > 0 and failed == 0 and dt < 300,
              f"{total - failed}/{total} queries pass replay on 10 envs in {dt:.1f}s (< 300s)")


# -- 10: attention sanity -------------------------------------------------------------------


def test_c10_attention(lab, criterion):
    model = lab.pretrained("env_state", "relative", 0)
    K = lab.cfg["memory"]["K"]
    worst = 0.0
    rows = 0
    for rec in lab.val.records[::16]:
        steps = range(0, rec.T, 8)
        _, mf, mp, qf, qp = gather_queries([(rec.feats, rec.poses, t) for t in steps], K)
        r = forward_memory(model, mf, mp, qf, qp)
        for w in r.enc_weights + r.dec_weights:
            w = np.asarray(w)
            worst = max(worst, float(np.abs(w.sum(axis=-1) - 1.0).max()))
            rows += w.size // w.shape[-1]
    exact = True
    rec = lab.val.records[0]
    env = lab.val.env_of(rec)
    for t in (0, 37, 64, rec.T - 1):
        rend = render_attention(env, rec.walkthrough, model, t, k=3, K=K, feats=rec.feats)
        idx, mf, mp, qf, qp = gather_queries([(rec.feats, rec.poses, t)], K)
        memory, _ = build_memory(model, mf, mp)
        _, dec_w = decode_query(model, memory, qf, qp)
        w = np.asarray(dec_w[-1])[0].mean(axis=0)[0]
        for a in rend.meta["attended"]:
            j = list(idx[0]).index(a["step"])
            exact &= a["weight"] == w[j] and a["label"] == f"{w[j]:.2f}"
    criterion(10, worst <= 1e-5 and exact,
              f"{rows} attention rows, max |sum - 1| = {worst:.1e} (<= 1e-5); annotations bit-exact {exact}")

