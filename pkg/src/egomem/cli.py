"""``egomem`` command line.

Every command resolves a layered configuration (defaults < ``--preset`` <
``--config`` < ``--set``), writes a manifest beside its outputs and mirrors
its metrics to stdout as one JSON line.

Exit codes: 0 success, 1 validation error, 2 I/O error, 64 usage error.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import epm, pretrain as pt, room
from .data import (
    Dataset, DatasetError, data_root, label_walkthroughs, load_dataset, load_walkthrough_file, make_envs,
    make_walkthroughs, save_dataset, save_envs, save_walkthrough_file, validate_dataset, world_params,
)
from .envmemory import load_model, save_model
from .manifest import ManifestError, validate_manifest, write_manifest
from .numgrad.checkpoint import CheckpointError
from .observation import FeatureLayout
from .viz import render_attention, render_topdown
from .worldgen import GenerationError, SchemaError, load_environment

EX_OK, EX_VALIDATION, EX_IO, EX_USAGE = 0, 1, 2, 64
COMMANDS = ("gen-env", "gen-walkthroughs", "label", "pretrain", "eval-pretrain", "train-room", "eval-room",
            "gen-queries", "train-epm", "eval-epm", "viz", "validate")

log = logging.getLogger("egomem")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {text!r}")
    return text == "on"


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _common(p, seed=False):
    p.add_argument("--preset", default="desk", choices=sorted(config_mod.PRESETS))
    p.add_argument("--config", help="YAML/JSON config layer")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--workers", type=int, default=None, help="worker lanes (outputs do not depend on this)")
    if seed:
        p.add_argument("--seed", type=int, required=True)


def build_parser():
    root = _Parser(prog="egomem", description="Synthetic egocentric environment-memory laboratory.")
    sub = root.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-env", help="generate environments")
    _common(p, seed=True)
    p.add_argument("--count", type=int, default=1, help="environments with seeds seed .. seed+count-1")
    p.add_argument("--out", required=True, help="FILE.json for one environment, else a directory")

    p = sub.add_parser("gen-walkthroughs", help="generate agent walkthroughs")
    _common(p, seed=True)
    p.add_argument("--env", action="append", default=[], help="environment JSON (repeatable)")
    p.add_argument("--envs", help="directory holding envs/*.json")
    p.add_argument("--n", type=int, help="walkthroughs per environment (default data.walkthroughs_per_env)")
    p.add_argument("--T", type=int, help="steps per walkthrough (default data.T)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("label", help="ray-cast features and local-state labels into a dataset directory")
    _common(p)
    p.add_argument("--env", action="append", default=[])
    p.add_argument("--envs")
    p.add_argument("--walkthroughs", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="pretrain the environment memory")
    _common(p, seed=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--objective", choices=sorted(pt.OBJECTIVE_ALIASES))
    p.add_argument("--pose", choices=("relative", "global", "none"))
    p.add_argument("--noise", type=_on_off, default=None, help="pose noise on|off")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("eval-pretrain", help="per-direction AP of a pretrained model")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = sub.add_parser("train-room", help="train a room classifier")
    _common(p, seed=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint, or 'none' for the frame-only baseline")
    p.add_argument("--freeze", type=_on_off, default=None, help="on|off")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-room", help="room accuracy on all / easy / hard")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", action="append", required=True, help="room checkpoint (one per seed)")
    p.add_argument("--baseline", action="append", required=True,
                   help="frame-only checkpoint defining the entropy split (one per seed, or one for all)")
    p.add_argument("--split", choices=room.SPLITS, default="all")
    p.add_argument("--out")

    p = sub.add_parser("gen-queries", help="templated episodic-memory queries")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-epm", help="train the moment localizer")
    _common(p, seed=True)
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--ckpt", default="none")
    p.add_argument("--env-feat", type=_on_off, default=True, help="on|off")
    p.add_argument("--freeze", type=_on_off, default=None, help="on|off")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-epm", help="Rank-1 recall of moment localizers")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--model", action="append", required=True)
    p.add_argument("--iou", type=_floats, default=epm.IOU_THRESHOLDS)
    p.add_argument("--out")

    p = sub.add_parser("viz", help="SVG figures")
    _common(p)
    p.add_argument("--mode", choices=("trajectory", "attention"), required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--walkthrough", required=True, help="walkthrough JSONL file")
    p.add_argument("--id", help="walkthrough id (default: the first one for --env)")
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--ckpt")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", help="check a dataset directory or a manifest")
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--sample", type=float, default=0.01)
    return root


# -- helpers --------------------------------------------------------------------


def _config(args):
    cfg = config_mod.resolve(args.preset, args.config, args.set)
    if args.workers is not None:
        cfg["run"]["workers"] = args.workers
    return cfg


def _workers(cfg):
    return max(1, int(cfg["run"]["workers"]))


def _envs(args):
    envs = {}
    if getattr(args, "envs", None):
        d = Path(args.envs)
        files = [f for f in (sorted((d / "envs").glob("*.json")) or sorted(d.glob("*.json")))
                 if not f.name.endswith("manifest.json")]
        if not files:
            raise FileNotFoundError(f"{d}: no environment files")
        for f in files:
            e = load_environment(f)
            envs[e.id] = e
    for f in args.env:
        e = load_environment(f)
        envs[e.id] = e
    if not envs:
        raise UsageError("give --env FILE or --envs DIR")
    return envs


def _env_inputs(args):
    return list(args.env) + ([args.envs] if getattr(args, "envs", None) else [])


def _emit(metrics):
    print(json.dumps(metrics, sort_keys=True, separators=(",", ":")))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_env_model(path):
    if path in (None, "none"):
        return None, None
    model, _, hp = load_model(path)
    return model, hp


# -- commands -------------------------------------------------------------------


def cmd_gen_env(args, cfg):
    params = world_params(cfg)
    seeds = list(range(args.seed, args.seed + args.count))
    envs = make_envs(seeds, params, _workers(cfg))
    out = Path(args.out)
    if out.suffix == ".json":
        if args.count != 1:
            raise UsageError("--out FILE.json takes exactly one environment; use a directory with --count")
        env = next(iter(envs.values()))
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(env.to_json())
        outputs = [out]
    else:
        save_envs(out, envs)
        outputs = [out]
    return {"environments": len(envs)}, [], outputs, {"seed": args.seed, "count": args.count}


def cmd_gen_walkthroughs(args, cfg):
    envs = _envs(args)
    n = args.n if args.n is not None else cfg["data"]["walkthroughs_per_env"]
    T = args.T if args.T is not None else cfg["data"]["T"]
    walks = make_walkthroughs(envs, n, T, args.seed, _workers(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_walkthrough_file(out, walks)
    return {"walkthroughs": len(walks), "T": T}, _env_inputs(args), [out], {"seed": args.seed}


def cmd_label(args, cfg):
    envs = _envs(args)
    walks = load_walkthrough_file(args.walkthroughs)
    missing = sorted({w.env_id for _, w in walks} - set(envs))
    if missing:
        raise DatasetError(f"walkthroughs reference unknown environments: {missing}")
    layout = FeatureLayout(n_rays=cfg["data"]["n_rays"], n_classes=cfg["world"]["n_object_classes"])
    records = label_walkthroughs(envs, walks, layout, _workers(cfg))
    used = {r.env_id for r in records}
    ds = Dataset({k: v for k, v in envs.items() if k in used}, records, layout)
    save_dataset(args.out, ds)
    outputs = [Path(args.out)]
    return ({"walkthroughs": len(records), "rows": int(sum(r.T for r in records))},
            _env_inputs(args) + [args.walkthroughs], outputs, {})


def cmd_pretrain(args, cfg):
    if args.objective:
        cfg["pretrain"]["objective"] = args.objective
    if args.pose:
        cfg["pretrain"]["pose"] = args.pose
    if args.noise is not None:
        cfg["noise"]["enabled"] = args.noise
    if args.epochs:
        cfg["pretrain"]["epochs"] = args.epochs
    cfg["pretrain"]["seed"] = args.seed
    train = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    pc = pt.config_from_tree(cfg)
    res = pt.pretrain(train, pc, model_cfg=pt.model_config(cfg, train.layout), val_ds=val, workers=_workers(cfg),
                      log=lambda row: log.info("%s", json.dumps(row)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, res.model, {"pretrain": pc.to_dict()})
    curve = out.with_name(out.name + ".curve.csv")
    pt.write_curve_csv(curve, res.curve)
    metrics = {"objective": pc.objective, "pose": pc.pose_mode, "best_epoch": res.best_epoch,
               "final_train_loss": res.curve[-1]["train_loss"] if res.curve else None,
               "best_val_loss": min((r["val_loss"] for r in res.curve if "val_loss" in r), default=None)}
    inputs = [args.data] + ([args.val] if args.val else [])
    return metrics, inputs, [out, out.with_name(out.name + ".json"), curve], {"seed": args.seed}


def cmd_eval_pretrain(args, cfg):
    model, _, hp = load_model(args.ckpt)
    ds = load_dataset(args.data)
    pose = (hp.get("pretrain") or {}).get("pose_mode", cfg["pretrain"]["pose"])
    report = pt.eval_report(model, ds, cfg["memory"]["K"], pose)
    outputs = []
    if args.out:
        _write_json(args.out, report)
        outputs = [args.out]
    return report, [args.ckpt, args.data], outputs, {}


def cmd_train_room(args, cfg):
    overrides = {"seed": args.seed}
    if args.freeze is not None:
        overrides["freeze"] = args.freeze
    rc = room.config_from_tree(cfg, **overrides)
    ds = load_dataset(args.data)
    env_model, hp = _load_env_model(args.ckpt)
    if hp and hp.get("pretrain"):
        rc = room.RoomConfig(**{**rc.to_dict(), "pose_mode": hp["pretrain"]["pose_mode"]})
    inst = room.make_instances(ds, rc.queries_per_walkthrough, seed=rc.seed, N=rc.window)
    res = room.train_room(ds, inst, rc, env_model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    room.save_room(out, res, rc, ds.layout.size)
    metrics = {"instances": len(inst), "final_loss": res.step_losses[-1], "fused": env_model is not None}
    inputs = [args.data] + ([args.ckpt] if env_model is not None else [])
    return metrics, inputs, [out, out.with_name(out.name + ".json")], {"seed": args.seed}


def _mean_block(blocks):
    keys = blocks[0].keys()
    out = {}
    for k in keys:
        vals = [b[k] for b in blocks if b.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def cmd_eval_room(args, cfg):
    ds = load_dataset(args.data)
    baselines = args.baseline * len(args.model) if len(args.baseline) == 1 else args.baseline
    if len(baselines) != len(args.model):
        raise UsageError("give one --baseline, or one per --model")
    per_seed = []
    for m_path, b_path in zip(args.model, baselines):
        fused, rc = room.load_room(m_path)
        base, bc = room.load_room(b_path)
        inst = room.make_instances(ds, 8, N=rc.window, evaluation=True)
        if not inst:
            raise DatasetError(f"{args.data}: no room instances")
        labels = np.array([x.label for x in inst])
        easy, hard = room.entropy_split(room.predict_room(base, ds, inst, bc), rc.hard_fraction)
        pred = room.predict_room(fused, ds, inst, rc).argmax(axis=1)
        rep = room.eval_room(pred, labels, easy, hard)
        per_seed.append({"model": m_path, "baseline": b_path, **{s: rep[s] for s in room.SPLITS}, "n": rep["n"]})
    mean = _mean_block([{s: r[s] for s in room.SPLITS} for r in per_seed])
    metrics = {"split": args.split, "accuracy": mean[args.split], "mean": mean, "per_seed": per_seed}
    outputs = []
    if args.out:
        _write_json(args.out, metrics)
        outputs = [args.out]
    return metrics, [args.data] + list(args.model) + list(dict.fromkeys(baselines)), outputs, {}


def cmd_gen_queries(args, cfg):
    ds = load_dataset(args.data)
    ec = epm.config_from_tree(cfg)
    qs, dropped = epm.generate_dataset_queries(ds, ec, _workers(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    epm.save_queries(out, qs)
    groups = {g: sum(q.group == g for q in qs) for g in ("see", "visit")}
    return {"queries": len(qs), "dropped_long": dropped, "groups": groups}, [args.data], [out], {}


def cmd_train_epm(args, cfg):
    overrides = {"seed": args.seed}
    if args.freeze is not None:
        overrides["freeze"] = args.freeze
    ec = epm.config_from_tree(cfg, **overrides)
    ds = load_dataset(args.data)
    qs = epm.load_queries(args.queries)
    env_model, hp = _load_env_model(args.ckpt) if args.env_feat else (None, None)
    if args.env_feat and env_model is None:
        raise UsageError("--env-feat on needs --ckpt")
    if hp and hp.get("pretrain"):
        ec = epm.EPMConfig(**{**ec.to_dict(), "pose_mode": hp["pretrain"]["pose_mode"]})
    res = epm.train_localizer(ds, qs, ec, env_model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    epm.save_localizer(out, res, ec, ds.layout.size, ds.n_classes)
    inputs = [args.data, args.queries] + ([args.ckpt] if env_model is not None else [])
    return ({"queries": len(qs), "final_loss": res.step_losses[-1], "env_feat": env_model is not None}, inputs,
            [out, out.with_name(out.name + ".json")], {"seed": args.seed})


def cmd_eval_epm(args, cfg):
    ds = load_dataset(args.data)
    qs = epm.load_queries(args.queries)
    if not qs:
        raise DatasetError(f"{args.queries}: no queries")
    per_seed = []
    for m in args.model:
        res, ec = epm.load_localizer(m)
        per_seed.append({"model": m, **epm.eval_localizer(res, ds, qs, ec, args.iou)})
    mean = {"all": _mean_block([r["all"] for r in per_seed]),
            "groups": {g: (_mean_block([r["groups"][g] for r in per_seed]) if per_seed[0]["groups"][g] else None)
                       for g in ("see", "visit")}}
    metrics = {"mean": mean, "per_seed": per_seed}
    outputs = []
    if args.out:
        _write_json(args.out, metrics)
        outputs = [args.out]
    return metrics, [args.data, args.queries] + list(args.model), outputs, {}


def cmd_viz(args, cfg):
    env = load_environment(args.env)
    walks = load_walkthrough_file(args.walkthrough)
    pick = [(wid, w) for wid, w in walks if (wid == args.id if args.id else w.env_id == env.id)]
    if not pick:
        raise DatasetError(f"{args.walkthrough}: no walkthrough {'with id ' + args.id if args.id else 'for ' + env.id}")
    wid, w = pick[0]
    if args.mode == "trajectory":
        r = render_topdown(env, w)
        inputs = [args.env, args.walkthrough]
    else:
        if not args.ckpt:
            raise UsageError("--mode attention needs --ckpt")
        model, _, hp = load_model(args.ckpt)
        pose = (hp.get("pretrain") or {}).get("pose_mode", cfg["pretrain"]["pose"])
        r = render_attention(env, w, model, args.step, args.k, cfg["memory"]["K"], pose)
        inputs = [args.env, args.walkthrough, args.ckpt]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    r.save(out)
    metrics = {"walkthrough_id": wid, "mode": args.mode}
    if args.mode == "attention":
        metrics["attended"] = r.meta["attended"]
    return metrics, inputs, [out], {}


def cmd_validate(args):
    if bool(args.data) == bool(args.manifest):
        raise UsageError("give exactly one of --data or --manifest")
    if args.manifest:
        problems = validate_manifest(args.manifest)
        _emit({"manifest": args.manifest, "ok": not problems, "problems": problems})
        return EX_OK if not problems else EX_VALIDATION
    report = validate_dataset(args.data, args.sample)
    _emit(report)
    return EX_OK


HANDLERS = {
    "gen-env": cmd_gen_env, "gen-walkthroughs": cmd_gen_walkthroughs, "label": cmd_label, "pretrain": cmd_pretrain,
    "eval-pretrain": cmd_eval_pretrain, "train-room": cmd_train_room, "eval-room": cmd_eval_room,
    "gen-queries": cmd_gen_queries, "train-epm": cmd_train_epm, "eval-epm": cmd_eval_epm, "viz": cmd_viz,
}


def run(argv):
    """Execute one command; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        if args.command == "validate":
            return cmd_validate(args)
        cfg = _config(args)
        started = time.time()
        metrics, inputs, outputs, seeds = HANDLERS[args.command](args, cfg)
        if outputs:
            write_manifest(args.command, argv, cfg, seeds, inputs, outputs, started, metrics=metrics)
        _emit(metrics)
        return EX_OK
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EX_USAGE
    except (config_mod.ConfigError, DatasetError, SchemaError, CheckpointError, ManifestError, GenerationError,
            ValueError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EX_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EX_IO


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run(sys.argv[1:] if argv is None else list(argv)))


if __name__ == "__main__":
    main()
