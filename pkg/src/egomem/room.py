"""Room prediction from a short window of frames, optionally enhanced with the
environment feature of the window's center step.

The clip feature ``g`` of a step is its ray-cast frame feature. For the fused
model each window feature is concatenated with ``h`` and passed through one
linear layer (``fuse``) before max pooling over the window; the frame-only
baseline pools ``g`` directly.
"""
import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numgrad as ng
from .data import derive_seed
from .envmemory import EnvMemoryModel, ModelConfig, environment_features_multi
from .numgrad.nn import Linear, Module
from .numgrad.tensor import Tensor
from .worldgen import ROOM_TAXONOMY, room_at

FUSIONS = ("fuse_then_pool", "pool_then_fuse")
SPLITS = ("all", "easy", "hard")


@dataclass(frozen=True)
class RoomInstance:
    record: int
    walkthrough_id: str
    step: int
    window: tuple
    label: int


@dataclass(frozen=True)
class RoomConfig:
    window: int = 8
    hidden: int = 128
    fused_dim: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    freeze: bool = False
    fusion: str = "fuse_then_pool"
    hard_fraction: float = 0.3
    queries_per_walkthrough: int = 4
    K: int = 16
    pose_mode: str = "relative"
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def to_dict(self):
        return asdict(self)


def config_from_tree(cfg, **overrides):
    r = cfg["room"]
    kw = dict(window=r["window"], hidden=r["hidden"], fused_dim=r["fused_dim"], lr=r["lr"], epochs=r["epochs"],
              batch_size=r["batch_size"], freeze=bool(r["freeze"]), fusion=r["fusion"],
              hard_fraction=r["hard_fraction"], queries_per_walkthrough=r["queries_per_walkthrough"],
              K=cfg["memory"]["K"], pose_mode=cfg["pretrain"]["pose"], seed=r["seed"])
    kw.update(overrides)
    return RoomConfig(**kw)


def window_steps(t, T, N=8):
    """``N`` steps centered on ``t`` (``t - N//2 .. t + N - N//2 - 1``), clipped by repeating the ends."""
    lo = t - N // 2
    return np.clip(np.arange(lo, lo + N), 0, T - 1)


def make_instances(ds, per_walkthrough, seed=0, N=8, evaluation=False):
    """Room instances from every walkthrough, skipping steps in doorways.

    Evaluation instances sit on an even grid of valid steps; training
    instances are drawn without replacement with a per-walkthrough seed.
    """
    out = []
    for i, rec in enumerate(ds.records):
        env = ds.env_of(rec)
        labels = np.array([-1 if (r := room_at(env, (x, z))) is None else r for x, z, _ in rec.poses])
        valid = np.flatnonzero(labels >= 0)
        if not len(valid):
            continue
        n = min(per_walkthrough, len(valid))
        if evaluation:
            steps = valid[np.floor((np.arange(n) + 0.5) * len(valid) / n).astype(int)]
        else:
            rng = np.random.default_rng(derive_seed(seed, rec.walkthrough_id, "room"))
            steps = np.sort(rng.choice(valid, size=n, replace=False))
        for t in steps:
            out.append(RoomInstance(i, rec.walkthrough_id, int(t), tuple(int(s) for s in window_steps(t, rec.T, N)),
                                    int(labels[t])))
    return out


def fuse_np(g, h, weight, bias):
    """Plain numpy ``[g ; h] W + b`` over the last axis (``g`` and ``h`` broadcast on leading axes)."""
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if weight.shape[0] != g.shape[-1] + h.shape[-1]:
        raise ng.ShapeError(f"fuse: weight rows {weight.shape[0]} != {g.shape[-1]} + {h.shape[-1]}")
    lead = np.broadcast_shapes(g.shape[:-1], h.shape[:-1])
    x = np.concatenate([np.broadcast_to(g, lead + g.shape[-1:]), np.broadcast_to(h, lead + h.shape[-1:])], axis=-1)
    return x @ weight + bias


def fuse(layer, g, h):
    """Differentiable fusion: ``layer([g ; h])``; ``g`` ``[..., G]`` and ``h`` ``[..., d]`` with equal leading shape."""
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))
    if g.shape[:-1] != h.shape[:-1]:
        raise ng.ShapeError(f"fuse: leading shapes differ, {g.shape} vs {h.shape}")
    return layer(ng.concat([g, h], axis=-1))


class RoomHead(Module):
    """Fusion layer (absent for the baseline) plus a two-layer classifier."""

    def __init__(self, feature_dim, env_dim, n_rooms, cfg, rng):
        self.env_dim = env_dim
        self.fusion = cfg.fusion
        if env_dim:
            self.fuse = Linear(feature_dim + env_dim, cfg.fused_dim, rng)
            pooled = cfg.fused_dim
        else:
            pooled = feature_dim
        self.fc1 = Linear(pooled, cfg.hidden, rng)
        self.fc2 = Linear(cfg.hidden, n_rooms, rng)

    def __call__(self, g, h=None):
        """Logits ``[B, n_rooms]`` from window features ``g [B, N, G]`` and ``h [B, d]``."""
        g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
        b, n, _ = g.shape
        if not self.env_dim:
            pooled = ng.max_axis(g, 1)
        elif self.fusion == "fuse_then_pool":
            hh = ng.expand(ng.reshape(h, (b, 1, self.env_dim)), (b, n, self.env_dim))
            pooled = ng.max_axis(fuse(self.fuse, g, hh), 1)
        else:
            pooled = fuse(self.fuse, ng.max_axis(g, 1), h)
        return self.fc2(ng.relu(self.fc1(pooled)))


@dataclass
class RoomResult:
    head: RoomHead
    env_model: object = None
    step_losses: list = field(default_factory=list)


def _window_feats(ds, instances):
    return np.stack([ds.records[x.record].feats[list(x.window)] for x in instances])


def _env_items(ds, instances):
    return [(ds.records[x.record].feats, ds.records[x.record].poses, x.step) for x in instances]


def _env_feats(env_model, ds, instances, cfg, chunk=256):
    """Non-differentiable ``h`` for many instances."""
    out = [environment_features_multi(env_model, _env_items(ds, instances[s:s + chunk]), cfg.K, cfg.pose_mode).data
           for s in range(0, len(instances), chunk)]
    return np.concatenate(out) if out else np.zeros((0, env_model.d))


def train_room(ds, instances, cfg, env_model=None):
    """Train a room classifier. ``env_model=None`` gives the frame-only baseline.

    The environment model is copied, then fine-tuned jointly unless
    ``cfg.freeze``; the caller's model is never modified.
    """
    if not instances:
        raise ValueError("room training set is empty")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x2003]))
    env = copy.deepcopy(env_model) if env_model is not None else None
    head = RoomHead(ds.layout.size, env.d if env is not None else 0, len(ROOM_TAXONOMY), cfg, rng)
    params = {f"head.{k}": v for k, v in head.named_parameters().items()}
    if env is not None and not cfg.freeze:
        params.update({f"env.{k}": v for k, v in env.named_parameters().items()})
    opt = ng.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = RoomResult(head, env)
    g_all = _window_feats(ds, instances)
    y_all = np.array([x.label for x in instances])
    h_frozen = _env_feats(env, ds, instances, cfg) if env is not None and cfg.freeze else None
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x2004])).permutation(len(instances))
        for s in range(0, len(order), cfg.batch_size):
            sel = order[s:s + cfg.batch_size]
            opt.zero_grad()
            with ng.Tape() as tape:
                h = None
                if env is not None:
                    h = Tensor(h_frozen[sel]) if h_frozen is not None else environment_features_multi(
                        env, _env_items(ds, [instances[j] for j in sel]), cfg.K, cfg.pose_mode)
                loss = ng.cross_entropy(head(g_all[sel], h), y_all[sel])
            tape.backward(loss)
            opt.step()
            result.step_losses.append(loss.item())
    return result


def predict_room(result, ds, instances, cfg, chunk=256):
    """Class probabilities ``[n, n_rooms]``."""
    out = []
    for s in range(0, len(instances), chunk):
        part = instances[s:s + chunk]
        h = None
        if result.env_model is not None:
            h = Tensor(_env_feats(result.env_model, ds, part, cfg))
        logits = result.head(_window_feats(ds, part), h).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, len(ROOM_TAXONOMY)))


def entropy(probs):
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def entropy_split(probs, hard_fraction=0.3):
    """Indices ``(easy, hard)``: the ``round(hard_fraction * n)`` highest-entropy rows are hard.

    Rounding is half-up; ties in entropy go to the earlier row.
    """
    ent = entropy(probs)
    n = len(ent)
    n_hard = int(np.floor(hard_fraction * n + 0.5))
    order = np.argsort(-ent, kind="stable")
    hard = np.sort(order[:n_hard])
    easy = np.sort(order[n_hard:])
    return easy, hard


def accuracy(pred, labels):
    pred = np.asarray(pred)
    return float((pred == np.asarray(labels)).mean()) if len(pred) else None


def eval_room(pred, labels, easy, hard):
    """Top-1 accuracy on all / easy / hard; an empty split maps to ``None``."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    return {"all": accuracy(pred, labels), "easy": accuracy(pred[easy], labels[easy]),
            "hard": accuracy(pred[hard], labels[hard]), "n": {"all": len(pred), "easy": len(easy),
                                                               "hard": len(hard)}}


def save_room(path, result, cfg, feature_dim):
    """One checkpoint holding the head (``head.*``) and, when fused, the environment model (``env.*``)."""
    state = {f"head.{k}": v for k, v in result.head.state_dict().items()}
    hp = {"kind": "room", "room": cfg.to_dict(), "feature_dim": int(feature_dim), "env_dim": result.head.env_dim,
          "n_rooms": int(result.head.fc2.bias.shape[0]), "model": None}
    if result.env_model is not None:
        state.update({f"env.{k}": v for k, v in result.env_model.state_dict().items()})
        hp["model"] = result.env_model.config.to_dict()
    ng.save_checkpoint(path, state, hp)


def load_room(path):
    state, hp = ng.load_checkpoint(path)
    if not hp or hp.get("kind") != "room":
        raise ng.checkpoint.CheckpointError(f"{path}: not a room-prediction checkpoint")
    cfg = RoomConfig(**hp["room"])
    head = RoomHead(hp["feature_dim"], hp["env_dim"], hp["n_rooms"], cfg, np.random.default_rng(0))
    head.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("head.")})
    env = None
    if hp["model"] is not None:
        env = EnvMemoryModel(ModelConfig(**hp["model"]), np.random.default_rng(0))
        env.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("env.")})
    return RoomResult(head, env), cfg
