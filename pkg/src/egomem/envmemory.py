"""Pose-conditioned environment memory: a transformer encoder over sampled
frames and a cross-attention decoder for a query frame.

Every memory frame is encoded together with its pose relative to the query
frame, so the same walkthrough yields a different memory for every query.
All batched entry points take ``[B, K, ...]`` arrays; single-query helpers
wrap them with ``B = 1``.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import numgrad as ng
from .numgrad.nn import DecoderLayer, EncoderLayer, LayerNorm, Linear, Module, sinusoidal_encoding
from .numgrad.tensor import Tensor

POSE_MODES = ("relative", "global", "none")
N_STATES = 5
IDENTITY_POSE = np.array([0.0, 0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    n_classes: int
    d: int = 64
    heads: int = 4
    layers_enc: int = 2
    layers_dec: int = 2
    pose_dim: int = 16
    max_slots: int = 64

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NoiseParams:
    pos: float = 0.0125
    heading: float = 0.157
    enabled: bool = True

    def __post_init__(self):
        if self.pos < 0 or self.heading < 0:
            raise ValueError("noise ranges must be nonnegative")


class EnvMemoryModel(Module):
    def __init__(self, config, rng):
        c = config
        if c.d % c.heads:
            raise ValueError(f"model.d={c.d} is not divisible by model.heads={c.heads}")
        self.config = c
        self.feat_proj = Linear(c.feature_dim, c.d, rng)
        self.pose_embed = Linear(4, c.pose_dim, rng)
        self.m_p = Linear(c.d + c.pose_dim, c.d, rng)
        self.encoder = [EncoderLayer(c.d, c.heads, rng) for _ in range(c.layers_enc)]
        self.enc_norm = LayerNorm(c.d)
        self.decoder = [DecoderLayer(c.d, c.heads, rng) for _ in range(c.layers_dec)]
        self.dec_norm = LayerNorm(c.d)
        self.m_h = Linear(c.feature_dim + c.d, c.n_classes * N_STATES, rng)
        self.positional = sinusoidal_encoding(c.max_slots, c.d)
        self.use_positional = True

    @property
    def d(self):
        return self.config.d


# -- geometry ---------------------------------------------------------------------


def relative_pose(p_t, p_q):
    """Express pose rows ``(x, z, theta)`` of ``p_t`` in the frame of ``p_q``.

    Broadcasts over leading axes; returns ``(..., 4)`` = (Δx, Δz, sin Δθ, cos Δθ)
    with +z pointing along the query heading and +x to its right.
    """
    p_t = np.asarray(p_t, dtype=np.float64)
    p_q = np.asarray(p_q, dtype=np.float64)
    dx = p_t[..., 0] - p_q[..., 0]
    dz = p_t[..., 1] - p_q[..., 1]
    c = np.cos(p_q[..., 2])
    s = np.sin(p_q[..., 2])
    dth = p_t[..., 2] - p_q[..., 2]
    return np.stack([dx * c - dz * s, dx * s + dz * c, np.sin(dth), np.cos(dth)], axis=-1)


def absolute_from_relative(rel, p_q):
    """Inverse of :func:`relative_pose` (heading returned in radians)."""
    rel = np.asarray(rel, dtype=np.float64)
    p_q = np.asarray(p_q, dtype=np.float64)
    c = np.cos(p_q[..., 2])
    s = np.sin(p_q[..., 2])
    x = p_q[..., 0] + rel[..., 0] * c + rel[..., 1] * s
    z = p_q[..., 1] - rel[..., 0] * s + rel[..., 1] * c
    th = p_q[..., 2] + np.arctan2(rel[..., 2], rel[..., 3])
    return np.stack([x, z, th], axis=-1)


def global_pose(p):
    p = np.asarray(p, dtype=np.float64)
    return np.stack([p[..., 0], p[..., 1], np.sin(p[..., 2]), np.cos(p[..., 2])], axis=-1)


def add_pose_noise(poses, rng, params=NoiseParams()):
    """Independent uniform noise on x, z and heading of every pose row."""
    poses = np.asarray(poses, dtype=np.float64)
    if not params.enabled:
        return poses.copy()
    shape = poses.shape[:-1]
    noise = np.stack([
        rng.uniform(-params.pos, params.pos, size=shape),
        rng.uniform(-params.pos, params.pos, size=shape),
        rng.uniform(-params.heading, params.heading, size=shape),
    ], axis=-1)
    return poses + noise


def pose_inputs(mem_poses, query_pose, mode):
    """Pose vectors for memory slots ``[..., K, 4]`` and the query ``[..., 4]``."""
    mem_poses = np.asarray(mem_poses, dtype=np.float64)
    query_pose = np.asarray(query_pose, dtype=np.float64)
    if mode == "relative":
        return relative_pose(mem_poses, query_pose[..., None, :]), np.broadcast_to(
            IDENTITY_POSE, query_pose.shape[:-1] + (4,)).copy()
    if mode == "global":
        return global_pose(mem_poses), global_pose(query_pose)
    if mode == "none":
        return np.zeros(mem_poses.shape[:-1] + (4,)), np.zeros(query_pose.shape[:-1] + (4,))
    raise ValueError(f"unknown pose mode {mode!r}; expected one of {POSE_MODES}")


def sample_memory_frames(T, K, mode="inference", rng=None):
    """``K`` sorted step indices on a uniform grid over ``[0, T)``.

    Training mode shifts the whole grid by one random offset in ``[0, T/K)``.
    """
    if K > T:
        raise ValueError(f"cannot sample K={K} memory frames from T={T} steps")
    if K < 1:
        raise ValueError("K must be >= 1")
    u = 0.0
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        u = float(rng.random())
    elif mode != "inference":
        raise ValueError(f"unknown sampling mode {mode!r}")
    idx = np.floor((np.arange(K) + u) * (T / K)).astype(np.int64)
    return np.minimum(idx, T - 1)


# -- forward pieces -----------------------------------------------------------------


def encode_observation(model, feats, poses4, slots=True):
    """``x = M_p([W_f f ; embed(Δp)]) (+ slot positional encoding)``.

    ``feats`` ``[B, L, F]`` and ``poses4`` ``[B, L, 4]``; returns a ``[B, L, d]``
    tensor. ``slots=False`` skips the positional term (used for the query token).
    """
    f = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=np.float64))
    p = poses4 if isinstance(poses4, Tensor) else Tensor(np.asarray(poses4, dtype=np.float64))
    c = model.config
    if f.data.ndim != 3 or f.shape[-1] != c.feature_dim:
        raise ng.ShapeError(f"encode_observation: features {f.shape} do not match [B, L, {c.feature_dim}]")
    if p.data.ndim != 3 or p.shape[:2] != f.shape[:2] or p.shape[-1] != 4:
        raise ng.ShapeError(f"encode_observation: poses {p.shape} do not match features {f.shape}")
    x = model.m_p(ng.concat([model.feat_proj(f), model.pose_embed(p)], axis=-1))
    if slots and model.use_positional:
        b, length, d = x.shape
        if length > c.max_slots:
            raise ValueError(f"{length} memory slots exceed max_slots={c.max_slots}")
        pe = np.broadcast_to(model.positional[:length], (b, length, d)).copy()
        x = ng.add(x, Tensor(pe))
    return x


def build_memory(model, feats, poses4):
    """Encoder output ``[B, K, d]`` plus per-layer self-attention weights."""
    x = encode_observation(model, feats, poses4)
    weights = []
    for layer in model.encoder:
        x, w = layer(x)
        weights.append(w)
    return model.enc_norm(x), weights


def decode_query(model, memory, query_feat, query_pose4):
    """Cross-attend from the encoded query frame; returns ``h_q [B, d]`` and weights."""
    qf = query_feat if isinstance(query_feat, Tensor) else Tensor(np.asarray(query_feat, dtype=np.float64))
    qp = np.asarray(query_pose4, dtype=np.float64)
    b = qf.shape[0]
    x = encode_observation(model, ng.reshape(qf, (b, 1, qf.shape[-1])), qp.reshape(b, 1, 4), slots=False)
    weights = []
    for layer in model.decoder:
        x, w = layer(x, memory)
        weights.append(w)
    h = model.dec_norm(x)
    return ng.reshape(h, (b, model.d)), weights


def predict_local_state(model, h, query_feat):
    """Logits ``[B, |O|, 5]`` from ``M_h([f_q ; h_q])``."""
    qf = query_feat if isinstance(query_feat, Tensor) else Tensor(np.asarray(query_feat, dtype=np.float64))
    logits = model.m_h(ng.concat([qf, h], axis=-1))
    return ng.reshape(logits, (qf.shape[0], model.config.n_classes, N_STATES))


@dataclass
class ForwardResult:
    h: Tensor
    enc_weights: list
    dec_weights: list


def forward_memory(model, mem_feats, mem_pose4, query_feat, query_pose4):
    memory, enc_w = build_memory(model, mem_feats, mem_pose4)
    h, dec_w = decode_query(model, memory, query_feat, query_pose4)
    return ForwardResult(h, enc_w, dec_w)


def assemble(feats, poses, query_steps, K, pose_mode="relative", sample_mode="inference", rng=None,
             noise=None):
    """Gather memory/query inputs for a list of query steps in one walkthrough.

    Returns ``(mem_idx [B,K], mem_feats [B,K,F], mem_pose4 [B,K,4], q_feats [B,F], q_pose4 [B,4])``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    poses = np.asarray(poses, dtype=np.float64)
    T = len(feats)
    steps = np.asarray(query_steps, dtype=np.int64)
    if steps.size and (steps.min() < 0 or steps.max() >= T):
        raise ValueError(f"query step out of range [0, {T})")
    idx = np.stack([sample_memory_frames(T, K, sample_mode, rng) for _ in steps]) if len(steps) else \
        np.zeros((0, K), dtype=np.int64)
    p = poses if noise is None or not noise.enabled else add_pose_noise(poses, rng, noise)
    mem_pose4, q_pose4 = pose_inputs(p[idx], p[steps], pose_mode)
    return idx, feats[idx], mem_pose4, feats[steps], q_pose4


def gather_queries(items, K, pose_mode="relative"):
    """Stack memory/query inputs across walkthroughs.

    ``items`` holds ``(feats [T, F], poses [T, 3], query_step)`` triples; memory
    frames use the inference grid. Returns the same tuple as :func:`assemble`.
    """
    idx, mf, mp, qf, qp = [], [], [], [], []
    for feats, poses, t in items:
        i = sample_memory_frames(len(feats), K, "inference")
        a, b = pose_inputs(poses[i], poses[t], pose_mode)
        idx.append(i); mf.append(feats[i]); mp.append(a); qf.append(feats[t]); qp.append(b)
    return np.stack(idx), np.stack(mf), np.stack(mp), np.stack(qf), np.stack(qp)


def environment_features_multi(model, items, K, pose_mode="relative"):
    """``[B, d]`` environment features (a tensor) for ``(feats, poses, step)`` triples."""
    _, mf, mp, qf, qp = gather_queries(items, K, pose_mode)
    return forward_memory(model, mf, mp, qf, qp).h


def environment_feature(model, walkthrough_features, poses, query_step, K, pose_mode="relative"):
    """Downstream environment feature ``h`` (a ``d``-vector) for one query step."""
    _, mf, mp, qf, qp = assemble(walkthrough_features, poses, [query_step], K, pose_mode)
    return forward_memory(model, mf, mp, qf, qp).h.data[0].copy()


def environment_features(model, walkthrough_features, poses, query_steps, K, pose_mode="relative",
                         grad=False):
    """Batched environment features; returns a ``[B, d]`` tensor (differentiable when ``grad``)."""
    _, mf, mp, qf, qp = assemble(walkthrough_features, poses, query_steps, K, pose_mode)
    return forward_memory(model, mf, mp, qf, qp).h


def save_model(path, model, extra=None):
    hp = {"model": model.config.to_dict()}
    hp.update(extra or {})
    ng.save_checkpoint(path, model.state_dict(), hp)


def load_model(path):
    state, hp = ng.load_checkpoint(path)
    config = ModelConfig(**hp["model"])
    model = EnvMemoryModel(config, np.random.default_rng(0))
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("aux.")})
    return model, state, hp


def top_attended(weights, mem_idx, k=3):
    """Top-k memory steps by last-layer cross-attention averaged over heads."""
    w = np.asarray(weights[-1])[0].mean(axis=0)[0]  # [K]
    k = min(k, len(w))
    order = np.argsort(-w, kind="stable")[:k]
    return [(int(mem_idx[j]), float(w[j])) for j in order]


def softmax_probs(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
