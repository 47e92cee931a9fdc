"""Scalar-loop reference implementations used as test oracles.

Nothing here touches ``egomem.numgrad``; parameters are read as plain arrays.
"""
import math

import numpy as np

from egomem.observation import SEEN_THRESHOLD, RoomTarget, is_visited, seen_fraction

GELU_C = math.sqrt(2.0 / math.pi)


def lin(x, w, b=None):
    """Row vector ``x`` times matrix ``w`` plus ``b``, written as loops."""
    out = []
    for j in range(len(w[0])):
        acc = 0.0
        for i in range(len(x)):
            acc += x[i] * w[i][j]
        if b is not None:
            acc += b[j]
        out.append(acc)
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    return [(x[i] - mu) / math.sqrt(var + eps) * gain[i] + bias[i] for i in range(n)]


def gelu(v):
    return 0.5 * v * (1.0 + math.tanh(GELU_C * (v + 0.044715 * v ** 3)))


def add(a, b):
    return [x + y for x, y in zip(a, b)]


def attention(queries, keys_values, p, heads):
    """Multi-head attention with a parameter dict ``p`` (``q``, ``k``, ``v``, ``out`` weight/bias)."""
    qs = [lin(x, p["q.weight"], p["q.bias"]) for x in queries]
    ks = [lin(x, p["k.weight"], p["k.bias"]) for x in keys_values]
    vs = [lin(x, p["v.weight"], p["v.bias"]) for x in keys_values]
    d = len(qs[0])
    dh = d // heads
    outs, weights = [], []
    for q in qs:
        ctx = [0.0] * d
        wq = []
        for h in range(heads):
            sl = range(h * dh, (h + 1) * dh)
            scores = [sum(q[c] * k[c] for c in sl) / math.sqrt(dh) for k in ks]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            w = [v / z for v in e]
            wq.append(w)
            for j, v in enumerate(vs):
                for c in sl:
                    ctx[c] += w[j] * v[c]
        outs.append(lin(ctx, p["out.weight"], p["out.bias"]))
        weights.append(wq)
    return outs, weights


def sub_params(params, prefix):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def feed_forward(x, p):
    h = [gelu(v) for v in lin(x, p["fc1.weight"], p["fc1.bias"])]
    return lin(h, p["fc2.weight"], p["fc2.bias"])


def encoder_layer(xs, p, heads):
    hs = [layer_norm(x, p["norm1.gain"], p["norm1.bias"]) for x in xs]
    a, w = attention(hs, hs, sub_params(p, "attn."), heads)
    xs = [add(x, ai) for x, ai in zip(xs, a)]
    ff = sub_params(p, "ff.")
    return [add(x, feed_forward(layer_norm(x, p["norm2.gain"], p["norm2.bias"]), ff)) for x in xs], w


def decoder_layer(x, memory, p, heads):
    q = layer_norm(x, p["norm_q.gain"], p["norm_q.bias"])
    mem = [layer_norm(m, p["norm_m.gain"], p["norm_m.bias"]) for m in memory]
    a, w = attention([q], mem, sub_params(p, "cross."), heads)
    x = add(x, a[0])
    return add(x, feed_forward(layer_norm(x, p["norm2.gain"], p["norm2.bias"]), sub_params(p, "ff."))), w


def encode(f, pose4, p, pe=None):
    a = lin(f, p["feat_proj.weight"], p["feat_proj.bias"])
    b = lin(pose4, p["pose_embed.weight"], p["pose_embed.bias"])
    x = lin(a + b, p["m_p.weight"], p["m_p.bias"])
    return add(x, pe) if pe is not None else x


def env_memory_forward(params, config, positional, mem_feats, mem_poses, q_feat, q_pose):
    """Full model forward for one query: returns ``(h, logits[|O|][5], dec_weights)``."""
    p = {k: v.tolist() for k, v in params.items()}
    xs = [encode(f, po, p, list(positional[i])) for i, (f, po) in enumerate(zip(mem_feats, mem_poses))]
    for li in range(config.layers_enc):
        xs, _ = encoder_layer(xs, sub_params(p, f"encoder.{li}."), config.heads)
    mem = [layer_norm(x, p["enc_norm.gain"], p["enc_norm.bias"]) for x in xs]
    x = encode(q_feat, q_pose, p)
    dec_w = []
    for li in range(config.layers_dec):
        x, w = decoder_layer(x, mem, sub_params(p, f"decoder.{li}."), config.heads)
        dec_w.append(w)
    h = layer_norm(x, p["dec_norm.gain"], p["dec_norm.bias"])
    logits = lin(list(q_feat) + h, p["m_h.weight"], p["m_h.bias"])
    return h, [logits[c * 5:(c + 1) * 5] for c in range(config.n_classes)], dec_w


# -- episodic-memory query replay ---------------------------------------------------


def replay_predicates(env, poses, layout):
    """Independent per-step predicates from the slow single-object helpers."""
    T = len(poses)
    n_o, n_r = len(env.object_taxonomy), len(env.room_taxonomy)
    seen = np.zeros((T, n_o, n_r + 1), dtype=bool)
    visit = np.zeros((T, n_o, n_r + 1), dtype=bool)
    room_of = []
    for i, o in enumerate(env.objects):
        r = None
        for room in env.rooms:
            if room.contains(*o.position):
                r = room.label
        room_of.append(r)
    in_room = np.zeros((T, n_r), dtype=bool)
    for t, p in enumerate(poses):
        for i, o in enumerate(env.objects):
            s = seen_fraction(env, p, i, layout) >= SEEN_THRESHOLD
            v = is_visited(env, (p[0], p[1]), i)
            for col in ([n_r] + ([room_of[i]] if room_of[i] is not None else [])):
                seen[t, o.class_id, col] |= s
                visit[t, o.class_id, col] |= v
        for r in range(n_r):
            in_room[t, r] = is_visited(env, (p[0], p[1]), RoomTarget(r))
    return seen, visit, in_room


def _series(template, s1, s2, tables, n_o, n_r):
    seen, visit, in_room = tables
    obj = lambda table, c, r=None: table[:, c, n_r if r is None else r - n_o]
    if template == "see_o":
        return obj(seen, s1)
    if template == "see_o_in_r":
        return obj(seen, s1, s2)
    if template == "visit_o_in_r":
        return obj(visit, s1, s2)
    if template == "visit_or":
        return obj(visit, s1) if s1 < n_o else in_room[:, s1 - n_o]
    if template in ("see_o_then_o", "visit_o_then_o"):
        t = seen if template == "see_o_then_o" else visit
        return obj(t, s1), obj(t, s2)
    return in_room[:, s1 - n_o], in_room[:, s2 - n_o]


def check_query(q, tables, n_o, n_r, gap):
    ser = _series(q.template, q.slot1, q.slot2, tables, n_o, n_r)
    T = len(tables[0])
    if isinstance(ser, tuple):
        a, b = ser
        ends_a = [t for t in range(T) if a[t] and (t == T - 1 or not a[t + 1])]
        ends_b = [t for t in range(T) if b[t] and (t == T - 1 or not b[t + 1])]
        assert q.t_s in ends_a and q.t_e in ends_b
        assert 0 < q.t_e - q.t_s <= gap
        assert not [e for e in ends_b if q.t_s < e < q.t_e]
        valid = [e for e in ends_a if [f for f in ends_b if f > e] and min(f for f in ends_b if f > e) - e <= gap]
        assert q.t_s in valid
        expect = {1: "none"}.get(len(valid))
        if q.qualifier == "first":
            assert q.t_s == min(valid) and len(valid) > 1
        elif q.qualifier == "last":
            assert q.t_s == max(valid) and len(valid) > 1
        else:
            assert expect == "none"
        return
    assert ser[q.t_s:q.t_e + 1].all()
    assert q.t_s == 0 or not ser[q.t_s - 1]
    assert q.t_e == T - 1 or not ser[q.t_e + 1]
    n_runs = sum(1 for t in range(T) if ser[t] and (t == 0 or not ser[t - 1]))
    if q.qualifier == "none":
        assert n_runs == 1
    elif q.qualifier == "first":
        assert n_runs > 1 and not ser[:q.t_s].any()
    else:
        assert n_runs > 1 and not ser[q.t_e + 1:].any()
