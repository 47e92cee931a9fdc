"""Top-down SVG figures: floor plan, trajectory and decoder attention.

Output is plain text built with fixed number formatting, so identical inputs
give identical bytes. World coordinates map to pixels by
``px = margin + scale * x`` and ``py = margin + scale * z``; the transform is
written into the document's ``<metadata>`` element.
"""
import json
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .envmemory import decode_query, build_memory, gather_queries
from .observation import walkthrough_features

OBSTACLE = "#333333"
FREE = "#f4f4f4"
ROOM_FILLS = ["#fde2c8", "#d8e8f8", "#dff3df", "#f6dcef", "#eeeeee", "#fff3bf"]
CLASS_COLORS = ["#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6",
                "#bcf60c", "#fabebe", "#008080", "#e6beff", "#9a6324", "#fffac8", "#800000", "#aaffc3",
                "#808000", "#ffd8b1", "#000075", "#808080"]
ATTN_COLORS = ["#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


@dataclass(frozen=True)
class RenderOptions:
    scale: float = 40.0  # pixels per meter
    margin: float = 10.0
    show_rooms: bool = True
    show_objects: bool = True


@dataclass
class SceneRender:
    svg: str
    transform: dict
    meta: dict = field(default_factory=dict)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.svg)


def _f(v):
    return f"{v:.2f}"


def _lerp_hex(a, b, t):
    ca = [int(a[i:i + 2], 16) for i in (1, 3, 5)]
    cb = [int(b[i:i + 2], 16) for i in (1, 3, 5)]
    return "#" + "".join(f"{int(round(x + (y - x) * t)):02x}" for x, y in zip(ca, cb))


class _Canvas:
    def __init__(self, env, opts):
        self.env = env
        self.opts = opts
        w, h = env.extent
        self.width = 2 * opts.margin + opts.scale * w
        self.height = 2 * opts.margin + opts.scale * h
        self.parts = []

    def px(self, x, z):
        return self.opts.margin + self.opts.scale * x, self.opts.margin + self.opts.scale * z

    @property
    def transform(self):
        return {"scale": self.opts.scale, "offset": [self.opts.margin, self.opts.margin],
                "px": "margin + scale * x", "py": "margin + scale * z"}

    def add(self, s):
        self.parts.append(s)

    def document(self, meta):
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(self.width)}" height="{_f(self.height)}" '
                f'viewBox="0 0 {_f(self.width)} {_f(self.height)}">')
        md = escape(json.dumps({"transform": self.transform, **meta}, sort_keys=True))
        return "\n".join([head, f"<metadata>{md}</metadata>"] + self.parts + ["</svg>", ""])


def _draw_env(c, opts):
    env = c.env
    r = env.grid_resolution * opts.scale
    c.add(f'<g id="occupancy"><rect x="{_f(opts.margin)}" y="{_f(opts.margin)}" width="{_f(c.width - 2 * opts.margin)}" '
          f'height="{_f(c.height - 2 * opts.margin)}" fill="{FREE}"/>')
    occ = env.occupancy
    for iz in range(occ.shape[0]):
        row = np.concatenate([[False], occ[iz], [False]]).astype(np.int8)
        d = np.diff(row)
        for a, b in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
            x, y = c.px(a * env.grid_resolution, iz * env.grid_resolution)
            c.add(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f((b - a) * r)}" height="{_f(r)}" fill="{OBSTACLE}"/>')
    c.add("</g>")
    if opts.show_rooms:
        c.add('<g id="rooms">')
        for room in env.rooms:
            x0, z0, x1, z1 = room.bounds
            x, y = c.px(x0, z0)
            fill = ROOM_FILLS[room.label % len(ROOM_FILLS)]
            c.add(f'<rect class="room" x="{_f(x)}" y="{_f(y)}" width="{_f((x1 - x0) * opts.scale)}" '
                  f'height="{_f((z1 - z0) * opts.scale)}" fill="{fill}" fill-opacity="0.6"/>')
            cx, cy = c.px(*room.centroid)
            c.add(f'<text x="{_f(cx)}" y="{_f(cy)}" font-size="12" text-anchor="middle">'
                  f'{escape(env.room_taxonomy[room.label])}</text>')
        c.add("</g>")
    if opts.show_objects:
        c.add('<g id="objects">')
        for o in env.objects:
            x, y = c.px(*o.position)
            color = CLASS_COLORS[o.class_id % len(CLASS_COLORS)]
            c.add(f'<circle class="object" cx="{_f(x)}" cy="{_f(y)}" r="{_f(o.footprint_radius * opts.scale)}" '
                  f'fill="{color}" stroke="#000000" stroke-width="0.5">'
                  f'<title>{escape(env.object_taxonomy[o.class_id])}</title></circle>')
        c.add("</g>")


def _draw_trajectory(c, poses):
    pts = [c.px(x, z) for x, z, _ in poses]
    c.add('<g id="trajectory">')
    n = len(pts)
    for i in range(n - 1):
        color = _lerp_hex("#ffffff", "#1f4fbf", (i + 1) / max(1, n - 1))
        (x0, y0), (x1, y1) = pts[i], pts[i + 1]
        c.add(f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y1)}" stroke="{color}" stroke-width="3" '
              f'stroke-linecap="round"/>')
    c.add("</g>")
    return pts


def _pose_marker(c, pose, color, size, cls):
    x, y = c.px(pose[0], pose[1])
    th = pose[2]
    # heading vector (sin, cos) in (x, z); the triangle points along it
    hx, hy = np.sin(th), np.cos(th)
    pts = [(x + size * hx, y + size * hy), (x - 0.6 * size * hx + 0.5 * size * hy, y - 0.6 * size * hy - 0.5 * size * hx),
           (x - 0.6 * size * hx - 0.5 * size * hy, y - 0.6 * size * hy + 0.5 * size * hx)]
    coords = " ".join(f"{_f(a)},{_f(b)}" for a, b in pts)
    c.add(f'<polygon class="{cls}" points="{coords}" fill="{color}" stroke="#000000" stroke-width="1"/>')
    return x, y


def _check(env, walkthrough):
    if walkthrough.env_id != env.id:
        raise ValueError(f"walkthrough belongs to {walkthrough.env_id!r}, not {env.id!r}")


def render_topdown(env, walkthrough, options=RenderOptions()):
    """Floor plan with rooms, objects and the trajectory (white at the start, blue at the end)."""
    _check(env, walkthrough)
    c = _Canvas(env, options)
    _draw_env(c, options)
    pts = _draw_trajectory(c, walkthrough.poses)
    meta = {"env_id": env.id, "n_objects": len(env.objects), "T": int(walkthrough.T)}
    return SceneRender(c.document(meta), c.transform, {**meta, "trajectory_px": pts})


def attention_weights(model, feats, poses, query_step, K, pose_mode="relative"):
    """Memory steps and last-layer decoder attention (head mean) for one query step."""
    idx, mf, mp, qf, qp = gather_queries([(feats, poses, query_step)], K, pose_mode)
    memory, enc_w = build_memory(model, mf, mp)
    _, dec_w = decode_query(model, memory, qf, qp)
    return idx[0], np.asarray(dec_w[-1])[0].mean(axis=0)[0], enc_w, dec_w


def render_attention(env, walkthrough, model, query_step, k=3, K=16, pose_mode="relative", feats=None,
                     options=RenderOptions()):
    """Trajectory figure with the query pose and its ``k`` most attended memory poses."""
    _check(env, walkthrough)
    if not 0 <= query_step < walkthrough.T:
        raise ValueError(f"query step {query_step} outside [0, {walkthrough.T})")
    if feats is None:
        feats, _ = walkthrough_features(env, walkthrough.poses)
    K = min(K, walkthrough.T)
    mem_idx, w, _, _ = attention_weights(model, feats, walkthrough.poses, query_step, K, pose_mode)
    k = min(k, len(w))
    order = np.argsort(-w, kind="stable")[:k]
    c = _Canvas(env, options)
    _draw_env(c, options)
    pts = _draw_trajectory(c, walkthrough.poses)
    c.add('<g id="attention">')
    attended = []
    for rank, j in enumerate(order):
        step = int(mem_idx[j])
        color = ATTN_COLORS[rank % len(ATTN_COLORS)]
        x, y = _pose_marker(c, walkthrough.poses[step], color, 12.0, "attended")
        c.add(f'<text class="weight" x="{_f(x + 10)}" y="{_f(y - 10)}" font-size="12" fill="{color}">'
              f'{w[j]:.2f}</text>')
        attended.append({"step": step, "weight": float(w[j]), "label": f"{w[j]:.2f}"})
    qx, qy = _pose_marker(c, walkthrough.poses[query_step], "#ffd700", 16.0, "query")
    c.add("</g>")
    meta = {"env_id": env.id, "n_objects": len(env.objects), "T": int(walkthrough.T), "query_step": int(query_step),
            "memory_steps": [int(s) for s in mem_idx], "attended": attended}
    return SceneRender(c.document(meta), c.transform, {**meta, "trajectory_px": pts, "query_px": (qx, qy)})
