"""Versioned binary checkpoints with a JSON hyperparameter sidecar.

Layout (little endian): ``b"EGMM"``, format version (u32), entry count
(u32), then per entry: name length (u32), UTF-8 name, rank (u32), dims
(u32 each), float64 data in row-major order.
"""
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"EGMM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, state, hparams=None):
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    if hparams is not None:
        sidecar_path(path).write_text(json.dumps(hparams, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Return ``(state, hparams)``; ``hparams`` is ``None`` without a sidecar."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an EGMM checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    state = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
            state[name] = arr
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    side = sidecar_path(path)
    hparams = json.loads(side.read_text()) if side.exists() else None
    return state, hparams
