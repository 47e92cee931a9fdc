"""Run manifests: what was run, with which configuration, reading and writing
which files (by SHA-256), so any artifact can be traced and regenerated."""
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_SCHEMA_VERSION = 1


class ManifestError(ValueError):
    pass


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def hash_paths(paths):
    """``{path: sha256}`` for files; directories contribute every file inside, sorted."""
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file() and not q.name.endswith(".manifest.json")
                            and q.name != "manifest.json"):
                out[str(f)] = sha256_file(f)
        elif p.exists():
            out[str(p)] = sha256_file(p)
        else:
            raise FileNotFoundError(f"{p}: no such file or directory")
    return out


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    inputs: dict
    outputs: dict
    wall_time: float
    code_version: str = __version__
    schema_version: int = MANIFEST_SCHEMA_VERSION
    metrics: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


def manifest_path(output):
    p = Path(output)
    return p / "manifest.json" if p.is_dir() else p.with_name(p.name + ".manifest.json")


def write_manifest(command, argv, config, seeds, inputs, outputs, started, metrics=None, where=None):
    """Hash ``inputs``/``outputs`` and write the manifest beside the first output (or at ``where``)."""
    m = RunManifest(command=command, argv=list(argv), config=config, seeds=seeds, inputs=hash_paths(inputs),
                    outputs=hash_paths(outputs), wall_time=round(time.time() - started, 3), metrics=metrics or {})
    path = Path(where) if where is not None else manifest_path(outputs[0])
    path.write_text(m.to_json())
    return path


def load_manifest(path):
    data = json.loads(Path(path).read_text())
    if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(f"{path}: unsupported manifest schema {data.get('schema_version')!r}")
    return RunManifest(**data)


def validate_manifest(path):
    """Every referenced file must exist with the recorded hash. Returns the list of problems."""
    m = load_manifest(path)
    problems = []
    for kind in ("inputs", "outputs"):
        for f, digest in getattr(m, kind).items():
            if not Path(f).exists():
                problems.append(f"{kind}: {f} is missing")
            elif sha256_file(f) != digest:
                problems.append(f"{kind}: {f} hash mismatch")
    return problems
