"""On-disk formats: the matrix container and model checkpoints.

Matrix container
    ``<name>.json`` index ``{"index": {id: [byte_offset, rows, cols]}, ...}``
    next to a raw little-endian float32 blob ``<name>.bin``. Values are
    upcast to float64 on load.

Checkpoint
    a directory holding ``manifest.json`` (stage, seed, config and its hash,
    parameter names/shapes/offsets) and ``params.bin`` (little-endian float64).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONTAINER_FORMAT = "pepscreen-matrices/1"
CHECKPOINT_FORMAT = "pepscreen-checkpoint/1"


class ContainerError(ValueError):
    pass


class ContainerShapeError(ContainerError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"entry {key!r}: {msg}")
        self.key = key


class MissingEntryError(ContainerError, KeyError):
    def __init__(self, key: str):
        ValueError.__init__(self, f"no entry {key!r} in container")
        self.key = key

    def __str__(self) -> str:
        return ValueError.__str__(self)


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _blob_path(index_path: Path) -> Path:
    return index_path.with_suffix(".bin")


def write_container(path: str | os.PathLike, matrices: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write 2-D matrices under string ids. Returns the index path."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    index = {}
    offset = 0
    chunks = []
    for key, mat in matrices.items():
        m = np.asarray(mat)
        if m.ndim == 1:
            m = m[None, :]
        if m.ndim != 2:
            raise ContainerShapeError(key, f"expected a 2-D matrix, got shape {m.shape}")
        raw = np.ascontiguousarray(m, dtype="<f4").tobytes()
        index[key] = [offset, int(m.shape[0]), int(m.shape[1])]
        chunks.append(raw)
        offset += len(raw)
    blob = _blob_path(path)
    blob.write_bytes(b"".join(chunks))
    doc = {"format": CONTAINER_FORMAT, "blob": blob.name, "index": index, "meta": meta or {}}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class Container:
    matrices: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self.matrices[key]
        except KeyError:
            raise MissingEntryError(key) from None

    def __contains__(self, key: str) -> bool:
        return key in self.matrices

    def __len__(self) -> int:
        return len(self.matrices)


def read_container(path: str | os.PathLike, cols: int | None = None,
                   rows: dict[str, int] | None = None) -> Container:
    """Load a container, optionally checking column width and per-id row counts."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"cannot read container index {path}: {exc}") from exc
    if doc.get("format") != CONTAINER_FORMAT:
        raise ContainerError(f"{path}: unknown format {doc.get('format')!r}")
    blob = (path.parent / doc["blob"]).read_bytes()
    out = {}
    # blob order, so rewriting what was read reproduces the file byte for byte
    for key, (offset, r, c) in sorted(doc["index"].items(), key=lambda kv: kv[1][0]):
        nbytes = r * c * 4
        if offset < 0 or offset + nbytes > len(blob):
            raise ContainerShapeError(key, f"byte range {offset}+{nbytes} exceeds blob of {len(blob)} bytes")
        if cols is not None and c != cols:
            raise ContainerShapeError(key, f"has {c} columns, expected {cols}")
        if rows is not None and key in rows and r != rows[key]:
            raise ContainerShapeError(key, f"has {r} rows, expected {rows[key]}")
        out[key] = np.frombuffer(blob, dtype="<f4", count=r * c, offset=offset).reshape(r, c).astype(np.float64)
    if rows is not None:
        for key in rows:
            if key not in out:
                raise MissingEntryError(key)
    return Container(out, doc.get("meta", {}))


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    kind: str  # "peppi" or "pepgen"
    stage: str
    seed: int
    config: dict
    params: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def manifest(self) -> dict:
        entries = []
        offset = 0
        for name in sorted(self.params):
            arr = self.params[name]
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 8
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": self.kind,
            "stage": self.stage,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "parameters": entries,
            "extra": self.extra,
        }

    def blob(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in sorted(self.params))

    def save(self, directory: str | os.PathLike) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
        (d / "params.bin").write_bytes(self.blob())
        return d

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "Checkpoint":
        d = Path(directory)
        try:
            man = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
            blob = (d / "params.bin").read_bytes()
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {d}: {exc}") from exc
        if man.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{d}: unknown checkpoint format {man.get('format')!r}")
        if man.get("config_hash") != config_hash(man["config"]):
            raise CheckpointError(f"{d}: config hash does not match stored config")
        params = {}
        for e in man["parameters"]:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            if e["offset"] + count * 8 > len(blob):
                raise CheckpointError(f"{d}: parameter {e['name']} runs past the end of params.bin")
            params[e["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"]).reshape(
                e["shape"]).astype(np.float64)
        expected = sum(int(np.prod(e["shape"])) * 8 for e in man["parameters"])
        if expected != len(blob):
            raise CheckpointError(f"{d}: params.bin has {len(blob)} bytes, manifest implies {expected}")
        return cls(man["kind"], man["stage"], man["seed"], man["config"], params, man.get("extra", {}))


def diff_names(expected: dict, got: dict) -> str:
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    shape = sorted(k for k in set(expected) & set(got) if np.shape(expected[k]) != np.shape(got[k]))
    return f"missing={missing} unexpected={extra} shape_mismatch={shape}"
