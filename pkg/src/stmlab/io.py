"""Artifact output: 16-bit PGM images with JSON sidecars, CSV tables and a
per-run manifest of sha256 checksums. Nothing time-dependent is written, so
identical runs give identical bytes."""
from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_pgm(path, data, meta: dict | None = None):
    """Write ``data`` as a binary 16-bit PGM scaled to [min, max].

    The scaling and any metadata go into ``<path>.json`` so the physical
    values can be recovered. Non-finite pixels map to 0.
    """
    a = np.asarray(data, float)
    if a.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    finite = np.isfinite(a)
    lo = float(a[finite].min()) if finite.any() else 0.0
    hi = float(a[finite].max()) if finite.any() else 0.0
    span = hi - lo
    q = np.zeros(a.shape, dtype=">u2")
    if span > 0:
        q[finite] = np.round((a[finite] - lo) / span * 65535).astype(">u2")
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())
    side = {"min": lo, "max": hi, "rows": rows, "cols": cols, "nonfinite": int((~finite).sum())}
    if meta:
        side.update(meta)
    dump_json(side, str(path) + ".json")
    return path


def read_pgm(path):
    """Read a PGM written by :func:`write_pgm`; returns physical values if the sidecar exists."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    cols, rows = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    q = np.frombuffer(parts[3], dtype=">u2" if maxval > 255 else np.uint8).reshape(rows, cols)
    side = Path(str(path) + ".json")
    if side.exists():
        with open(side) as fh:
            m = json.load(fh)
        return m["min"] + q.astype(float) / maxval * (m["max"] - m["min"])
    return q.astype(float)


def write_csv(path, columns: dict, fmt="%.10g"):
    names = list(columns)
    cols = [np.asarray(columns[k]).ravel() for k in names]
    data = np.column_stack(cols) if cols and len(cols[0]) else np.zeros((0, len(names)))
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt=fmt)
    return path


def write_image_csv(path, data):
    np.savetxt(path, np.asarray(data, float), delimiter=",", fmt="%.10g")
    return path


def sha256(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


class Artifacts:
    """Collects the files of one run under ``out`` with a common prefix."""

    def __init__(self, out, prefix: str):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.prefix = prefix
        self.files: list[Path] = []

    def path(self, suffix: str) -> Path:
        p = self.out / f"{self.prefix}{suffix}"
        return p

    def add(self, p):
        p = Path(p)
        if p not in self.files:
            self.files.append(p)
        side = Path(str(p) + ".json")
        if p.suffix == ".pgm" and side.exists() and side not in self.files:
            self.files.append(side)
        return p

    def pgm(self, suffix, data, meta=None):
        return self.add(write_pgm(self.path(suffix), data, meta))

    def csv(self, suffix, columns):
        return self.add(write_csv(self.path(suffix), columns))

    def image_csv(self, suffix, data):
        return self.add(write_image_csv(self.path(suffix), data))

    def json(self, suffix, obj):
        p = self.path(suffix)
        dump_json(obj, p)
        return self.add(p)

    def manifest(self, info: dict | None = None) -> Path:
        entries = []
        for p in sorted(self.files, key=lambda q: q.name):
            entries.append({"file": p.name, "bytes": os.path.getsize(p), "sha256": sha256(p)})
        m = {"prefix": self.prefix, "files": entries}
        if info:
            m.update(info)
        p = self.path("_manifest.json")
        dump_json(m, p)
        return p
