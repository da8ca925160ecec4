"""On-disk formats: checkpoints, tensor bundles, CSV tables, PGM maps.

A bundle is a JSON manifest plus one little-endian float64 blob; each tensor
entry records its name, shape and byte offset.  The checkpoint wraps a bundle
in a small binary header::

    b"BLRL" | u32 format version | u64 manifest length | manifest | blob
"""
from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .network import NetConfig, PolicyNetwork

MAGIC = b"BLRL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True).encode("utf-8")


def pack_tensors(tensors: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    """Tensor table (insertion order) and the concatenated float64 LE blob."""
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"tensor {name!r} has non-finite entries")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    return entries, b"".join(chunks)


def unpack_tensors(entries: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    expected = sum(8 * math.prod(e["shape"]) for e in entries)
    if expected != len(blob):
        raise ValueError(f"manifest shapes need {expected} bytes but the blob has {len(blob)}")
    out = {}
    for e in entries:
        n = math.prod(e["shape"])
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"])
        out[e["name"]] = a.astype(np.float64).reshape(e["shape"])
    return out


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, net: PolicyNetwork, seed: int = 0, provenance: dict | None = None) -> None:
    entries, blob = pack_tensors(net.params)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": net.config.to_dict(),
        "layer_names": net.config.layer_names,
        "tensors": entries,
        "seed": int(seed),
        "provenance": provenance or {},
    }
    body = _dumps(manifest)
    _write_atomic(Path(path), _HEADER.pack(MAGIC, FORMAT_VERSION, len(body)) + body + blob)


def read_checkpoint(path) -> tuple[PolicyNetwork, dict]:
    """Returns ``(network, manifest)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: too short to be a checkpoint")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = _HEADER.size
    manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    params = unpack_tensors(manifest["tensors"], data[start + mlen :])
    arch = dict(manifest["architecture"])
    config = NetConfig(**arch)
    shapes = config.param_shapes()
    if set(shapes) != set(params) or any(tuple(params[k].shape) != s for k, s in shapes.items()):
        raise ValueError(f"{path}: tensors do not match the recorded architecture")
    return PolicyNetwork(config, {k: params[k] for k in shapes}), manifest


def load_checkpoint(path) -> PolicyNetwork:
    return read_checkpoint(path)[0]


# --- generic bundles (probes) -----------------------------------------------


def save_bundle(stem, meta: dict, tensors: dict[str, np.ndarray]) -> tuple[Path, Path]:
    """Writes ``<stem>.json`` and ``<stem>.bin``."""
    # names like "probe_seq0.res1" carry dots, so suffixes are appended, not swapped
    stem = Path(stem)
    entries, blob = pack_tensors(tensors)
    js, bn = stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")
    _write_atomic(js, _dumps({"meta": meta, "tensors": entries, "blob": bn.name}))
    _write_atomic(bn, blob)
    return js, bn


def load_bundle(stem) -> tuple[dict, dict[str, np.ndarray]]:
    stem = Path(stem)
    js = stem if stem.name.endswith(".json") else stem.with_name(stem.name + ".json")
    manifest = json.loads(js.read_text())
    blob = (js.parent / manifest["blob"]).read_bytes()
    return manifest["meta"], unpack_tensors(manifest["tensors"], blob)


# --- CSV ---------------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    s = str(v)
    if any(ch in s for ch in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        lines.append(",".join(format_value(v) for v in row))
    _write_atomic(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_json(path, obj) -> None:
    _write_atomic(Path(path), _dumps(obj) + b"\n")


# --- PGM ---------------------------------------------------------------------


def write_pgm(path, image: np.ndarray, meta: dict | None = None) -> None:
    """8-bit binary PGM with min-max scaling, plus a ``.json`` sidecar holding
    the original range so values can be recovered."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM maps must be 2-D")
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    scaled = np.zeros_like(img) if span == 0 else (img - lo) / span
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    path = Path(path)
    _write_atomic(path, f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    write_json(path.with_suffix(".json"), {"min": lo, "max": hi, "shape": [h, w], **(meta or {})})


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
