"""On-disk formats: checkpoints, metrics CSV, dataset files and their manifest.

Checkpoint layout (all integers little-endian)::

    b"LATF" | u32 version | u32 len + config text (utf-8) | u32 n_tensors
    n_tensors x ( u16 len + name | u32 ndim | ndim x u32 dim | fp32 LE payload )
    sha256 of everything above (32 bytes)

Every write goes to a temporary file in the target directory and is then
renamed over the destination.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .evalkit import MetricsRecord
from .taskgen import DatasetSplit

MAGIC = b"LATF"
VERSION = 1
COUNTERS = "trainer.counters"  # (step, nan_skips, updates)
MOMENTUM_PREFIX = "momentum."


class CheckpointError(OSError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config_text: str
    tensors: dict

    def params(self) -> dict:
        return {k: v for k, v in self.tensors.items()
                if k != COUNTERS and not k.startswith(MOMENTUM_PREFIX)}

    def momentum(self) -> dict | None:
        mom = {k[len(MOMENTUM_PREFIX):]: v for k, v in self.tensors.items() if k.startswith(MOMENTUM_PREFIX)}
        return mom or None

    def counters(self) -> tuple[int, int, int] | None:
        if COUNTERS not in self.tensors:
            return None
        step, skips, updates = (int(x) for x in self.tensors[COUNTERS])
        return step, skips, updates


def encode_checkpoint(config_text: str, tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    text = config_text.encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 4 + 8 + 4 + 32 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    version, n_text = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_text = body[pos: pos + n_text].decode()
    pos += n_text
    (n,) = take("<I")
    tensors = {}
    for _ in range(n):
        (n_name,) = take("<H")
        name = body[pos: pos + n_name].decode()
        pos += n_name
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        tensors[name] = arr.astype(np.float32)
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(config_text, tensors)


def save_checkpoint(path, config_text: str, params: Mapping, momentum: Mapping | None = None,
                    counters: tuple[int, int, int] | None = None) -> None:
    tensors = dict(params)
    if momentum is not None:
        tensors.update({MOMENTUM_PREFIX + k: v for k, v in momentum.items()})
    if counters is not None:
        tensors[COUNTERS] = np.asarray(counters, dtype=np.float32)
    atomic_write(path, encode_checkpoint(config_text, tensors))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---------------------------------------------------------------- metrics CSV

HASH_COLUMN = "config_hash"


def csv_columns() -> list[str]:
    return MetricsRecord.columns() + [HASH_COLUMN]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(records: Iterable[MetricsRecord], config_hash: str) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(csv_columns())
    for r in records:
        d = r.as_dict()
        w.writerow([_cell(d[c]) for c in MetricsRecord.columns()] + [config_hash])
    return out.getvalue()


def read_metrics_csv(path) -> list[dict]:
    """Rows as dicts; empty cells become ``None`` and numbers are parsed."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k == HASH_COLUMN or v == "":
                    row[k] = v if k == HASH_COLUMN else None
                elif k in ("step", "nan_skips"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows


# ---------------------------------------------------------------- datasets

MANIFEST = "manifest.json"


def write_datasets(directory, splits: Mapping[str, DatasetSplit], config_hash: str) -> dict:
    directory = Path(directory)
    entries = {}
    for role in sorted(splits):
        split = splits[role]
        text = split.to_jsonl()
        atomic_write(directory / f"{role}.jsonl", text)
        entries[role] = {"file": f"{role}.jsonl", "records": len(split),
                         "sha256": hashlib.sha256(text.encode()).hexdigest()}
    manifest = {"config_hash": config_hash, "splits": entries}
    atomic_write(directory / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_datasets(directory, seed: int = 0) -> dict[str, DatasetSplit]:
    """Load every split listed in the manifest, verifying its hash."""
    directory = Path(directory)
    with open(directory / MANIFEST) as fh:
        manifest = json.load(fh)
    out = {}
    for role, entry in manifest["splits"].items():
        data = (directory / entry["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise OSError(f"dataset {entry['file']} does not match its manifest hash")
        out[role] = DatasetSplit.from_jsonl(data.decode(), seed)
    return out
