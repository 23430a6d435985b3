"""Seed derivation and atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np


def derive_seed(master, *names) -> int:
    """Child seed = first 8 bytes (little-endian) of sha256("master/name/...")."""
    key = "/".join([str(int(master))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=_default, allow_nan=False) + "\n"


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def atomic_write_text(path, text: str):
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    return atomic_write_text(path, dumps(obj))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
