"""Named parameter store, freeze policies, parameter counting and the .ptwf format.

Weight file layout (little-endian)::

    b"PTWF" | u32 version=1 | u64 metadata length | metadata (UTF-8 JSON) | payload

The metadata is an ordered JSON list of ``{name, shape, dtype: "f64", byte_offset}``
entries (plus an optional ``trainable`` flag); offsets are relative to the start
of the payload, which stores each tensor contiguously in C order.
"""

from __future__ import annotations

import json
import os
import re
import struct
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ParseError

MAGIC = b"PTWF"
VERSION = 1

_NORM_RE = re.compile(r"(^|\.)ln[^.]*\.(weight|bias)$")
TASK_PREFIXES = ("adapter.", "head.", "mqcnn.")


class ParamStore:
    """Ordered mapping of unique names to float64 tensors with trainability flags.

    A store built with :meth:`from_module` shares the module's ``Parameter``
    objects, so flipping a flag also flips ``requires_grad``.
    """

    def __init__(self, tensors, trainable=None, rng_seed=None, info=None):
        self.tensors = dict(tensors)
        self.info = dict(info or {})
        if trainable is None:
            trainable = {k: bool(getattr(v, "requires_grad", True)) for k, v in self.tensors.items()}
        missing = set(self.tensors) - set(trainable)
        if missing:
            raise ConfigError(f"no trainable flag for {sorted(missing)}", "trainable")
        self.trainable = {k: bool(trainable[k]) for k in self.tensors}
        self.rng_seed = rng_seed

    @classmethod
    def from_module(cls, module: nn.Module, rng_seed=None):
        named = dict(module.named_parameters())
        return cls(named, {k: v.requires_grad for k, v in named.items()}, rng_seed)

    def names(self):
        return list(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable_names(self):
        return [k for k, v in self.trainable.items() if v]

    def set_trainable(self, name, flag):
        self.trainable[name] = bool(flag)
        t = self.tensors[name]
        if isinstance(t, nn.Parameter):
            t.requires_grad_(bool(flag))

    def subset(self, prefix, strip=False):
        out = {}
        flags = {}
        for k, v in self.tensors.items():
            if k.startswith(prefix):
                key = k[len(prefix):] if strip else k
                out[key] = v
                flags[key] = self.trainable[k]
        return ParamStore(out, flags, self.rng_seed)

    def with_prefix(self, prefix):
        return ParamStore(
            {prefix + k: v for k, v in self.tensors.items()},
            {prefix + k: v for k, v in self.trainable.items()},
            self.rng_seed,
        )

    def snapshot(self):
        """Detached deep copy."""
        return ParamStore(
            {k: v.detach().clone() for k, v in self.tensors.items()}, dict(self.trainable), self.rng_seed
        )

    def bit_equal(self, other, names=None):
        names = self.names() if names is None else names
        for k in names:
            a = self.tensors[k].detach()
            b = other.tensors[k].detach()
            if a.shape != b.shape or not torch.equal(a, b):
                return False
        return True

    def save(self, path):
        save_ptwf(self, path)

    @classmethod
    def load(cls, path):
        return load_ptwf(path)


def load_into(module: nn.Module, store: ParamStore, prefix=""):
    """Copy ``store`` tensors into the module's parameters named ``prefix + name``."""
    params = dict(module.named_parameters())
    with torch.no_grad():
        for name, value in store.items():
            key = prefix + name
            if key not in params:
                raise ConfigError(f"module has no parameter {key!r}", "weights")
            if tuple(params[key].shape) != tuple(value.shape):
                raise ConfigError(
                    f"shape {tuple(value.shape)} does not match parameter {tuple(params[key].shape)}",
                    f"weights.{name}",
                )
            params[key].copy_(torch.as_tensor(value, dtype=params[key].dtype))


# --------------------------------------------------------------------------- #
# Freezing and counting
# --------------------------------------------------------------------------- #


class FreezePolicy(str, Enum):
    ADAPTER_AND_LAYER_NORMS = "adapter_and_layer_norms"
    ADAPTER_ONLY = "adapter_only"  # "fully frozen" backbone
    ALL_TRAINABLE = "all_trainable"


def tensor_role(name):
    """One of ``task``, ``backbone_norm``, ``backbone``."""
    if name.startswith(TASK_PREFIXES):
        return "task"
    if name.startswith("backbone."):
        return "backbone_norm" if _NORM_RE.search(name) else "backbone"
    raise ConfigError(f"unrecognised tensor name {name!r}", "freeze")


def apply_freeze(ps: ParamStore, policy) -> ParamStore:
    policy = FreezePolicy(policy)
    for name in ps.names():
        role = tensor_role(name)
        if policy is FreezePolicy.ALL_TRAINABLE or role == "task":
            flag = True
        elif role == "backbone_norm":
            flag = policy is FreezePolicy.ADAPTER_AND_LAYER_NORMS
        else:
            flag = False
        ps.set_trainable(name, flag)
    return ps


def parameter_count(ps: ParamStore):
    """(total, trainable) element counts."""
    total = trainable = 0
    for name, t in ps.items():
        n = int(t.numel()) if isinstance(t, torch.Tensor) else int(np.asarray(t).size)
        total += n
        if ps.trainable[name]:
            trainable += n
    return total, trainable


# --------------------------------------------------------------------------- #
# .ptwf I/O
# --------------------------------------------------------------------------- #


def encode_ptwf(ps: ParamStore) -> bytes:
    meta = []
    chunks = []
    offset = 0
    for name, t in ps.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        meta.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f64",
                "byte_offset": offset,
                "trainable": ps.trainable[name],
            }
        )
        chunks.append(raw)
        offset += len(raw)
    meta_bytes = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(meta_bytes)) + meta_bytes + b"".join(chunks)


def decode_ptwf(data: bytes, source="<bytes>") -> ParamStore:
    if len(data) < 16 or data[:4] != MAGIC:
        raise ParseError("not a PTWF weight file", source)
    version, meta_len = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ParseError(f"unsupported PTWF version {version}", source)
    try:
        meta = json.loads(data[16 : 16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad metadata: {exc}", source) from None
    payload = memoryview(data)[16 + meta_len :]
    tensors, flags = {}, {}
    for entry in meta:
        if entry.get("dtype") != "f64":
            raise ParseError(f"unsupported dtype {entry.get('dtype')!r}", source)
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        lo = entry["byte_offset"]
        if lo + 8 * n > len(payload):
            raise ParseError(f"tensor {entry['name']!r} runs past end of file", source)
        arr = np.frombuffer(payload[lo : lo + 8 * n], dtype="<f8").reshape(shape)
        if entry["name"] in tensors:
            raise ParseError(f"duplicate tensor {entry['name']!r}", source)
        tensors[entry["name"]] = torch.tensor(arr.copy(), dtype=torch.float64)
        flags[entry["name"]] = bool(entry.get("trainable", True))
    return ParamStore(tensors, flags)


def save_ptwf(ps: ParamStore, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_ptwf(ps))
    os.replace(tmp, path)
    return path


def load_ptwf(path) -> ParamStore:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(str(exc), path) from exc
    return decode_ptwf(data, path)
