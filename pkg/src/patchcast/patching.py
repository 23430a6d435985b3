"""Multivariate patching: Concat -> pad -> strided windows -> flatten.

Statics are replicated onto every time step, ``s`` rows of padding are prepended
along time, and windows of ``w`` rows start at padded positions ``0, s, 2s, ...``.
Inside a patch values are laid out time-major then feature-major, i.e. element
``(slot, f)`` of a window lands at flat index ``slot * (d + m) + f``.

All functions accept numpy arrays or torch tensors and return the same kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError

PAD_MODES = ("zero", "repeat")


@dataclass(frozen=True)
class PatchConfig:
    window: int = 12
    stride: int = 6
    pad_mode: str = "zero"

    def __post_init__(self):
        if self.stride < 1 or self.window < 1:
            raise ConfigError("window and stride must be positive", "patch")
        if self.stride > self.window:
            raise ConfigError("stride must not exceed window (no gaps)", "patch.stride")
        if self.pad_mode not in PAD_MODES:
            raise ConfigError(f"expected one of {PAD_MODES}", "patch.pad_mode")


@dataclass
class PatchedTensor:
    patches: object  # B x p x w*(d+m)
    num_patches: int
    source_shape: tuple  # (B, C, d, m)


@dataclass
class EmbeddedPatches:
    hidden: object  # B x p x d_llm


def num_patches(context_length: int, cfg: PatchConfig) -> int:
    c, w, s = context_length, cfg.window, cfg.stride
    if c + s < w:
        raise ShapeError(f"context {c} padded by stride {s} is shorter than window {w}")
    return (c + s - w) // s + 1


def window_index(context_length: int, cfg: PatchConfig) -> np.ndarray:
    """Padded time positions gathered by each patch, shape p x w."""
    p = num_patches(context_length, cfg)
    return np.arange(p)[:, None] * cfg.stride + np.arange(cfg.window)[None, :]


def _is_torch(x):
    return isinstance(x, torch.Tensor)


def multivariate_patch(past_time_feats, statics, cfg: PatchConfig) -> PatchedTensor:
    """B x C x d time features and B x m statics -> B x p x w(d+m) patches."""
    if past_time_feats.ndim != 3:
        raise ShapeError(f"time features must be B x C x d, got {tuple(past_time_feats.shape)}")
    b, c, d = past_time_feats.shape
    if statics.ndim != 2 or statics.shape[0] != b:
        raise ShapeError(f"statics must be {b} x m, got {tuple(statics.shape)}")
    m = statics.shape[1]
    idx = window_index(c, cfg)
    p = idx.shape[0]
    s = cfg.stride

    if _is_torch(past_time_feats):
        statics = torch.as_tensor(statics, dtype=past_time_feats.dtype)
        rep = statics[:, None, :].expand(b, c, m)
        joined = torch.cat([past_time_feats, rep], dim=2)
        if cfg.pad_mode == "zero":
            pad = joined.new_zeros((b, s, d + m))
        else:
            pad = joined[:, :1, :].expand(b, s, d + m)
        padded = torch.cat([pad, joined], dim=1)
        out = padded[:, torch.as_tensor(idx), :].reshape(b, p, cfg.window * (d + m))
    else:
        past_time_feats = np.asarray(past_time_feats, dtype=np.float64)
        statics = np.asarray(statics, dtype=np.float64)
        rep = np.broadcast_to(statics[:, None, :], (b, c, m))
        joined = np.concatenate([past_time_feats, rep], axis=2)
        if cfg.pad_mode == "zero":
            pad = np.zeros((b, s, d + m))
        else:
            pad = np.repeat(joined[:, :1, :], s, axis=1)
        padded = np.concatenate([pad, joined], axis=1)
        out = padded[:, idx, :].reshape(b, p, cfg.window * (d + m))
    return PatchedTensor(out, p, (b, c, d, m))


def embed_patches(pt: PatchedTensor, adapter) -> EmbeddedPatches:
    """Apply ``adapter`` (any module mapping the last axis) to every patch position."""
    x = pt.patches
    if not _is_torch(x):
        x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    in_features = getattr(adapter, "in_features", None)
    if in_features is not None and in_features != x.shape[-1]:
        raise ShapeError(f"adapter expects width {in_features}, patches have width {x.shape[-1]}")
    return EmbeddedPatches(adapter(x))


def expansion_index(context_length: int, cfg: PatchConfig) -> np.ndarray:
    """For each source index t' the last patch whose window covers padded position t' + s.

    Trailing positions left uncovered when ``(C + s - w) % s != 0`` take the final patch.
    """
    p = num_patches(context_length, cfg)
    q = np.arange(context_length) + cfg.stride
    return np.minimum(q // cfg.stride, p - 1)


def expand_to_series(x, context_length: int, cfg: PatchConfig):
    """B x p x k -> B x C x k by last-covering-patch assignment."""
    p = num_patches(context_length, cfg)
    if x.ndim != 3 or x.shape[1] != p:
        raise ShapeError(f"expected B x {p} x k for C={context_length}, got {tuple(x.shape)}")
    idx = expansion_index(context_length, cfg)
    if _is_torch(x):
        return x[:, torch.as_tensor(idx), :]
    return np.asarray(x)[:, idx, :]
