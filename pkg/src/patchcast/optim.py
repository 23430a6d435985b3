"""Adam with bias correction and optional global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, TrainingError
from .params import ParamStore


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0

    def validate(self):
        if self.lr < 0:
            raise ConfigError("must be >= 0", "lr")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)", "betas")
        if self.eps <= 0:
            raise ConfigError("must be > 0", "eps")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("must be > 0 or null", "clip_norm")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads):
    total = 0.0
    for g in grads:
        total += float(torch.sum(g * g))
    return math.sqrt(total)


def adam_step(ps: ParamStore, grads: dict, state: AdamState, cfg: AdamConfig):
    """One in-place Adam update of every trainable tensor in ``ps``.

    ``grads`` maps names to gradients (``None`` or absent counts as zero). Tensors
    flagged non-trainable are never touched, whatever their gradient.
    """
    names = ps.trainable_names()
    use = {}
    for name in names:
        g = grads.get(name)
        t = ps[name]
        if g is None:
            g = torch.zeros_like(t)
        elif g.shape != t.shape:
            raise TrainingError(f"gradient shape {tuple(g.shape)} != tensor shape {tuple(t.shape)} for {name}")
        if not torch.all(torch.isfinite(g)):
            raise TrainingError(f"non-finite gradient for tensor {name!r}")
        use[name] = g.detach()

    if cfg.clip_norm is not None:
        norm = global_norm(use.values())
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            use = {k: g * scale for k, g in use.items()}

    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    with torch.no_grad():
        for name, g in use.items():
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = torch.zeros_like(g)
                v = torch.zeros_like(g)
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            state.m[name] = m
            state.v[name] = v
            update = (m / bc1) / (torch.sqrt(v / bc2) + cfg.eps)
            ps[name].sub_(cfg.lr * update)
    return ps, state
