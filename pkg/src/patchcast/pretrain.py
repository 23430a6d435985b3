"""Toy next-token pretraining that produces frozen backbone weights.

Sequences come from an order-2 Markov chain over a small vocabulary. A
throwaway token embedding and softmax head surround the backbone during
training and are dropped afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, TrainingError
from .models import BackboneSpec
from .nn import DTYPE, Linear, StackKind, init_parameters
from .optim import AdamConfig, AdamState, adam_step
from .params import ParamStore

log = logging.getLogger(__name__)

CHAINS = ("random", "repeat")


@dataclass
class ToyLmConfig:
    vocab: int = 16
    seq_len: int = 16
    order: int = 2
    transition_seed: int = 0
    chain: str = "random"
    concentration: float = 0.2
    steps: int = 300
    lr: float = 3e-3
    batch_size: int = 32
    eval_sequences: int = 512

    def validate(self):
        if self.vocab < 2:
            raise ConfigError("must be >= 2", "pretrain.vocab")
        if self.seq_len < 2:
            raise ConfigError("must be >= 2", "pretrain.seq_len")
        if self.order != 2:
            raise ConfigError("only order-2 chains are supported", "pretrain.order")
        if self.chain not in CHAINS:
            raise ConfigError(f"expected one of {CHAINS}", "pretrain.chain")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1", "pretrain")
        if self.lr <= 0:
            raise ConfigError("must be > 0", "pretrain.lr")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "pretrain")
        return cls(**data)


class MarkovChain:
    """Order-2 chain: ``P[a, b]`` is the distribution of the token following ``a, b``."""

    def __init__(self, cfg: ToyLmConfig):
        v = cfg.vocab
        if cfg.chain == "repeat":
            table = np.zeros((v, v, v))
            table[:, np.arange(v), np.arange(v)] = 1.0
        else:
            rng = np.random.default_rng(cfg.transition_seed)
            table = rng.dirichlet(np.full(v, cfg.concentration), size=(v, v))
        self.table = table
        self.cdf = np.cumsum(table, axis=2)
        self.cdf[..., -1] = 1.0
        self.vocab = v

    def sample(self, n, length, rng):
        out = np.empty((n, length), dtype=np.int64)
        out[:, 0] = rng.integers(0, self.vocab, n)
        if length > 1:
            # the second token continues the chain from the pair (x0, x0)
            u = rng.random(n)
            out[:, 1] = (u[:, None] > self.cdf[out[:, 0], out[:, 0]]).sum(axis=1)
        for t in range(2, length):
            u = rng.random(n)
            out[:, t] = (u[:, None] > self.cdf[out[:, t - 2], out[:, t - 1]]).sum(axis=1)
        return out


def unigram_entropy(tokens, vocab):
    counts = np.bincount(tokens.ravel(), minlength=vocab).astype(np.float64)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


class ToyLm(nn.Module):
    def __init__(self, backbone_spec: BackboneSpec, vocab):
        super().__init__()
        self.backbone = backbone_spec.build()
        self.tok_emb = nn.Parameter(torch.zeros(vocab, backbone_spec.d_model, dtype=DTYPE))
        self.lm_head = Linear(backbone_spec.d_model, vocab)

    def logits(self, tokens):
        """Returns (logits, targets) for next-token prediction."""
        bb = self.backbone
        if bb.kind is StackKind.ENCODER_DECODER:
            mid = tokens.shape[1] // 2
            enc = bb.add_positions(self.tok_emb[tokens[:, :mid]])
            dec = bb.add_positions(self.tok_emb[tokens[:, mid - 1 : -1]])
            h = bb.run(enc, dec_input=dec)
            return self.lm_head(h), tokens[:, mid:]
        h = bb(self.tok_emb[tokens[:, :-1]])
        return self.lm_head(h), tokens[:, 1:]


def _loss_and_acc(model, tokens):
    logits, targets = model.logits(tokens)
    v = logits.shape[-1]
    loss = F.cross_entropy(logits.reshape(-1, v), targets.reshape(-1))
    acc = (logits.argmax(dim=-1) == targets).double().mean()
    return loss, float(acc)


def pretrain_toy_lm(cfg: ToyLmConfig, stack_spec: BackboneSpec, seed: int) -> ParamStore:
    """Train ``stack_spec`` on next-token prediction and return its tensors
    (named ``backbone.*``). Statistics land in ``store.info``."""
    cfg.validate()
    kind = StackKind(stack_spec.kind)
    if kind not in (StackKind.DECODER_ONLY, StackKind.ENCODER_DECODER):
        raise ConfigError("pretraining needs a decoder_only or encoder_decoder stack", "backbone.kind")
    positions = cfg.seq_len - 1 if kind is StackKind.DECODER_ONLY else cfg.seq_len - cfg.seq_len // 2
    if positions > stack_spec.max_positions:
        raise ConfigError(f"sequence needs {positions} positions > max_positions", "pretrain.seq_len")
    if kind is StackKind.ENCODER_DECODER and cfg.seq_len < 4:
        raise ConfigError("encoder-decoder pretraining needs seq_len >= 4", "pretrain.seq_len")

    chain = MarkovChain(cfg)
    rng = np.random.default_rng(seed)
    model = ToyLm(stack_spec, cfg.vocab)
    init_parameters(model, seed)
    ps = ParamStore.from_module(model)
    adam = AdamConfig(lr=cfg.lr)
    state = AdamState()

    for step in range(cfg.steps):
        tokens = torch.as_tensor(chain.sample(cfg.batch_size, cfg.seq_len, rng))
        loss, _ = _loss_and_acc(model, tokens)
        if not math.isfinite(float(loss.detach())):
            raise TrainingError(f"pretraining diverged at step {step}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        adam_step(ps, {k: v.grad for k, v in ps.items()}, state, adam)
        if step % 100 == 0:
            log.debug("pretrain step %d loss %.4f", step, float(loss.detach()))

    eval_tokens = chain.sample(cfg.eval_sequences, cfg.seq_len, np.random.default_rng([seed, 1]))
    with torch.no_grad():
        loss, acc = _loss_and_acc(model, torch.as_tensor(eval_tokens))
    final = float(loss)
    baseline = unigram_entropy(eval_tokens, cfg.vocab)
    if not math.isfinite(final):
        raise TrainingError("pretraining produced a non-finite loss")
    if not final < baseline:
        raise TrainingError(f"pretraining loss {final:.4f} did not beat unigram entropy {baseline:.4f}")

    tensors = {k: v.detach().clone() for k, v in model.named_parameters() if k.startswith("backbone.")}
    info = {
        "final_cross_entropy": final,
        "unigram_entropy": baseline,
        "next_token_accuracy": acc,
        "steps": cfg.steps,
        "seed": int(seed),
        "backbone": asdict(stack_spec),
    }
    return ParamStore(tensors, {k: False for k in tensors}, rng_seed=seed, info=info)
