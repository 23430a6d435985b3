"""Dense building blocks in float64 torch.

Each layer has a functional form (``*_fwd``) that takes its tensors explicitly,
and a thin ``nn.Module`` wrapper that owns them. Reverse-mode gradients come
from torch autograd.
"""

from __future__ import annotations

import math
from enum import Enum

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

DTYPE = torch.float64
LN_EPS = 1e-5
INIT_STD = 0.02

ACTIVATIONS = {
    "relu": F.relu,
    "gelu": F.gelu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


def _activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}", "activation") from None


# --------------------------------------------------------------------------- #
# Functional forms
# --------------------------------------------------------------------------- #


def linear_fwd(weight, bias, x):
    """y = x W^T + b with W of shape k_out x k_in."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    y = torch.matmul(x, weight.transpose(0, 1))
    return y if bias is None else y + bias


def mlp2_fwd(w1, b1, w2, b2, x, activation="relu"):
    return linear_fwd(w2, b2, _activation(activation)(linear_fwd(w1, b1, x)))


def layer_norm_fwd(gamma, beta, x, eps=LN_EPS):
    k = x.shape[-1]
    if k < 2:
        raise ShapeError("layer norm needs at least two features")
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ShapeError(f"gamma/beta must have shape ({k},)")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gamma + beta


def causal_mask(p_q, p_kv, device=None):
    """True where the key index exceeds the query index (masked out)."""
    q = torch.arange(p_q, device=device)[:, None]
    k = torch.arange(p_kv, device=device)[None, :]
    return k > q


def mha_fwd(params, x_q, x_kv, heads, causal=False):
    """Multi-head scaled dot-product attention.

    ``params`` maps ``q_weight, q_bias, k_weight, ... o_bias`` to tensors.
    """
    d = x_q.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"hidden size {d} not divisible by {heads} heads", "heads")
    if x_kv.shape[-1] != d or x_kv.shape[0] != x_q.shape[0]:
        raise ShapeError(f"query {tuple(x_q.shape)} and key/value {tuple(x_kv.shape)} disagree")
    b, p_q, _ = x_q.shape
    p_kv = x_kv.shape[1]
    dh = d // heads

    def split(t, p):
        return t.reshape(b, p, heads, dh).transpose(1, 2)

    q = split(linear_fwd(params["q_weight"], params["q_bias"], x_q), p_q)
    k = split(linear_fwd(params["k_weight"], params["k_bias"], x_kv), p_kv)
    v = split(linear_fwd(params["v_weight"], params["v_bias"], x_kv), p_kv)
    scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
    if causal:
        scores = scores.masked_fill(causal_mask(p_q, p_kv, scores.device), float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    ctx = torch.matmul(attn, v).transpose(1, 2).reshape(b, p_q, d)
    return linear_fwd(params["o_weight"], params["o_bias"], ctx)


def dilated_causal_conv1d_fwd(weight, bias, x, dilation=1):
    """Causal dilated convolution over time.

    ``weight`` is k_c x d_in x d_out; tap ``j`` reads time ``t - (k_c - 1 - j) * dilation``
    (zero before the series start). ``x`` is B x C x d_in.
    """
    if dilation < 1:
        raise ConfigError("dilation must be >= 1", "dilation")
    if weight.ndim != 3 or x.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError(f"input {tuple(x.shape)} does not match kernel {tuple(weight.shape)}")
    kc = weight.shape[0]
    c = x.shape[1]
    pad = (kc - 1) * dilation
    xp = torch.cat([x.new_zeros((x.shape[0], pad, x.shape[2])), x], dim=1)
    out = None
    for j in range(kc):
        start = j * dilation
        term = torch.matmul(xp[:, start : start + c, :], weight[j])
        out = term if out is None else out + term
    return out if bias is None else out + bias


# --------------------------------------------------------------------------- #
# Modules
# --------------------------------------------------------------------------- #


class Linear(nn.Module):
    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.zeros(out_features, in_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE)) if bias else None

    def forward(self, x):
        return linear_fwd(self.weight, self.bias, x)


class MLP2(nn.Module):
    """Two affine maps with one nonlinearity between them."""

    def __init__(self, in_features, hidden, out_features, activation="relu"):
        super().__init__()
        _activation(activation)
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.fc1 = Linear(in_features, hidden)
        self.fc2 = Linear(hidden, out_features)

    def forward(self, x):
        return mlp2_fwd(self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias, x, self.activation)


class LayerNorm(nn.Module):
    def __init__(self, k):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(k, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(k, dtype=DTYPE))

    def forward(self, x):
        return layer_norm_fwd(self.weight, self.bias, x)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        if d_model % heads != 0:
            raise ConfigError(f"hidden size {d_model} not divisible by {heads} heads", "heads")
        self.heads = heads
        self.q = Linear(d_model, d_model)
        self.k = Linear(d_model, d_model)
        self.v = Linear(d_model, d_model)
        self.o = Linear(d_model, d_model)

    def tensors(self):
        return {
            f"{n}_{kind}": getattr(getattr(self, n), kind)
            for n in ("q", "k", "v", "o")
            for kind in ("weight", "bias")
        }

    def forward(self, x_q, x_kv=None, causal=False):
        if x_kv is None:
            x_kv = x_q
        elif causal:
            raise ConfigError("causal masking applies to self-attention only", "mask")
        return mha_fwd(self.tensors(), x_q, x_kv, self.heads, causal=causal)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + Attn(LN(x)) [+ CrossAttn(LN(.), ctx)] + MLP(LN(.))."""

    def __init__(self, d_model, heads, d_ff, causal=False, cross=False):
        super().__init__()
        self.causal = causal
        self.cross = cross
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        if cross:
            self.ln_cross = LayerNorm(d_model)
            self.cross_attn = MultiHeadAttention(d_model, heads)
        self.ln2 = LayerNorm(d_model)
        self.mlp = MLP2(d_model, d_ff, d_model, activation="gelu")

    def forward(self, x, context=None):
        if self.cross and context is None:
            raise ConfigError("cross-attention block needs a context", "context")
        if not self.cross and context is not None:
            raise ConfigError("block has no cross-attention; context not accepted", "context")
        x = x + self.attn(self.ln1(x), causal=self.causal)
        if self.cross:
            x = x + self.cross_attn(self.ln_cross(x), context)
        return x + self.mlp(self.ln2(x))


class BlockStack(nn.Module):
    """Sequence of blocks followed by a final layer norm (omitted for zero blocks,
    so an empty stack is exactly the identity)."""

    def __init__(self, n_layers, d_model, heads, d_ff, causal, cross):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(d_model, heads, d_ff, causal=causal, cross=cross) for _ in range(n_layers)
        )
        self.ln_f = LayerNorm(d_model) if n_layers > 0 else None

    def forward(self, x, context=None):
        for block in self.blocks:
            x = block(x, context)
        return x if self.ln_f is None else self.ln_f(x)


class StackKind(str, Enum):
    DECODER_ONLY = "decoder_only"
    ENCODER_ONLY = "encoder_only"
    ENCODER_DECODER = "encoder_decoder"
    DECODER_OF_ENC_DEC = "decoder_of_enc_dec"


class TransformerStack(nn.Module):
    """Backbone with a learned positional table.

    * decoder_only: causal self-attention blocks (``decoder.*``)
    * encoder_only: bidirectional blocks (``encoder.*``)
    * encoder_decoder: encoder over the tokens, decoder with causal self-attention
      plus cross-attention to the encoder output
    * decoder_of_enc_dec: the decoder half alone, cross-attending to its own inputs
    """

    def __init__(self, kind, n_layers, d_model, heads, d_ff, max_positions):
        super().__init__()
        self.kind = StackKind(kind)
        self.d_model = d_model
        self.max_positions = max_positions
        self.pos_emb = nn.Parameter(torch.zeros(max_positions, d_model, dtype=DTYPE))
        k = self.kind
        if k in (StackKind.ENCODER_ONLY, StackKind.ENCODER_DECODER):
            self.encoder = BlockStack(n_layers, d_model, heads, d_ff, causal=False, cross=False)
        if k in (StackKind.DECODER_ONLY, StackKind.ENCODER_DECODER, StackKind.DECODER_OF_ENC_DEC):
            cross = k is not StackKind.DECODER_ONLY
            self.decoder = BlockStack(n_layers, d_model, heads, d_ff, causal=True, cross=cross)

    def add_positions(self, x):
        p = x.shape[1]
        if p > self.max_positions:
            raise ShapeError(f"{p} tokens exceed positional table of {self.max_positions}")
        return x + self.pos_emb[:p]

    def run(self, h, dec_input=None):
        """Run on position-embedded tokens. ``dec_input`` lets encoder-decoder
        callers feed the decoder a different sequence than the encoder."""
        k = self.kind
        if k is StackKind.DECODER_ONLY:
            return self.decoder(h)
        if k is StackKind.ENCODER_ONLY:
            return self.encoder(h)
        if k is StackKind.DECODER_OF_ENC_DEC:
            return self.decoder(h, context=h)
        enc = self.encoder(h)
        return self.decoder(h if dec_input is None else dec_input, context=enc)

    def forward(self, x):
        return self.run(self.add_positions(x))


class DilatedCausalConv1d(nn.Module):
    def __init__(self, in_features, out_features, kernel_size=2, dilation=1):
        super().__init__()
        if kernel_size < 1:
            raise ConfigError("kernel size must be >= 1", "kernel_size")
        if dilation < 1:
            raise ConfigError("dilation must be >= 1", "dilation")
        self.dilation = dilation
        self.weight = nn.Parameter(torch.zeros(kernel_size, in_features, out_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE))

    @property
    def receptive_field(self):
        return (self.weight.shape[0] - 1) * self.dilation

    def forward(self, x):
        return dilated_causal_conv1d_fwd(self.weight, self.bias, x, self.dilation)


def init_parameters(module: nn.Module, seed: int):
    """Deterministic init in parameter-name order: layer norms to ones/zeros,
    biases to zero, everything else normal(0, 0.02)."""
    gen = torch.Generator().manual_seed(int(seed) % (2**63))
    norm_params = set()
    for mod in module.modules():
        if isinstance(mod, LayerNorm):
            norm_params.add(id(mod.weight))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if id(p) in norm_params:
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * INIT_STD)
    return module
