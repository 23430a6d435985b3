"""Forecasting architectures: patch adapter -> (frozen) backbone -> output block,
the adapter-only baselines, and the MQCNN-lite convolutional baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .dataset import ForecastTask, PanelDataset, SupervisedBatch
from .errors import ConfigError, ShapeError
from .nn import (
    DTYPE,
    MLP2,
    DilatedCausalConv1d,
    Linear,
    StackKind,
    TransformerStack,
    init_parameters,
)
from .params import FreezePolicy, ParamStore, apply_freeze, load_into
from .patching import PatchConfig, expand_to_series, multivariate_patch, num_patches

ADAPTER_KINDS = ("linear", "mlp2")
ARCHITECTURES = ("patch", "mqcnn")


@dataclass
class BackboneSpec:
    kind: str = StackKind.DECODER_ONLY.value
    n_layers: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    max_positions: int = 16

    def build(self):
        return TransformerStack(self.kind, self.n_layers, self.d_model, self.heads, self.d_ff, self.max_positions)


@dataclass
class ModelSpec:
    """Everything needed to build a forecaster. ``backbone=None`` is the null decoder.

    Input dimensions (``context_length`` .. ``d_f``) normally come from
    :meth:`for_data`; ``d`` counts time features *excluding* the past target,
    which the model always prepends as channel 0.
    """

    architecture: str = "patch"
    backbone: str | None = StackKind.DECODER_ONLY.value
    adapter: str = "linear"
    output: str = "linear"
    freeze: str = FreezePolicy.ADAPTER_AND_LAYER_NORMS.value
    use_future: bool = True
    expand: bool = False
    window: int = 12
    stride: int = 6
    pad_mode: str = "zero"
    d_llm: int = 64
    n_layers: int = 2
    heads: int = 4
    d_ff: int = 256
    max_positions: int = 16
    adapter_hidden: int | None = None
    output_hidden: int | None = None
    # MQCNN-lite
    conv_channels: int = 32
    kernel_size: int = 2
    dilations: tuple = (1, 2, 4, 8)
    static_hidden: int = 16
    decoder_hidden: int = 64
    head_hidden: int = 16
    # data dimensions
    context_length: int = 24
    n_horizons: int = 4
    n_quantiles: int = 2
    d: int = 6
    m: int = 4
    d_f: int = 2

    def __post_init__(self):
        self.dilations = tuple(int(x) for x in self.dilations)

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"expected one of {ARCHITECTURES}", "model.architecture")
        if self.architecture == "mqcnn":
            if not self.dilations or any(x < 1 for x in self.dilations):
                raise ConfigError("dilations must be positive", "model.dilations")
            if self.kernel_size < 1:
                raise ConfigError("must be >= 1", "model.kernel_size")
            return
        if self.backbone is not None:
            try:
                StackKind(self.backbone)
            except ValueError:
                raise ConfigError(f"unknown backbone {self.backbone!r}", "model.backbone") from None
        for key in ("adapter", "output"):
            if getattr(self, key) not in ADAPTER_KINDS:
                raise ConfigError(f"expected one of {ADAPTER_KINDS}", f"model.{key}")
        try:
            FreezePolicy(self.freeze)
        except ValueError:
            raise ConfigError(f"unknown freeze policy {self.freeze!r}", "model.freeze") from None
        if self.backbone is not None and self.d_llm % self.heads != 0:
            raise ConfigError("d_llm must be divisible by heads", "model.heads")
        p = num_patches(self.context_length, self.patch_config)
        if self.backbone is not None and p > self.max_positions:
            raise ConfigError(f"{p} patches exceed max_positions={self.max_positions}", "model.max_positions")

    @property
    def patch_config(self):
        return PatchConfig(self.window, self.stride, self.pad_mode)

    def backbone_spec(self):
        if self.backbone is None:
            return None
        return BackboneSpec(self.backbone, self.n_layers, self.d_llm, self.heads, self.d_ff, self.max_positions)

    def for_data(self, ds: PanelDataset, task: ForecastTask):
        """Copy with the data dimensions taken from ``ds`` and ``task``."""
        data = self.to_dict()
        data.update(
            context_length=task.context_length,
            n_horizons=len(task.horizons),
            n_quantiles=len(task.quantiles),
            d=ds.d,
            m=ds.m,
            d_f=ds.d_f,
        )
        return ModelSpec.from_dict(data)

    def to_dict(self):
        data = asdict(self)
        data["dilations"] = list(self.dilations)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "model")
        spec = cls(**data)
        spec.validate()
        return spec


@dataclass
class ForecastGrid:
    """B x |H| x |Q| quantile forecasts (model space unless inverted)."""

    values: torch.Tensor

    def numpy(self):
        return self.values.detach().cpu().numpy()


def _block(kind, n_in, hidden, n_out):
    if kind == "linear":
        return Linear(n_in, n_out)
    return MLP2(n_in, hidden, n_out, activation="relu")


def batch_tensors(batch: SupervisedBatch):
    as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=DTYPE)  # noqa: E731
    return (
        as_t(batch.past_target),
        as_t(batch.past_time_feats),
        as_t(batch.statics),
        as_t(batch.future_feats),
    )


class Forecaster(nn.Module):
    """Common surface of all forecasting models."""

    spec: ModelSpec

    def param_store(self):
        return ParamStore.from_module(self)

    def forward_batch(self, batch: SupervisedBatch) -> torch.Tensor:
        return self(*batch_tensors(batch))


class PatchForecaster(Forecaster):
    """Multivariate patching -> adapter -> [positions + backbone] -> output block."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.patch_cfg = spec.patch_config
        self.p = num_patches(spec.context_length, self.patch_cfg)
        width = spec.window * (1 + spec.d + spec.m)
        self.adapter = _block(spec.adapter, width, spec.adapter_hidden or spec.d_llm, spec.d_llm)
        bspec = spec.backbone_spec()
        self.backbone = bspec.build() if bspec is not None else None
        steps = spec.context_length if spec.expand else self.p
        head_in = steps * spec.d_llm + (spec.n_horizons * spec.d_f if spec.use_future else 0)
        self.head = _block(spec.output, head_in, spec.output_hidden or spec.d_llm, spec.n_horizons * spec.n_quantiles)

    def embed(self, past_target, past_time_feats, statics):
        if past_target.shape[1] != self.spec.context_length:
            raise ShapeError(f"context length {past_target.shape[1]} != {self.spec.context_length}")
        series = torch.cat([past_target[:, :, None], past_time_feats], dim=2)
        pt = multivariate_patch(series, statics, self.patch_cfg)
        return self.adapter(pt.patches)

    def hidden(self, past_target, past_time_feats, statics):
        h = self.embed(past_target, past_time_feats, statics)
        if self.backbone is not None:
            h = self.backbone(h)
        if self.spec.expand:
            h = expand_to_series(h, self.spec.context_length, self.patch_cfg)
        return h

    def forward(self, past_target, past_time_feats, statics, future_feats):
        h = self.hidden(past_target, past_time_feats, statics)
        b = h.shape[0]
        flat = h.reshape(b, -1)
        if self.spec.use_future:
            flat = torch.cat([flat, future_feats.reshape(b, -1)], dim=1)
        return self.head(flat).reshape(b, self.spec.n_horizons, self.spec.n_quantiles)


class MqcnnLite(Forecaster):
    """Dilated causal conv encoder read at the FCD position, linear static encoder,
    a horizon-agnostic MLP and one small MLP head per horizon."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        mq = nn.Module()
        channels = 1 + spec.d
        convs = []
        for dil in spec.dilations:
            convs.append(DilatedCausalConv1d(channels, spec.conv_channels, spec.kernel_size, dil))
            channels = spec.conv_channels
        mq.convs = nn.ModuleList(convs)
        mq.static_enc = Linear(spec.m, spec.static_hidden) if spec.m > 0 else None
        enc_width = spec.conv_channels + (spec.static_hidden if spec.m > 0 else 0)
        mq.global_mlp = MLP2(enc_width, spec.decoder_hidden, spec.decoder_hidden)
        head_in = spec.decoder_hidden + (spec.d_f if spec.use_future else 0)
        mq.heads = nn.ModuleList(
            MLP2(head_in, spec.head_hidden, spec.n_quantiles) for _ in range(spec.n_horizons)
        )
        self.mqcnn = mq

    @property
    def receptive_field(self):
        return sum(c.receptive_field for c in self.mqcnn.convs)

    def encode(self, past_target, past_time_feats):
        """Historic encoding at the last context position, B x conv_channels."""
        x = torch.cat([past_target[:, :, None], past_time_feats], dim=2)
        n = len(self.mqcnn.convs)
        for i, conv in enumerate(self.mqcnn.convs):
            x = conv(x)
            if i < n - 1:
                x = torch.relu(x)
        return x[:, -1, :]

    def forward(self, past_target, past_time_feats, statics, future_feats):
        enc = self.encode(past_target, past_time_feats)
        if self.mqcnn.static_enc is not None:
            enc = torch.cat([enc, self.mqcnn.static_enc(statics)], dim=1)
        ctx = self.mqcnn.global_mlp(enc)
        outs = []
        for h, head in enumerate(self.mqcnn.heads):
            z = ctx
            if self.spec.use_future:
                z = torch.cat([ctx, future_feats[:, h, :]], dim=1)
            outs.append(head(z))
        return torch.stack(outs, dim=1)


def build_mqcnn_lite(spec: ModelSpec, seed=0) -> MqcnnLite:
    if spec.architecture != "mqcnn":
        spec = ModelSpec.from_dict({**spec.to_dict(), "architecture": "mqcnn"})
    spec.validate()
    model = MqcnnLite(spec)
    init_parameters(model, seed)
    return model


def load_backbone(model: nn.Module, weights: ParamStore):
    """Copy every backbone tensor the model owns from ``weights`` (which may hold
    more, e.g. a full encoder-decoder checkpoint feeding an encoder-only model)."""
    own = [k for k, _ in model.named_parameters() if k.startswith("backbone.")]
    missing = [k for k in own if k not in weights]
    if missing:
        raise ConfigError(f"weights lack backbone tensors {missing[:3]}...", "weights")
    load_into(model, ParamStore({k: weights[k] for k in own}, {k: False for k in own}))


def build_model(spec: ModelSpec, backbone_weights: ParamStore | None = None, seed=0) -> Forecaster:
    """Instantiate, initialise (seeded), load backbone weights and apply the freeze policy."""
    spec.validate()
    if spec.architecture == "mqcnn":
        return build_mqcnn_lite(spec, seed)
    model = PatchForecaster(spec)
    init_parameters(model, seed)
    if backbone_weights is not None:
        if model.backbone is None:
            raise ConfigError("backbone weights given for a model without backbone", "weights")
        load_backbone(model, backbone_weights)
    apply_freeze(model.param_store(), spec.freeze)
    return model


def forward_forecast(model: Forecaster, batch: SupervisedBatch) -> ForecastGrid:
    return ForecastGrid(model.forward_batch(batch))


# Named configurations used by the experiment suite.
CANONICAL_SPECS = {
    "linear_only": dict(backbone=None, adapter="linear", output="linear", expand=True),
    "mlp_only": dict(backbone=None, adapter="mlp2", output="mlp2"),
    "no_decoder": dict(backbone=None, adapter="linear", output="linear"),
    "fpt_ln_linear": dict(backbone="decoder_only", adapter="linear", output="linear", freeze="adapter_and_layer_norms"),
    "fpt_ln_mlp": dict(backbone="decoder_only", adapter="mlp2", output="mlp2", freeze="adapter_and_layer_norms"),
    "fpt_frozen_linear": dict(backbone="decoder_only", adapter="linear", output="linear", freeze="adapter_only"),
    "mqcnn_lite": dict(architecture="mqcnn", backbone=None),
}


def canonical_spec(name, **overrides) -> ModelSpec:
    try:
        base = dict(CANONICAL_SPECS[name])
    except KeyError:
        raise ConfigError(f"unknown canonical model {name!r}", "model") from None
    base.update(overrides)
    return ModelSpec.from_dict(base)
