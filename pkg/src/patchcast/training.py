"""Quantile loss, the training loop and quantile-weighted-error evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dataset import ForecastTask, PanelDataset, Preprocessor, make_batches
from .errors import ConfigError, EvaluationError, ShapeError, TrainingError
from .models import ForecastGrid, Forecaster, batch_tensors
from .optim import AdamConfig, AdamState, adam_step
from .params import ParamStore, load_into, save_ptwf
from .utils import derive_seed

log = logging.getLogger(__name__)


def quantile_label(tau):
    return f"P{tau * 100:g}"


def quantile_loss(y, y_hat, tau):
    """Pinball loss ``(tau - 1[y < y_hat]) * (y - y_hat)``; works elementwise on
    floats, numpy arrays and torch tensors."""
    if isinstance(y, torch.Tensor) or isinstance(y_hat, torch.Tensor):
        diff = y - y_hat
        return torch.where(diff < 0, (tau - 1.0) * diff, tau * diff)
    diff = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    out = np.where(diff < 0, (tau - 1.0) * diff, tau * diff)
    return float(out) if out.ndim == 0 else out


def batch_loss(grid, labels, quantiles):
    """Sum of pinball losses over rows, horizons and quantiles (B x H x Q vs B x H)."""
    values = grid.values if isinstance(grid, ForecastGrid) else grid
    labels = torch.as_tensor(labels, dtype=values.dtype)
    if values.ndim != 3 or labels.shape != values.shape[:2] or values.shape[2] != len(quantiles):
        raise ShapeError(f"grid {tuple(values.shape)} vs labels {tuple(labels.shape)} / {len(quantiles)} quantiles")
    taus = torch.as_tensor(quantiles, dtype=values.dtype)
    diff = labels[:, :, None] - values
    return torch.where(diff < 0, (taus - 1.0) * diff, taus * diff).sum()


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    seed: int = 0
    checkpoint_every: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "train.epochs")
        if self.lr < 0:
            raise ConfigError("must be >= 0", "train.lr")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if self.checkpoint_every < 1:
            raise ConfigError("must be >= 1", "train.checkpoint_every")
        self.adam().validate()

    def adam(self):
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps, self.clip_norm)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "train")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_qwe: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _grads(ps: ParamStore):
    return {k: t.grad for k, t in ps.items() if ps.trainable[k]}


def train(
    model: Forecaster,
    ds: PanelDataset,
    task: ForecastTask,
    cfg: TrainConfig,
    eval_task: ForecastTask | None = None,
    pre: Preprocessor | None = None,
    checkpoint_dir=None,
) -> TrainHistory:
    """Fit the trainable tensors of ``model`` on ``ds`` (already preprocessed).

    Each epoch records the mean per-cell training pinball loss, test QWE on
    ``eval_task`` (if given) and, at the checkpoint cadence, ``epoch_<k>.ptwf``.
    A non-finite loss restores the last good weights and raises ``TrainingError``.
    """
    cfg.validate()
    task.validate(ds.n_periods)
    ps = model.param_store()
    state = AdamState()
    adam = cfg.adam()
    history = TrainHistory()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    n_q = len(task.quantiles)

    for epoch in range(1, cfg.epochs + 1):
        last_good = ps.snapshot()
        batches = make_batches(ds, task, cfg.batch_size, derive_seed(cfg.seed, "epoch", epoch))
        total, cells = 0.0, 0
        model.train()
        for batch in batches:
            grid = model(*batch_tensors(batch))
            loss = batch_loss(grid, batch.labels, task.quantiles)
            value = float(loss.detach())
            if not math.isfinite(value):
                load_into(model, last_good)
                if ckpt_dir is not None:
                    save_ptwf(model.param_store(), ckpt_dir / "last_good.ptwf")
                err = TrainingError(f"non-finite loss in epoch {epoch}")
                err.history = history
                raise err
            model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(ps, _grads(ps), state, adam)
            total += value
            cells += batch.labels.size * n_q
        history.epochs.append(epoch)
        history.train_loss.append(total / cells)
        if eval_task is not None:
            report = evaluate(model, ds, eval_task, pre=pre)
            history.test_qwe.append(dict(report.qwe))
        else:
            history.test_qwe.append(None)
        ckpt = None
        if ckpt_dir is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            ckpt = str(save_ptwf(model.param_store(), ckpt_dir / f"epoch_{epoch}.ptwf"))
        history.checkpoints.append(ckpt)
        log.info(
            "epoch %d train_loss %.5f test %s", epoch, history.train_loss[-1], history.test_qwe[-1]
        )
    return history


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #


@dataclass
class EvalReport:
    qwe: dict
    per_horizon: dict
    crossing_rate: float
    n_cells: int
    ratios: dict | None = None
    baseline: str | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def with_baseline(self, baseline: "EvalReport", name="baseline"):
        return EvalReport(
            self.qwe, self.per_horizon, self.crossing_rate, self.n_cells, qwe_ratios(self, baseline), name
        )


def qwe_ratios(report: EvalReport, baseline: EvalReport):
    """Per-quantile QWE ratio; ``None`` where the baseline QWE is zero."""
    out = {}
    for key, value in report.qwe.items():
        base = baseline.qwe.get(key)
        out[key] = value / base if base else None
    return out


def predict(model: Forecaster, ds: PanelDataset, task: ForecastTask, batch_size=512):
    """Model-space forecasts and labels in canonical (series, FCD) order."""
    batches = make_batches(ds, task, batch_size, shuffle_seed=None)
    preds, labels = [], []
    model.eval()
    with torch.no_grad():
        for batch in batches:
            preds.append(model(*batch_tensors(batch)).numpy())
            labels.append(batch.labels)
    return np.concatenate(preds), np.concatenate(labels)


def qwe_from_arrays(y, y_hat, quantiles, horizons):
    """Quantile-weighted errors of forecasts ``y_hat`` (n x H x Q) for labels ``y`` (n x H)."""
    if y.size == 0:
        raise EvaluationError("empty test set")
    denom = float(np.abs(y).sum())
    if denom == 0.0:
        raise EvaluationError("sum of |y| over the test set is zero")
    qwe, per_h = {}, {}
    for k, tau in enumerate(quantiles):
        loss = quantile_loss(y, y_hat[:, :, k], tau)
        qwe[quantile_label(tau)] = float(loss.sum()) / denom
    for j, h in enumerate(horizons):
        d_h = float(np.abs(y[:, j]).sum())
        per_h[str(h)] = {
            quantile_label(tau): (float(quantile_loss(y[:, j], y_hat[:, j, k], tau).sum()) / d_h if d_h else None)
            for k, tau in enumerate(quantiles)
        }
    if y_hat.shape[2] > 1:
        order = np.argsort(quantiles)
        ordered = y_hat[:, :, order]
        crossing = float(np.mean(np.any(np.diff(ordered, axis=2) < 0, axis=2)))
    else:
        crossing = 0.0
    return qwe, per_h, crossing


def evaluate(
    model: Forecaster,
    ds_test: PanelDataset,
    task: ForecastTask,
    pre: Preprocessor | None = None,
    baseline_report: EvalReport | None = None,
    baseline_name="baseline",
    batch_size=512,
) -> EvalReport:
    """QWE_tau = sum pinball_tau(y, y_hat) / sum |y| in original target units."""
    task.validate(ds_test.n_periods)
    z_hat, z = predict(model, ds_test, task, batch_size)
    if pre is not None:
        y_hat, y = pre.inverse_target(z_hat), pre.inverse_target(z)
    else:
        y_hat, y = z_hat, z
    qwe, per_h, crossing = qwe_from_arrays(y, y_hat, task.quantiles, task.horizons)
    report = EvalReport(qwe, per_h, crossing, int(y.size))
    if baseline_report is not None:
        report = report.with_baseline(baseline_report, baseline_name)
    return report
