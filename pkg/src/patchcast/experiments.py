"""Seeded experiment suites comparing baselines against frozen-backbone variants."""

from __future__ import annotations

import csv
import io
import logging
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import ForecastTask, Preprocessor, SyntheticConfig, generate_panel, split_task
from .errors import ConfigError, PatchcastError
from .htsr import DEFAULT_KS_THRESHOLD, diagnose
from .models import BackboneSpec, ModelSpec, build_model, canonical_spec
from .params import load_ptwf, parameter_count
from .pretrain import ToyLmConfig, pretrain_toy_lm
from .training import TrainConfig, evaluate, qwe_ratios, quantile_label, train
from .utils import atomic_write_text, derive_seed, dumps

log = logging.getLogger(__name__)

CANONICAL_RUNS = ("linear_only", "mlp_only", "no_decoder", "fpt_ln_linear", "fpt_ln_mlp", "fpt_frozen_linear")

# stack kind used to pretrain weights for each backbone kind
PRETRAIN_KIND = {
    "decoder_only": "decoder_only",
    "encoder_only": "encoder_decoder",
    "encoder_decoder": "encoder_decoder",
    "decoder_of_enc_dec": "encoder_decoder",
}


@dataclass
class TaskConfig:
    context_length: int = 24
    horizons: tuple = (1, 2, 4, 8)
    quantiles: tuple = (0.5, 0.9)
    fcd_stride: int = 2
    test_fraction: float = 0.25
    target_transform: str = "log1p"

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        self.quantiles = tuple(float(q) for q in self.quantiles)

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data, "task")
        return cls(**data)


@dataclass
class RunSpec:
    name: str
    model: ModelSpec
    train: TrainConfig

    def to_dict(self):
        return {"name": self.name, "model": self.model.to_dict(), "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, data, index=0):
        where = f"runs[{index}]"
        if "name" not in data:
            raise ConfigError("missing", f"{where}.name")
        model = data.get("model", {})
        if isinstance(model, str):
            model = {"canonical": model}
        try:
            if "canonical" in model:
                extra = {k: v for k, v in model.items() if k != "canonical"}
                spec = canonical_spec(model["canonical"], **extra)
            else:
                spec = ModelSpec.from_dict(model)
            cfg = TrainConfig.from_dict(data.get("train", {}))
        except ConfigError as exc:
            raise ConfigError(str(exc), where) from None
        return cls(data["name"], spec, cfg)


@dataclass
class ExperimentSpec:
    runs: list
    baseline: str = "linear_only"
    master_seed: int = 7
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    pretrain: ToyLmConfig = field(default_factory=ToyLmConfig)
    layer_filter: str = "trainable"
    ks_threshold: float = DEFAULT_KS_THRESHOLD

    def validate(self):
        names = [r.name for r in self.runs]
        if not names:
            raise ConfigError("at least one run is required", "runs")
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ConfigError(f"duplicate run names {dup}", "runs")
        if self.baseline not in names:
            raise ConfigError(f"{self.baseline!r} is not a run name", "baseline")
        self.data.validate()
        for k, r in enumerate(self.runs):
            try:
                r.model.validate()
                r.train.validate()
            except ConfigError as exc:
                raise ConfigError(str(exc), f"runs[{k}]") from None
        return self

    def to_dict(self):
        return {
            "runs": [r.to_dict() for r in self.runs],
            "baseline": self.baseline,
            "master_seed": self.master_seed,
            "data": asdict(self.data),
            "task": asdict(self.task),
            "pretrain": self.pretrain.to_dict(),
            "layer_filter": self.layer_filter,
            "ks_threshold": self.ks_threshold,
        }

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data, "experiment")
        if "runs" not in data:
            raise ConfigError("missing", "runs")
        kw = dict(data)
        kw["runs"] = [RunSpec.from_dict(r, k) for k, r in enumerate(data["runs"])]
        if "data" in data:
            kw["data"] = SyntheticConfig.from_dict(data["data"])
        if "task" in data:
            kw["task"] = TaskConfig.from_dict(data["task"])
        if "pretrain" in data:
            kw["pretrain"] = ToyLmConfig.from_dict(data["pretrain"])
        return cls(**kw).validate()


def _check_keys(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", where)
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", where)


def canonical_train_config(**overrides):
    base = dict(epochs=20, batch_size=128, lr=1e-3)
    base.update(overrides)
    return TrainConfig(**base)


def canonical_suite(master_seed=7, runs=CANONICAL_RUNS, **train_overrides) -> ExperimentSpec:
    """The six-run comparison on the default synthetic panel."""
    return ExperimentSpec(
        runs=[RunSpec(n, canonical_spec(n), canonical_train_config(**train_overrides)) for n in runs],
        baseline="linear_only",
        master_seed=master_seed,
    ).validate()


# --------------------------------------------------------------------------- #
# Report
# --------------------------------------------------------------------------- #


@dataclass
class RunResult:
    name: str
    status: str
    model: dict
    train: dict
    seeds: dict
    parameters: dict | None = None
    history: dict | None = None
    eval: dict | None = None
    esd: list = field(default_factory=list)
    error: str | None = None


@dataclass
class ComparisonReport:
    spec: dict
    runs: list
    baseline: str
    dataset_checksum: str
    pretrain: dict | None = None
    failures: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["runs"] = [RunResult(**r) for r in data["runs"]]
        return cls(**data)

    def run(self, name) -> RunResult:
        for r in self.runs:
            if r.name == name:
                return r
        raise KeyError(name)

    def final_qwe(self, name, tau=0.5):
        r = self.run(name)
        return None if r.eval is None else r.eval["qwe"][quantile_label(tau)]

    def table_rows(self):
        """Rows in Table-2 layout ordered by P50 ratio; failed runs last."""
        rows = []
        for r in self.runs:
            ratios = (r.eval or {}).get("ratios") or {}
            rows.append(
                {
                    "run": r.name,
                    "architecture": _architecture_label(r.model),
                    "future_info": bool(r.model.get("use_future", False)),
                    "epochs": r.train["epochs"],
                    "p50_ratio": ratios.get("P50"),
                    "p90_ratio": ratios.get("P90"),
                    "p50_qwe": self.final_qwe(r.name, 0.5) if r.eval else None,
                    "p90_qwe": self.final_qwe(r.name, 0.9) if r.eval else None,
                    "status": r.status,
                }
            )
        return sorted(rows, key=lambda row: (row["p50_ratio"] is None, row["p50_ratio"] or 0.0, row["run"]))

    def table_csv(self):
        cols = ["run", "architecture", "future_info", "epochs", "p50_ratio", "p90_ratio", "p50_qwe", "p90_qwe", "status"]
        return _csv(cols, [[_fmt(row[c]) for c in cols] for row in self.table_rows()])

    def loss_alpha_rows(self):
        """Per-run, per-epoch training loss, test P50 and spectral summaries."""
        out = []
        for r in self.runs:
            if not r.history:
                continue
            esd = {e["epoch"]: e for e in r.esd}
            for k, epoch in enumerate(r.history["epochs"]):
                test = r.history["test_qwe"][k] or {}
                e = esd.get(epoch, {})
                out.append(
                    {
                        "run": r.name,
                        "epoch": epoch,
                        "train_loss": r.history["train_loss"][k],
                        "test_p50": test.get("P50"),
                        "alpha_metric": e.get("alpha_metric"),
                        "stable_rank": e.get("stable_rank"),
                    }
                )
        return out

    def loss_alpha_csv(self):
        cols = ["run", "epoch", "train_loss", "test_p50", "alpha_metric", "stable_rank"]
        return _csv(cols, [[_fmt(row[c]) for c in cols] for row in self.loss_alpha_rows()])

    def write(self, out_dir):
        out = Path(out_dir)
        atomic_write_text(out / "report.json", dumps(self.to_dict()))
        atomic_write_text(out / "table.csv", self.table_csv())
        atomic_write_text(out / "loss_alpha.csv", self.loss_alpha_csv())
        return out


def _architecture_label(model):
    if model.get("architecture") == "mqcnn":
        return "MQCNN"
    if model.get("backbone") is None:
        return f"{model['adapter']} (no backbone)"
    return f"{model['backbone']} {model['freeze']} / {model['adapter']} adapter"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(cols, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------- #
# Runner
# --------------------------------------------------------------------------- #


def _pretrain_spec(model: ModelSpec) -> BackboneSpec:
    bb = model.backbone_spec()
    return BackboneSpec(PRETRAIN_KIND[bb.kind], bb.n_layers, bb.d_model, bb.heads, bb.d_ff, bb.max_positions)


def run_suite(spec: ExperimentSpec, out_dir=None) -> ComparisonReport:
    """Run every entry of ``spec`` sequentially and join the results.

    Seeds derive from ``spec.master_seed``: one for the panel, one per
    distinct pretrained backbone, and an init/train pair per run name. A run
    that raises is recorded as failed and the suite carries on.
    """
    spec.validate()
    master = spec.master_seed
    ds = generate_panel(spec.data, derive_seed(master, "data"))
    t = spec.task
    full = ForecastTask.spanning(ds.n_periods, t.context_length, t.horizons, t.quantiles, stride=t.fcd_stride)
    train_task, test_task = split_task(full, t.test_fraction)
    pre = Preprocessor.fit(ds, upto=min(test_task.fcd_grid), target_transform=t.target_transform)
    dsp = pre.transform(ds)

    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory()
        root = Path(tmp.name)
    else:
        root = Path(out_dir)

    backbones, pretrain_info = {}, {}
    results, failures = [], []
    try:
        for run in spec.runs:
            model_spec = run.model.for_data(ds, full)
            seeds = {"init": derive_seed(master, "run", run.name, "init"), "train": derive_seed(master, "run", run.name, "train")}
            cfg = TrainConfig(**{**run.train.to_dict(), "seed": seeds["train"]})
            result = RunResult(run.name, "ok", model_spec.to_dict(), cfg.to_dict(), seeds)
            try:
                weights = None
                if model_spec.architecture == "patch" and model_spec.backbone is not None:
                    bspec = _pretrain_spec(model_spec)
                    key = dumps(asdict(bspec))
                    if key not in backbones:
                        seed = derive_seed(master, "pretrain", bspec.kind)
                        backbones[key] = pretrain_toy_lm(spec.pretrain, bspec, seed)
                        pretrain_info[bspec.kind] = backbones[key].info
                    weights = backbones[key]
                model = build_model(model_spec, weights, seed=seeds["init"])
                total, trainable = parameter_count(model.param_store())
                result.parameters = {"total": total, "trainable": trainable}
                ckpt_dir = root / "runs" / run.name / "checkpoints"
                history = train(model, dsp, train_task, cfg, eval_task=test_task, pre=pre, checkpoint_dir=ckpt_dir)
                result.history = history.to_dict()
                result.eval = evaluate(model, dsp, test_task, pre=pre).to_dict()
                for epoch, path in zip(history.epochs, history.checkpoints):
                    if path is None:
                        continue
                    rep = diagnose(load_ptwf(path), spec.layer_filter, spec.ks_threshold)
                    atomic_write_text(root / "runs" / run.name / "esd" / f"epoch_{epoch}.json", dumps(rep.to_dict()))
                    result.esd.append(
                        {
                            "epoch": epoch,
                            "alpha_metric": rep.alpha_metric,
                            "stable_rank": rep.stable_rank,
                            "included": rep.included,
                        }
                    )
                # checkpoint paths are recorded relative to the output root
                result.history["checkpoints"] = [
                    None if p is None else Path(p).relative_to(root).as_posix() for p in history.checkpoints
                ]
            except PatchcastError as exc:
                log.error("run %s failed: %s", run.name, exc)
                result.status = "failed"
                result.error = f"{type(exc).__name__}: {exc}"
                failures.append({"run": run.name, "error": result.error})
            results.append(result)
            log.info("run %s %s", run.name, result.status)
    finally:
        if tmp is not None:
            tmp.cleanup()

    base = next(r for r in results if r.name == spec.baseline)
    if base.eval is not None:
        for r in results:
            if r.eval is not None:
                r.eval["ratios"] = qwe_ratios(_Qwe(r.eval["qwe"]), _Qwe(base.eval["qwe"]))
                r.eval["baseline"] = spec.baseline
    else:
        failures.append({"run": spec.baseline, "error": "baseline unavailable; ratios omitted"})

    report = ComparisonReport(
        spec=spec.to_dict(),
        runs=results,
        baseline=spec.baseline,
        dataset_checksum=ds.checksum(),
        pretrain=pretrain_info or None,
        failures=failures,
    )
    if out_dir is not None:
        report.write(root)
    return report


@dataclass
class _Qwe:
    qwe: dict
