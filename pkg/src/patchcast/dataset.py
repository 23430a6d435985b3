"""Panel data model, CSV ingestion, synthetic demand panels and supervised slicing.

Time-index conventions used throughout the package (0-based periods):

* a forecast creation date (FCD) ``t`` is the first unobserved period boundary;
  the context window is ``[t - C, t)``, i.e. periods ``t-C .. t-1``;
* the label for horizon ``h`` is ``Y[t + h]``, so every label strictly follows
  the FCD and every context element strictly precedes it.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, ParseError

MISSING_SUFFIX = "__missing"
TARGET_NAME = "target"

CSV_FILES = {
    "target": "target.csv",
    "time_features": "time_features.csv",
    "static_features": "static_features.csv",
    "future_features": "future_features.csv",
}
CSV_HEADERS = {
    "target": ["series_id", "period", "value"],
    "time_features": ["series_id", "period", "feature", "value"],
    "static_features": ["series_id", "feature", "value"],
    "future_features": ["series_id", "period", "feature", "value"],
}


@dataclass
class PanelDataset:
    """Target ``Y`` (N x T) with time (N x T x d), static (N x m) and known-future
    (N x T x d_f) covariates."""

    series_ids: list
    target: np.ndarray
    time_features: np.ndarray
    static_features: np.ndarray
    future_features: np.ndarray
    period_index: list
    time_feature_names: list = field(default_factory=list)
    static_feature_names: list = field(default_factory=list)
    future_feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.time_features = np.asarray(self.time_features, dtype=np.float64)
        self.static_features = np.asarray(self.static_features, dtype=np.float64)
        self.future_features = np.asarray(self.future_features, dtype=np.float64)
        if self.target.ndim != 2:
            raise ConfigError("target must be N x T", "target")
        n, t = self.target.shape
        if len(self.series_ids) != n:
            raise ConfigError(f"expected {n} series ids, got {len(self.series_ids)}", "series_ids")
        if len(self.period_index) != t:
            raise ConfigError(f"expected {t} period labels, got {len(self.period_index)}", "period_index")
        for name, arr, nd in (
            ("time_features", self.time_features, 3),
            ("future_features", self.future_features, 3),
        ):
            if arr.ndim != nd or arr.shape[:2] != (n, t):
                raise ConfigError(f"shape {arr.shape} does not match (N={n}, T={t}, k)", name)
        if self.static_features.ndim != 2 or self.static_features.shape[0] != n:
            raise ConfigError(f"shape {self.static_features.shape} does not match N={n}", "static_features")
        for name, arr in self._arrays():
            if not np.all(np.isfinite(arr)):
                raise ConfigError("non-finite values", name)
        if not self.time_feature_names:
            self.time_feature_names = [f"x{j}" for j in range(self.d)]
        if not self.static_feature_names:
            self.static_feature_names = [f"s{j}" for j in range(self.m)]
        if not self.future_feature_names:
            self.future_feature_names = [f"f{j}" for j in range(self.d_f)]

    def _arrays(self):
        return (
            ("target", self.target),
            ("time_features", self.time_features),
            ("static_features", self.static_features),
            ("future_features", self.future_features),
        )

    @property
    def n_series(self):
        return self.target.shape[0]

    @property
    def n_periods(self):
        return self.target.shape[1]

    @property
    def d(self):
        return self.time_features.shape[2]

    @property
    def m(self):
        return self.static_features.shape[1]

    @property
    def d_f(self):
        return self.future_features.shape[2]

    def checksum(self):
        """SHA-256 over every array's bytes and the label lists."""
        h = hashlib.sha256()
        for _, arr in self._arrays():
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for labels in (
            self.series_ids,
            self.period_index,
            self.time_feature_names,
            self.static_feature_names,
            self.future_feature_names,
        ):
            h.update("\x1f".join(map(str, labels)).encode())
        return h.hexdigest()

    def replace(self, **changes):
        kwargs = dict(
            series_ids=list(self.series_ids),
            target=self.target,
            time_features=self.time_features,
            static_features=self.static_features,
            future_features=self.future_features,
            period_index=list(self.period_index),
            time_feature_names=list(self.time_feature_names),
            static_feature_names=list(self.static_feature_names),
            future_feature_names=list(self.future_feature_names),
        )
        kwargs.update(changes)
        return PanelDataset(**kwargs)


# --------------------------------------------------------------------------- #
# Synthetic generator
# --------------------------------------------------------------------------- #


@dataclass
class SyntheticConfig:
    """Parameters of the synthetic demand generator.

    The per-series mean is ``base * season * trend + lift * base * promo``, where
    ``base`` is lognormal, ``season = 1 + amp * sin(2 pi t / period + phase)``,
    ``trend = 1 + slope * t / T`` and ``promo`` is the first future-feature
    column. Observed demand mixes in Poisson counts:
    ``Y = (1 - noise) * mean + noise * Poisson(mean)``.
    """

    n_series: int = 200
    n_periods: int = 160
    n_time_features: int = 6
    n_static: int = 4
    n_future: int = 2
    base_log_mean: float = 2.0
    base_log_sd: float = 0.8
    season_period: int = 7
    season_amp: float = 0.5
    trend: float = 0.4
    promo_prob: float = 0.1
    promo_lift: float = 1.5
    noise: float = 1.0

    def validate(self):
        checks = [
            ("n_series", self.n_series >= 1, "must be >= 1"),
            ("n_periods", self.n_periods >= 8, "must be >= 8"),
            ("n_time_features", self.n_time_features >= 1, "must be >= 1"),
            ("n_static", self.n_static >= 1, "must be >= 1"),
            ("n_future", self.n_future >= 0, "must be >= 0"),
            ("base_log_sd", self.base_log_sd >= 0, "must be >= 0"),
            ("season_period", self.season_period >= 1, "must be >= 1"),
            ("season_amp", 0 <= self.season_amp <= 1, "must lie in [0, 1]"),
            ("trend", 0 <= self.trend < 1, "must lie in [0, 1)"),
            ("promo_prob", 0 <= self.promo_prob <= 1, "must lie in [0, 1]"),
            ("promo_lift", self.promo_lift >= 0, "must be >= 0"),
            ("noise", 0 <= self.noise <= 1, "must lie in [0, 1]"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(msg, f"gen_config.{name}")

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "gen_config")
        return cls(**data)


def _time_feature_pool(y, promo, period, rng, d):
    """Causal covariates: the value at index k only uses Y[< k] and calendar/promo at k."""
    n, t = y.shape
    k = np.arange(t)
    log_y = np.log1p(y)
    lag1 = np.zeros_like(y)
    lag1[:, 1:] = log_y[:, :-1]
    csum = np.concatenate([np.zeros((n, 1)), np.cumsum(y, axis=1)], axis=1)
    lo = np.maximum(k - 4, 0)
    count = np.maximum(k - lo, 1)
    roll4 = np.log1p((csum[:, k] - csum[:, lo]) / count)
    lag_season = np.zeros_like(y)
    if period < t:
        lag_season[:, period:] = log_y[:, :-period]
    pool = [
        ("season_sin", np.broadcast_to(np.sin(2 * np.pi * k / period), (n, t))),
        ("season_cos", np.broadcast_to(np.cos(2 * np.pi * k / period), (n, t))),
        ("lag1_log", lag1),
        ("rollmean4_log", roll4),
        ("lag_season_log", lag_season),
        ("promo", promo),
    ]
    names = [p[0] for p in pool[:d]]
    cols = [p[1] for p in pool[:d]]
    for j in range(d - len(pool)):
        names.append(f"noise{j}")
        cols.append(rng.normal(0.0, 1.0, (n, t)))
    return names, np.stack(cols, axis=2).astype(np.float64)


def generate_panel(gen_config: SyntheticConfig, seed: int) -> PanelDataset:
    """Draw a synthetic demand panel. Random draws happen in a fixed documented order:
    log-base, category, amplitude, phase, slope, promo lift, promo mask, Poisson counts,
    then any noise covariates."""
    cfg = gen_config
    cfg.validate()
    rng = np.random.default_rng(seed)
    n, t = cfg.n_series, cfg.n_periods
    n_cat = cfg.n_static - 1

    log_base = rng.normal(cfg.base_log_mean, cfg.base_log_sd, n)
    category = rng.integers(0, max(n_cat, 1), n)
    amp = cfg.season_amp * rng.uniform(0.5, 1.0, n)
    phase = rng.uniform(0.0, 2 * np.pi, n)
    slope = rng.uniform(-cfg.trend, cfg.trend, n)
    lift = cfg.promo_lift * rng.uniform(0.5, 1.5, n)
    promo_draw = rng.random((n, t))
    promo = (promo_draw < cfg.promo_prob).astype(np.float64) if cfg.n_future >= 1 else np.zeros((n, t))

    base = np.exp(log_base)
    k = np.arange(t)
    season = 1.0 + amp[:, None] * np.sin(2 * np.pi * k[None, :] / cfg.season_period + phase[:, None])
    trend = 1.0 + slope[:, None] * k[None, :] / t
    mean = base[:, None] * season * trend + lift[:, None] * base[:, None] * promo
    counts = rng.poisson(mean).astype(np.float64)
    y = (1.0 - cfg.noise) * mean + cfg.noise * counts
    y = np.maximum(y, 0.0)

    time_names, xt = _time_feature_pool(y, promo, cfg.season_period, rng, cfg.n_time_features)

    onehot = np.zeros((n, n_cat))
    if n_cat > 0:
        onehot[np.arange(n), category] = 1.0
    xs = np.concatenate([onehot, log_base[:, None]], axis=1)
    static_names = [f"category_{j}" for j in range(n_cat)] + ["log_size"]

    fut_pool = [
        ("promo", promo),
        ("season_sin", np.broadcast_to(np.sin(2 * np.pi * k / cfg.season_period), (n, t))),
        ("season_cos", np.broadcast_to(np.cos(2 * np.pi * k / cfg.season_period), (n, t))),
    ]
    fut_names = [p[0] for p in fut_pool[: cfg.n_future]]
    fut_cols = [p[1] for p in fut_pool[: cfg.n_future]]
    for j in range(cfg.n_future - len(fut_pool)):
        fut_names.append(f"trend_{j}")
        fut_cols.append(np.broadcast_to(k / t, (n, t)))
    xf = np.stack(fut_cols, axis=2) if fut_cols else np.zeros((n, t, 0))

    return PanelDataset(
        series_ids=[f"s{i:05d}" for i in range(n)],
        target=y,
        time_features=xt,
        static_features=xs,
        future_features=np.array(xf, dtype=np.float64),
        period_index=[f"p{j:05d}" for j in range(t)],
        time_feature_names=time_names,
        static_feature_names=static_names,
        future_feature_names=fut_names,
    )


# --------------------------------------------------------------------------- #
# CSV I/O
# --------------------------------------------------------------------------- #


def _resolve_paths(paths):
    if isinstance(paths, (str, os.PathLike)):
        root = Path(paths)
        if root.is_dir():
            return {k: root / v for k, v in CSV_FILES.items() if (root / v).exists()}
        return {"target": root}
    if isinstance(paths, Mapping):
        unknown = set(paths) - set(CSV_FILES)
        if unknown:
            raise ConfigError(f"unknown tensor names {sorted(unknown)}", "paths")
        return {k: Path(v) for k, v in paths.items()}
    resolved = {}
    for p in paths:
        p = Path(p)
        kind = next((k for k, v in CSV_FILES.items() if v == p.name), None)
        if kind is None:
            raise ConfigError(f"cannot tell which tensor {p.name} holds", "paths")
        resolved[kind] = p
    return resolved


def _read_rows(path, kind):
    header = CSV_HEADERS[kind]
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(str(exc), path) from exc
    with fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError("empty file", path, 1) from None
        if first != header:
            extra = [c for c in first if c not in header]
            if extra:
                raise ParseError(f"unknown columns {extra}", path, 1)
            raise ParseError(f"expected header {header}, got {first}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            raw = row[-1].strip()
            if raw == "":
                value = None
            else:
                try:
                    value = float(raw)
                except ValueError:
                    raise ParseError(f"non-numeric value {raw!r}", path, lineno) from None
                if not math.isfinite(value):
                    raise ParseError(f"non-finite value {raw!r}", path, lineno)
            yield lineno, row[:-1], value


def _ordered_unique(seq):
    return list(dict.fromkeys(seq))


def load_panel_csv(paths) -> PanelDataset:
    """Load a panel from the per-tensor CSV files (a directory, a mapping, or a list
    of paths). Missing cells become 0.0 and add a ``<name>__missing`` indicator."""
    files = _resolve_paths(paths)
    if "target" not in files:
        raise ConfigError("target.csv is required", "paths.target")

    target_rows = list(_read_rows(files["target"], "target"))
    series_ids = _ordered_unique(r[1][0] for r in target_rows)
    periods = _ordered_unique(r[1][1] for r in target_rows)
    s_pos = {s: i for i, s in enumerate(series_ids)}
    p_pos = {p: j for j, p in enumerate(periods)}
    n, t = len(series_ids), len(periods)

    def lookup(table, key, path, lineno, what):
        try:
            return table[key]
        except KeyError:
            raise ParseError(f"unknown {what} {key!r}", path, lineno) from None

    y = np.zeros((n, t))
    y_seen = np.zeros((n, t), dtype=bool)
    y_missing = np.ones((n, t), dtype=bool)
    for lineno, (sid, per), value in target_rows:
        i, j = s_pos[sid], p_pos[per]
        if y_seen[i, j]:
            raise ParseError(f"duplicate entry ({sid}, {per})", files["target"], lineno)
        y_seen[i, j] = True
        if value is not None:
            y[i, j] = value
            y_missing[i, j] = False

    def load_timed(kind):
        if kind not in files:
            return [], np.zeros((n, t, 0)), np.zeros((n, t, 0), dtype=bool)
        rows = list(_read_rows(files[kind], kind))
        names = _ordered_unique(r[1][2] for r in rows)
        f_pos = {f: k for k, f in enumerate(names)}
        arr = np.zeros((n, t, len(names)))
        seen = np.zeros(arr.shape, dtype=bool)
        missing = np.ones(arr.shape, dtype=bool)
        for lineno, (sid, per, feat), value in rows:
            i = lookup(s_pos, sid, files[kind], lineno, "series")
            j = lookup(p_pos, per, files[kind], lineno, "period")
            k = f_pos[feat]
            if seen[i, j, k]:
                raise ParseError(f"duplicate entry ({sid}, {per}, {feat})", files[kind], lineno)
            seen[i, j, k] = True
            if value is not None:
                arr[i, j, k] = value
                missing[i, j, k] = False
        return names, arr, missing

    t_names, xt, xt_missing = load_timed("time_features")
    f_names, xf, xf_missing = load_timed("future_features")

    s_names, xs, xs_missing = [], np.zeros((n, 0)), np.zeros((n, 0), dtype=bool)
    if "static_features" in files:
        rows = list(_read_rows(files["static_features"], "static_features"))
        s_names = _ordered_unique(r[1][1] for r in rows)
        f_pos = {f: k for k, f in enumerate(s_names)}
        xs = np.zeros((n, len(s_names)))
        seen = np.zeros(xs.shape, dtype=bool)
        xs_missing = np.ones(xs.shape, dtype=bool)
        for lineno, (sid, feat), value in rows:
            i = lookup(s_pos, sid, files["static_features"], lineno, "series")
            k = f_pos[feat]
            if seen[i, k]:
                raise ParseError(f"duplicate entry ({sid}, {feat})", files["static_features"], lineno)
            seen[i, k] = True
            if value is not None:
                xs[i, k] = value
                xs_missing[i, k] = False

    # indicators only for columns that actually have gaps
    t_extra, t_extra_names = [], []
    if y_missing.any():
        t_extra.append(y_missing.astype(np.float64))
        t_extra_names.append(TARGET_NAME + MISSING_SUFFIX)
    for k, name in enumerate(t_names):
        if xt_missing[:, :, k].any():
            t_extra.append(xt_missing[:, :, k].astype(np.float64))
            t_extra_names.append(name + MISSING_SUFFIX)
    if t_extra:
        xt = np.concatenate([xt, np.stack(t_extra, axis=2)], axis=2)
        t_names = t_names + t_extra_names
    f_extra = [k for k in range(len(f_names)) if xf_missing[:, :, k].any()]
    if f_extra:
        xf = np.concatenate([xf, xf_missing[:, :, f_extra].astype(np.float64)], axis=2)
        f_names = f_names + [f_names[k] + MISSING_SUFFIX for k in f_extra]
    s_extra = [k for k in range(len(s_names)) if xs_missing[:, k].any()]
    if s_extra:
        xs = np.concatenate([xs, xs_missing[:, s_extra].astype(np.float64)], axis=1)
        s_names = s_names + [s_names[k] + MISSING_SUFFIX for k in s_extra]

    return PanelDataset(
        series_ids=series_ids,
        target=y,
        time_features=xt,
        static_features=xs,
        future_features=xf,
        period_index=periods,
        time_feature_names=t_names,
        static_feature_names=s_names,
        future_feature_names=f_names,
    )


def _atomic_csv(path, header, rows):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def write_panel_csv(ds: PanelDataset, directory) -> dict:
    """Write ``ds`` in the four-file CSV schema; returns ``{tensor: path}``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    sids, pers = ds.series_ids, ds.period_index
    paths = {k: out / v for k, v in CSV_FILES.items()}
    _atomic_csv(
        paths["target"],
        CSV_HEADERS["target"],
        ((sids[i], pers[j], repr(float(ds.target[i, j]))) for i in range(ds.n_series) for j in range(ds.n_periods)),
    )
    for kind, arr, names in (
        ("time_features", ds.time_features, ds.time_feature_names),
        ("future_features", ds.future_features, ds.future_feature_names),
    ):
        _atomic_csv(
            paths[kind],
            CSV_HEADERS[kind],
            (
                (sids[i], pers[j], names[k], repr(float(arr[i, j, k])))
                for i in range(ds.n_series)
                for j in range(ds.n_periods)
                for k in range(arr.shape[2])
            ),
        )
    _atomic_csv(
        paths["static_features"],
        CSV_HEADERS["static_features"],
        (
            (sids[i], ds.static_feature_names[k], repr(float(ds.static_features[i, k])))
            for i in range(ds.n_series)
            for k in range(ds.m)
        ),
    )
    return paths


# --------------------------------------------------------------------------- #
# Tasks and batches
# --------------------------------------------------------------------------- #


@dataclass
class ForecastTask:
    context_length: int
    horizons: tuple
    quantiles: tuple = (0.5, 0.9)
    fcd_grid: tuple = ()

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        self.quantiles = tuple(float(q) for q in self.quantiles)
        self.fcd_grid = tuple(int(t) for t in self.fcd_grid)

    def validate(self, n_periods=None):
        if self.context_length < 1:
            raise ConfigError("must be >= 1", "task.context_length")
        h = self.horizons
        if not h or h[0] < 1 or any(b <= a for a, b in zip(h, h[1:])):
            raise ConfigError("must be strictly increasing positive integers", "task.horizons")
        if not self.quantiles or not all(0.0 < q < 1.0 for q in self.quantiles):
            raise ConfigError("every quantile must lie in (0, 1)", "task.quantiles")
        if not self.fcd_grid:
            raise ConfigError("must not be empty", "task.fcd_grid")
        if len(set(self.fcd_grid)) != len(self.fcd_grid):
            raise ConfigError("duplicate FCDs", "task.fcd_grid")
        if min(self.fcd_grid) < self.context_length:
            raise ConfigError("min(fcd_grid) must be >= context_length", "task.fcd_grid")
        # labels live at t + h, so the last one must be a valid period index
        if n_periods is not None and max(self.fcd_grid) + max(h) > n_periods - 1:
            raise ConfigError(
                f"max(fcd_grid) + max(horizons) must be <= T - 1 = {n_periods - 1}", "task.fcd_grid"
            )

    @classmethod
    def spanning(cls, n_periods, context_length, horizons, quantiles=(0.5, 0.9), stride=1):
        """All admissible FCDs ``C <= t <= T - 1 - max(H)`` every ``stride`` periods."""
        last = n_periods - 1 - max(horizons)
        grid = tuple(range(context_length, last + 1, stride))
        task = cls(context_length, tuple(horizons), tuple(quantiles), grid)
        task.validate(n_periods)
        return task

    def with_grid(self, grid):
        return ForecastTask(self.context_length, self.horizons, self.quantiles, tuple(grid))

    def to_dict(self):
        return {
            "context_length": self.context_length,
            "horizons": list(self.horizons),
            "quantiles": list(self.quantiles),
            "fcd_grid": list(self.fcd_grid),
        }


def split_task(task: ForecastTask, test_fraction=0.25):
    """Hold out the final ``test_fraction`` of the FCD grid (at least one FCD)."""
    grid = sorted(task.fcd_grid)
    if len(grid) < 2:
        raise ConfigError("need at least two FCDs to split", "task.fcd_grid")
    n_test = min(max(1, int(math.floor(len(grid) * test_fraction))), len(grid) - 1)
    return task.with_grid(grid[:-n_test]), task.with_grid(grid[-n_test:])


@dataclass
class SupervisedBatch:
    past_target: np.ndarray
    past_time_feats: np.ndarray
    statics: np.ndarray
    future_feats: np.ndarray
    labels: np.ndarray
    series_index: np.ndarray
    fcd: np.ndarray

    @property
    def batch_size(self):
        return self.labels.shape[0]


def _gather(ds, task, series, fcds):
    c = task.context_length
    h = np.asarray(task.horizons)
    past = fcds[:, None] + np.arange(-c, 0)[None, :]
    ahead = fcds[:, None] + h[None, :]
    rows = series[:, None]
    return SupervisedBatch(
        past_target=ds.target[rows, past],
        past_time_feats=ds.time_features[rows, past],
        statics=ds.static_features[series],
        future_feats=ds.future_features[rows, ahead],
        labels=ds.target[rows, ahead],
        series_index=series,
        fcd=fcds,
    )


def make_batches(ds: PanelDataset, task: ForecastTask, batch_size: int, shuffle_seed=None):
    """One epoch of batches covering every (series, FCD) pair exactly once.

    With ``shuffle_seed=None`` pairs come in series-major canonical order.
    """
    task.validate(ds.n_periods)
    if batch_size < 1:
        raise ConfigError("must be >= 1", "batch_size")
    fcds = np.asarray(task.fcd_grid, dtype=np.int64)
    series = np.repeat(np.arange(ds.n_series, dtype=np.int64), len(fcds))
    times = np.tile(fcds, ds.n_series)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(series))
        series, times = series[order], times[order]
    full = _gather(ds, task, series, times)
    batches = []
    for lo in range(0, len(series), batch_size):
        sl = slice(lo, lo + batch_size)
        batches.append(
            SupervisedBatch(
                past_target=full.past_target[sl],
                past_time_feats=full.past_time_feats[sl],
                statics=full.statics[sl],
                future_feats=full.future_feats[sl],
                labels=full.labels[sl],
                series_index=full.series_index[sl],
                fcd=full.fcd[sl],
            )
        )
    return batches


# --------------------------------------------------------------------------- #
# Normalization
# --------------------------------------------------------------------------- #

TARGET_TRANSFORMS = ("log1p", "identity")


@dataclass
class Preprocessor:
    """Target transform plus per-series standardization of the time features.

    Statistics are fitted on periods ``[0, upto)`` so held-out periods never
    inform the scaling.
    """

    target_transform: str = "log1p"
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None

    @classmethod
    def fit(cls, ds: PanelDataset, upto=None, target_transform="log1p", standardize=True):
        if target_transform not in TARGET_TRANSFORMS:
            raise ConfigError(f"expected one of {TARGET_TRANSFORMS}", "target_transform")
        if not standardize or ds.d == 0:
            return cls(target_transform)
        upto = ds.n_periods if upto is None else int(upto)
        window = ds.time_features[:, :upto]
        mean = window.mean(axis=1)
        std = window.std(axis=1)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(target_transform, mean, std)

    def forward_target(self, y):
        y = np.asarray(y, dtype=np.float64)
        return np.log1p(y) if self.target_transform == "log1p" else y.copy()

    def inverse_target(self, z):
        z = np.asarray(z, dtype=np.float64)
        return np.expm1(z) if self.target_transform == "log1p" else z.copy()

    def transform(self, ds: PanelDataset) -> PanelDataset:
        if self.target_transform == "log1p" and np.any(ds.target < -1):
            raise ConfigError("log1p transform needs target >= -1", "target")
        xt = ds.time_features
        if self.feature_mean is not None:
            xt = (xt - self.feature_mean[:, None, :]) / self.feature_std[:, None, :]
        return ds.replace(target=self.forward_target(ds.target), time_features=xt)

    def to_dict(self):
        return {
            "target_transform": self.target_transform,
            "feature_mean": None if self.feature_mean is None else self.feature_mean.tolist(),
            "feature_std": None if self.feature_std is None else self.feature_std.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        mean = data.get("feature_mean")
        std = data.get("feature_std")
        return cls(
            data.get("target_transform", "log1p"),
            None if mean is None else np.asarray(mean, dtype=np.float64),
            None if std is None else np.asarray(std, dtype=np.float64),
        )
