"""Heavy-tailed spectral diagnostics of weight matrices.

For each layer the empirical spectral density (ESD) is the set of eigenvalues
of ``W^T W``. Its upper tail is fitted with a power law (PL)
``p(x) ~ x^-alpha`` on ``[xmin, inf)`` or a truncated power law (TPL)
``p(x) ~ x^-alpha exp(-beta x)``; ``xmin`` is the cutoff minimising the
Kolmogorov-Smirnov distance between the tail and the fitted law.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .errors import DiagnosticsError
from .params import ParamStore

MIN_TAIL = 10
DEFAULT_KS_THRESHOLD = 0.10
UNRELIABLE_ALPHA = 2.0


class FitError(DiagnosticsError):
    pass


@dataclass
class Esd:
    name: str
    eigenvalues: np.ndarray  # ascending
    shape: tuple = ()

    def positive(self):
        """Eigenvalues with numerical zeros removed."""
        lam = self.eigenvalues
        if lam.size == 0:
            return lam
        tol = lam[-1] * max(self.shape or (lam.size,)) * np.finfo(np.float64).eps
        return lam[lam > tol]


@dataclass
class PowerLawFit:
    alpha: float
    xmin: float
    ks_distance: float
    n_tail: int
    family: str = "PL"
    beta: float | None = None

    def to_dict(self):
        return asdict(self)


def as_matrix(t):
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim == 3:
        # conv kernels k_c x d_in x d_out -> (k_c * d_in) x d_out
        arr = arr.reshape(-1, arr.shape[-1])
    if arr.ndim != 2:
        raise DiagnosticsError(f"expected a matrix, got shape {arr.shape}")
    return arr


def _singular_values(w):
    w = as_matrix(w)
    if w.size == 0:
        raise DiagnosticsError("empty weight matrix")
    if not np.all(np.isfinite(w)):
        raise DiagnosticsError("weight matrix has non-finite entries")
    return w, np.linalg.svd(w, compute_uv=False)


def gram_esd(w, name="") -> Esd:
    """Eigenvalues of W^T W as squared singular values, ascending; min(rows, cols) of them."""
    w, s = _singular_values(w)
    return Esd(name, np.sort(s * s), tuple(w.shape))


def stable_rank(w) -> float:
    """||W||_F^2 / ||W||_2^2."""
    _, s = _singular_values(w)
    top = float(s.max())
    if top == 0.0:
        raise DiagnosticsError("stable rank of a zero matrix is undefined")
    return float(np.sum((s / top) ** 2))


def _eigs(esd_or_values):
    if isinstance(esd_or_values, Esd):
        lam = esd_or_values.positive()
    else:
        lam = np.sort(np.asarray(esd_or_values, dtype=np.float64))
        lam = lam[lam > 0]
    return lam


# --------------------------------------------------------------------------- #
# Power-law fits
# --------------------------------------------------------------------------- #


def pl_alpha(tail, xmin):
    """Continuous power-law MLE ``1 + n / sum(ln(x / xmin))``."""
    tail = np.asarray(tail, dtype=np.float64)
    logsum = float(np.sum(np.log(tail / xmin)))
    if logsum <= 0:
        raise FitError("tail has no spread above xmin")
    return 1.0 + tail.size / logsum


def ks_statistic(tail_sorted, cdf_values):
    """Two-sided KS distance between the tail's ECDF and fitted CDF values at the same points."""
    n = tail_sorted.size
    k = np.arange(n)
    upper = (k + 1) / n - cdf_values
    lower = cdf_values - k / n
    return float(max(upper.max(), lower.max()))


def _pl_candidate(lam, i):
    tail = lam[i:]
    xmin = lam[i]
    alpha = pl_alpha(tail, xmin)
    cdf = 1.0 - (tail / xmin) ** (1.0 - alpha)
    return alpha, ks_statistic(tail, cdf)


def xmin_candidates(lam, min_tail=MIN_TAIL):
    """Indices of distinct eigenvalues with at least ``min_tail`` points at or above."""
    n = lam.size
    first = np.ones(n, dtype=bool)
    first[1:] = lam[1:] != lam[:-1]
    idx = np.nonzero(first)[0]
    return idx[n - idx >= min_tail]


def fit_pl(esd, xmin=None, min_tail=MIN_TAIL) -> PowerLawFit:
    """Power-law fit; ``xmin`` is searched over observed eigenvalues unless forced."""
    lam = _eigs(esd)
    if xmin is not None:
        tail = lam[lam >= xmin]
        if tail.size < min_tail:
            raise FitError(f"only {tail.size} points above xmin={xmin}")
        alpha = pl_alpha(tail, xmin)
        cdf = 1.0 - (tail / xmin) ** (1.0 - alpha)
        return PowerLawFit(alpha, float(xmin), ks_statistic(tail, cdf), int(tail.size))

    best = None
    for i in xmin_candidates(lam, min_tail):
        try:
            alpha, d = _pl_candidate(lam, i)
        except FitError:
            continue
        if best is None or d < best[2]:
            best = (alpha, float(lam[i]), d, int(lam.size - i))
    if best is None:
        raise FitError(f"no cutoff leaves {min_tail} spread-out tail points ({lam.size} eigenvalues)")
    return PowerLawFit(*best)


# TPL normaliser Z(alpha, b) = int_1^inf x^-alpha exp(-b x) dx, tabulated once.
ALPHA_GRID = np.round(np.arange(1.01, 8.0 + 1e-9, 0.01), 10)
B_GRID = np.concatenate([[0.0], np.logspace(-3, 1.5, 46)])


def _u_grid(b, points):
    upper = np.log1p(60.0 / b) if b > 0 else 60.0
    return np.linspace(0.0, upper, points)


@lru_cache(maxsize=4)
def _log_z_table(alpha_grid=tuple(ALPHA_GRID), b_grid=tuple(B_GRID), points=4001):
    alphas = np.asarray(alpha_grid)
    out = np.empty((alphas.size, len(b_grid)))
    for j, b in enumerate(b_grid):
        if b == 0.0:
            out[:, j] = -np.log(alphas - 1.0)
            continue
        out[:, j] = np.log(tpl_normaliser(alphas, b, points))
    return out


def tpl_normaliser(alpha, b, points=4001):
    """Simpson quadrature of int_1^inf x^-alpha e^{-b x} dx after x = e^u."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if b == 0.0:
        return 1.0 / (alpha - 1.0)
    u = _u_grid(b, points)
    f = np.exp((1.0 - alpha[:, None]) * u[None, :] - b * np.exp(u)[None, :])
    h = u[1] - u[0]
    w = np.ones(points)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return (f @ w) * h / 3.0


def tpl_cdf(x, alpha, b, points=20001):
    """CDF of the standardised TPL (support x >= 1) at sorted points ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if b == 0.0:
        return 1.0 - x ** (1.0 - alpha)
    u = np.linspace(0.0, max(np.log1p(60.0 / b), float(np.log(x.max())) + 1e-9), points)
    f = np.exp((1.0 - alpha) * u - b * np.exp(u))
    cum = np.concatenate([[0.0], np.cumsum((f[1:] + f[:-1]) * 0.5 * np.diff(u))])
    return np.clip(np.interp(np.log(x), u, cum) / cum[-1], 0.0, 1.0)


def _tpl_at(lam, i, table, alpha_grid, b_grid):
    """Best (alpha, b, loglik) at cutoff index i; b = 0 uses the closed-form MLE."""
    x = lam[i:] / lam[i]
    n = x.size
    s_log = float(np.log(x).sum())
    s_lin = float(x.sum())
    ll = -n * table - alpha_grid[:, None] * s_log - b_grid[None, :] * s_lin
    ll[:, 0] = -np.inf
    a_i, b_j = np.unravel_index(np.argmax(ll), ll.shape)
    best = (float(alpha_grid[a_i]), float(b_grid[b_j]), float(ll[a_i, b_j]))
    if s_log > 0:
        a0 = 1.0 + n / s_log
        ll0 = n * np.log(a0 - 1.0) - a0 * s_log
        if ll0 >= best[2]:
            best = (a0, 0.0, float(ll0))
    return best, x


def fit_tpl(esd, min_tail=MIN_TAIL, max_candidates=100, b_grid=None, xmin=None) -> PowerLawFit:
    """Truncated power-law fit by grid-search MLE over (alpha, beta) at each cutoff,
    with the cutoff chosen by KS distance. The beta grid always contains 0, so the
    pure power law is one of the candidates at every cutoff."""
    lam = _eigs(esd)
    b_grid = B_GRID if b_grid is None else np.asarray(sorted(set([0.0, *b_grid])))
    table = _log_z_table(tuple(ALPHA_GRID), tuple(b_grid))

    if xmin is not None:
        idx = np.searchsorted(lam, xmin)
        if lam.size - idx < min_tail:
            raise FitError(f"only {lam.size - idx} points above xmin={xmin}")
        cands = np.array([idx])
    else:
        cands = xmin_candidates(lam, min_tail)
        if cands.size == 0:
            raise FitError(f"fewer than {min_tail} eigenvalues")
        if cands.size > max_candidates:
            keep = np.unique(np.linspace(0, cands.size - 1, max_candidates).round().astype(int))
            thinned = set(cands[keep].tolist())
            try:
                pl = fit_pl(lam, min_tail=min_tail)
                thinned.add(int(np.searchsorted(lam, pl.xmin)))
            except FitError:
                pass
            cands = np.array(sorted(thinned))

    best = None
    for i in cands:
        (alpha, b, _), x = _tpl_at(lam, int(i), table, ALPHA_GRID, b_grid)
        if not np.isfinite(alpha) or np.log(x).sum() <= 0:
            continue
        d = ks_statistic(x, tpl_cdf(x, alpha, b))
        if best is None or d < best[2]:
            xm = float(lam[i])
            best = (alpha, xm, d, int(x.size), b / xm)
    if best is None:
        raise FitError("no admissible cutoff")
    alpha, xm, d, n_tail, beta = best
    return PowerLawFit(alpha, xm, d, n_tail, family="TPL", beta=beta)


# --------------------------------------------------------------------------- #
# CCDF
# --------------------------------------------------------------------------- #


def ccdf(esd):
    """Empirical CCDF points: sorted lambda_(i) paired with (n - i) / n, i = 1..n."""
    lam = esd.eigenvalues if isinstance(esd, Esd) else np.sort(np.asarray(esd, dtype=np.float64))
    n = lam.size
    if n == 0:
        raise DiagnosticsError("empty spectrum")
    return lam.copy(), (n - np.arange(1, n + 1)) / n


def ccdf_csv(esd) -> str:
    x, y = ccdf(esd)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "ccdf"])
    for a, b in zip(x, y):
        w.writerow([repr(float(a)), repr(float(b))])
    return buf.getvalue()


def pl_ccdf_line(fit: PowerLawFit, x_max, n_total, points=50):
    """Fitted-PL CCDF over [xmin, x_max], scaled to the tail fraction of the data."""
    xs = np.geomspace(fit.xmin, max(x_max, fit.xmin * (1 + 1e-9)), points)
    frac = fit.n_tail / n_total
    return xs, frac * (xs / fit.xmin) ** (1.0 - fit.alpha)


def kink_candidates(esd, bins=12, threshold=1.0):
    """Eigenvalues where the log-log CCDF slope jumps up by more than ``threshold``
    (convex kinks). Heuristic only."""
    x, y = ccdf(esd)
    keep = (x > 0) & (y > 0)
    x, y = x[keep], y[keep]
    if x.size < 4 or x[0] == x[-1]:
        return []
    edges = np.geomspace(x[0], x[-1], bins + 1)
    lx, ly = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (x >= lo) & (x <= hi)
        if sel.any():
            lx.append(np.log10(x[sel]).mean())
            ly.append(np.log10(y[sel]).mean())
    lx, ly = np.array(lx), np.array(ly)
    if lx.size < 3:
        return []
    slopes = np.diff(ly) / np.diff(lx)
    jumps = np.diff(slopes)
    return [float(10 ** lx[k + 1]) for k in np.nonzero(jumps > threshold)[0]]


# --------------------------------------------------------------------------- #
# Model-level report
# --------------------------------------------------------------------------- #


@dataclass
class LayerDiagnosis:
    name: str
    shape: list
    eigenvalues: list
    stable_rank: float
    pl: dict | None = None
    tpl: dict | None = None
    included: bool = False
    unreliable: bool = False
    fit_error: str | None = None
    kinks: list = field(default_factory=list)


@dataclass
class EsdReport:
    layers: list
    alpha_metric: float | None
    stable_rank: float
    included: list
    ks_threshold: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        layers = [LayerDiagnosis(**layer) for layer in data["layers"]]
        return cls(layers, data["alpha_metric"], data["stable_rank"], data["included"], data["ks_threshold"])

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


def alpha_metric(fits, threshold=DEFAULT_KS_THRESHOLD):
    """Mean alpha over (alpha, ks_distance) pairs with ks_distance <= threshold."""
    kept = [a for a, d in fits if d is not None and d <= threshold]
    return float(np.mean(kept)) if kept else None


def default_layer_filter(name, tensor, trainable=True):
    return tensor.ndim >= 2 and "pos_emb" not in name


def trainable_layer_filter(name, tensor, trainable=True):
    return trainable and default_layer_filter(name, tensor)


LAYER_FILTERS = {"all": default_layer_filter, "trainable": trainable_layer_filter}


def _resolve_filter(layer_filter):
    if layer_filter is None:
        return default_layer_filter
    if callable(layer_filter):
        return layer_filter
    if layer_filter in LAYER_FILTERS:
        return LAYER_FILTERS[layer_filter]
    pattern = re.compile(layer_filter)
    return lambda name, t, trainable=True: t.ndim >= 2 and bool(pattern.search(name))


def diagnose(checkpoint, layer_filter=None, ks_threshold=DEFAULT_KS_THRESHOLD) -> EsdReport:
    """Per-layer ESD, PL and TPL fits and stable rank for every selected matrix.

    A layer enters the alpha metric when the better of its PL/TPL fits has KS
    distance <= ``ks_threshold``; alpha < 2 is flagged unreliable but kept.
    ``layer_filter`` is ``"all"``, ``"trainable"``, a name regex, or a callable
    ``(name, tensor, trainable) -> bool``.
    """
    store = checkpoint if isinstance(checkpoint, ParamStore) else ParamStore.load(checkpoint)
    keep = _resolve_filter(layer_filter)
    layers = []
    for name in sorted(store.names()):
        t = store[name]
        if t.ndim < 2 or t.ndim > 3 or not keep(name, t, store.trainable[name]):
            continue
        w = as_matrix(t)
        esd = gram_esd(w, name)
        diag = LayerDiagnosis(name, list(w.shape), esd.eigenvalues.tolist(), stable_rank(w))
        try:
            pl = fit_pl(esd)
            tpl = fit_tpl(esd)
        except FitError as exc:
            diag.fit_error = str(exc)
        else:
            diag.pl = pl.to_dict()
            diag.tpl = tpl.to_dict()
            diag.included = min(pl.ks_distance, tpl.ks_distance) <= ks_threshold
            diag.unreliable = pl.alpha < UNRELIABLE_ALPHA
        diag.kinks = kink_candidates(esd)
        layers.append(diag)
    if not layers:
        raise DiagnosticsError("no layer passes the filter")
    included = [d.name for d in layers if d.included]
    metric = alpha_metric(
        [(d.pl["alpha"], min(d.pl["ks_distance"], d.tpl["ks_distance"])) for d in layers if d.included],
        ks_threshold,
    )
    return EsdReport(
        layers=layers,
        alpha_metric=metric,
        stable_rank=float(np.mean([d.stable_rank for d in layers])),
        included=included,
        ks_threshold=ks_threshold,
    )
