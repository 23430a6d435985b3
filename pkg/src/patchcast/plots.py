"""SVG figures: ESD CCDF with the fitted tail, and loss curves colored by a spectral metric."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import RenderError  # noqa: E402
from .htsr import PowerLawFit, ccdf, pl_ccdf_line  # noqa: E402
from .utils import atomic_write_bytes  # noqa: E402

# fixed ids and no timestamp so reruns are byte-identical
STYLE = {"svg.hashsalt": "patchcast", "svg.fonttype": "none"}


def _save(fig, path=None):
    buf = io.BytesIO()
    with matplotlib.rc_context(STYLE):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    data = buf.getvalue()
    if path is not None:
        atomic_write_bytes(path, data)
    return data


def plot_ccdf(eigenvalues, fit: PowerLawFit | dict | None = None, title="", path=None) -> bytes:
    """Log-log CCDF of an ESD, the fitted PL tail and a marker at lambda_min."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    x, y = ccdf(np.sort(lam))
    keep = (x > 0) & (y > 0)
    if not keep.any():
        raise RenderError("nothing to draw: spectrum has no positive CCDF points")
    if isinstance(fit, dict):
        fit = PowerLawFit(**fit)
    with matplotlib.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.loglog(x[keep], y[keep], ".", ms=3, label="ESD")
        if fit is not None:
            xs, ys = pl_ccdf_line(fit, float(x.max()), lam.size)
            ax.loglog(xs, ys, "-", lw=1.2, label=f"PL alpha={fit.alpha:.2f}")
            ax.axvline(fit.xmin, color="k", ls="--", lw=0.8, label="lambda_min")
        ax.set_xlabel("eigenvalue")
        ax.set_ylabel("CCDF")
        if title:
            ax.set_title(title)
        ax.legend(fontsize=8)
        fig.tight_layout()
    return _save(fig, path)


def color_range(rows, color_by="alpha_metric"):
    """(min, max) of ``color_by`` over the rows that carry it; the colorbar spans exactly this."""
    values = [r[color_by] for r in rows if r.get(color_by) is not None]
    return (min(values), max(values)) if values else None


def plot_loss_colored(rows, color_by="alpha_metric", loss_key="train_loss", path=None) -> bytes:
    """Loss vs epoch per run, points colored by ``color_by`` (alpha metric or stable rank)."""
    rows = list(rows)
    if not rows:
        raise RenderError("no data series")
    runs = []
    for r in rows:
        if r["run"] not in runs:
            runs.append(r["run"])
    bounds = color_range(rows, color_by)
    with matplotlib.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        norm = matplotlib.colors.Normalize(*bounds) if bounds else None
        for name in runs:
            pts = [r for r in rows if r["run"] == name and r.get(loss_key) is not None]
            if not pts:
                continue
            ep = [r["epoch"] for r in pts]
            loss = [r[loss_key] for r in pts]
            ax.plot(ep, loss, "-", color="0.7", lw=0.8)
            ax.annotate(name, (ep[-1], loss[-1]), fontsize=6)
            colored = [r for r in pts if r.get(color_by) is not None]
            if colored and norm is not None:
                ax.scatter(
                    [r["epoch"] for r in colored],
                    [r[loss_key] for r in colored],
                    c=[r[color_by] for r in colored],
                    cmap="viridis",
                    norm=norm,
                    s=14,
                    zorder=3,
                )
            grey = [r for r in pts if r.get(color_by) is None]
            if grey:
                ax.scatter([r["epoch"] for r in grey], [r[loss_key] for r in grey], c="0.5", marker="x", s=10)
        if norm is not None:
            fig.colorbar(matplotlib.cm.ScalarMappable(norm=norm, cmap="viridis"), ax=ax, label=color_by)
        ax.set_xlabel("epoch")
        ax.set_ylabel(loss_key)
        fig.tight_layout()
    return _save(fig, path)
