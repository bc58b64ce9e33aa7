"""Sparsification figures (PNG, no timestamps so reruns are byte-stable)."""
from __future__ import annotations

import io as _io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write  # noqa: E402

TITLES = {"absrel": "Abs Rel", "rmse": "RMSE", "delta": "δ ≥ 1.25"}


def _save(fig, path):
    buf = _io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def sparsification_figure(report, path):
    """Oracle / actual / random curves for one method, one panel per metric."""
    fig, axes = plt.subplots(1, len(report.curves), figsize=(4 * len(report.curves), 3.2))
    for ax, (kind, c) in zip(axes, report.curves.items()):
        x = 100 * c.fractions
        ax.plot(x, c.oracle, label="oracle", color="k", ls="--")
        ax.plot(x, c.actual, label=f"{report.method} (AUSE {c.ause:.3g})", color="C0")
        ax.plot(x, c.random, label="random", color="0.6", ls=":")
        ax.set_title(TITLES.get(kind, kind))
        ax.set_xlabel("pixels removed (%)")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def comparison_figure(reports, path):
    """Sparsification error (actual - oracle) of every method, per metric."""
    kinds = list(reports[0].curves)
    fig, axes = plt.subplots(1, len(kinds), figsize=(4 * len(kinds), 3.2))
    for ax, kind in zip(axes, kinds):
        for i, r in enumerate(reports):
            c = r.curves[kind]
            ax.plot(100 * c.fractions, c.actual - c.oracle, label=r.method, color=f"C{i % 10}")
        ax.set_title(f"{TITLES.get(kind, kind)}: actual - oracle")
        ax.set_xlabel("pixels removed (%)")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
