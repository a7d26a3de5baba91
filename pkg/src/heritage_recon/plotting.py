"""Diagnostic figures written straight to image files (Agg backend)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_losses(records: list[dict], path) -> Path:
    """Loss terms against step on a log axis, plus the sharpness s."""
    path = Path(path)
    fig, (ax, ax_s) = plt.subplots(1, 2, figsize=(10, 3.8))
    steps = [r["step"] for r in records]
    for key in ("l_color", "l_geo", "l_eik", "total"):
        vals = [r.get(key) for r in records]
        if any(v is not None for v in vals):
            ax.plot(steps, [float("nan") if v is None else v for v in vals], label=key, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax_s.plot(steps, [r["s"] for r in records], color="k", lw=0.8)
    ax_s.set_xlabel("step")
    ax_s.set_ylabel("sharpness s")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pr_curve(curve: dict, path, title: str = "") -> Path:
    """Precision, recall and F1 against threshold; ``curve`` holds equal-length lists."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.8))
    for key in ("precision", "recall", "f1"):
        ax.plot(curve["tau"], [100 * v for v in curve[key]], label=key)
    ax.set_xlabel("threshold")
    ax.set_ylabel("percent")
    ax.set_ylim(0, 101)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
