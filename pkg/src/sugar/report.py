"""File-writing report helpers: PNG contact sheets and matplotlib figures.

Every figure lands next to the delimited output it illustrates. Outputs are
deterministic: fixed figure sizes and dpi, no timestamps.
"""
from __future__ import annotations

import threading

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

UPSCALE = 8
SEPARATOR_PX = 2
_SAVEFIG = {"dpi": 100, "metadata": {"Software": None}}

# pyplot state is process-global; concurrent ablation cells serialize here
_PLOT_LOCK = threading.Lock()


def contact_sheet(video: np.ndarray, path: str) -> None:
    """All frames in a single row: 2-px separators, 8x nearest-neighbor upscale."""
    frames = np.clip(video, 0.0, 1.0)
    f, h, w, _ = frames.shape
    sep = np.ones((h * UPSCALE, SEPARATOR_PX, 3))
    tiles = []
    for i in range(f):
        big = frames[i].repeat(UPSCALE, axis=0).repeat(UPSCALE, axis=1)
        tiles.append(big)
        if i < f - 1:
            tiles.append(sep)
    sheet = (np.concatenate(tiles, axis=1) * 255).round().astype(np.uint8)
    Image.fromarray(sheet).save(path, format="PNG")


def save_loss_curve(log_rows: list[dict], path: str) -> None:
    with _PLOT_LOCK:
        steps = [r["step"] for r in log_rows]
        losses = [r["loss"] for r in log_rows]
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.plot(steps, losses, lw=0.8, color="tab:blue")
        stage_bounds = [r["step"] for i, r in enumerate(log_rows[1:], 1) if r["stage"] != log_rows[i - 1]["stage"]]
        for b in stage_bounds:
            ax.axvline(b, color="gray", ls="--", lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        ax.set_title("noise-prediction loss")
        fig.tight_layout()
        fig.savefig(path, **_SAVEFIG)
        plt.close(fig)


def save_pipeline_figure(counts: dict[str, int], path: str) -> None:
    with _PLOT_LOCK:
        names = [k for k in counts if k != "generated"]
        vals = [counts[k] for k in names]
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.bar(names, vals, color="tab:orange")
        ax.set_ylabel("samples")
        ax.set_title(f"pipeline outcomes (generated={counts.get('generated', 0)})")
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        fig.savefig(path, **_SAVEFIG)
        plt.close(fig)


def save_metric_bars(aggregate: dict[str, float], path: str) -> None:
    with _PLOT_LOCK:
        names = list(aggregate)
        vals = [aggregate[k] for k in names]
        fig, ax = plt.subplots(figsize=(6.5, 3.2))
        ax.bar(names, vals, color="tab:green")
        ax.set_title("aggregate metrics")
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        fig.savefig(path, **_SAVEFIG)
        plt.close(fig)


def save_sweep_figure(rows: list[dict], metric_keys: list[str], path: str) -> None:
    with _PLOT_LOCK:
        """One line per metric across sweep cells (x = cell order)."""
        labels = [r["cell"] for r in rows]
        x = np.arange(len(rows))
        fig, ax = plt.subplots(figsize=(7, 3.6))
        for key in metric_keys:
            ax.plot(x, [r["metrics"][key] for r in rows], marker="o", label=key, lw=1.0)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.legend(fontsize=7)
        ax.set_title("ablation sweep")
        fig.tight_layout()
        fig.savefig(path, **_SAVEFIG)
        plt.close(fig)
