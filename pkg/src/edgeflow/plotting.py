"""Figures written to files: flow colour panels, speed curves, sweep plots."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .datamodel import write_image  # noqa: E402


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Colour-wheel rendering: angle sets hue, magnitude sets saturation.

    Returns an ``H x W x 3`` uint8 image; zero flow is white.
    """
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max()) if mag.size else 0.0
    sat = np.clip(mag / max_mag, 0, 1) if max_mag > 0 else np.zeros_like(mag)
    hue = (np.arctan2(-v, -u) / np.pi + 1) / 2  # [0, 1]
    hsv = np.stack([hue, sat, np.ones_like(sat)], axis=-1)
    rgb = matplotlib.colors.hsv_to_rgb(hsv)
    return np.round(rgb * 255).astype(np.uint8)


def save_flow_png(flow: np.ndarray, path, max_mag: float | None = None) -> Path:
    write_image(flow_to_color(flow, max_mag), path)
    return Path(path)


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_speed_curves(rows: Sequence[dict], path) -> Path:
    """Max speed vs perception latency, one panel per family (length, depth)."""
    families = [f for f in ("length", "depth") if any(r["family"] == f for r in rows)]
    fig, axes = plt.subplots(1, max(len(families), 1), figsize=(5 * max(len(families), 1), 3.8), squeeze=False)
    for ax, fam in zip(axes[0], families):
        sub = [r for r in rows if r["family"] == fam]
        keys = sorted({(r[fam], r["dr"]) for r in sub})
        for val, dr in keys:
            pts = sorted((r["tau_p"], r["speed"]) for r in sub if r[fam] == val and r["dr"] == dr)
            t, s = zip(*pts)
            unit = "m"
            ax.plot(np.asarray(t) * 1e3, s, label=f"{'L' if fam == 'length' else 'Z'}={val:g} {unit}, DR={dr:g}")
        ax.set_xlabel("perception latency (ms)")
        ax.set_ylabel("max safe speed (m/s)")
        ax.set_title(f"varying {fam}")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    return _finish(fig, path)


def plot_overlap_sweep(rows: Sequence[dict], path) -> Path:
    """EPE and FPS against chunk overlap."""
    ov = [r["overlap_px"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ov, [r["epe"] for r in rows], "o-", color="C0")
    ax.set_xlabel("overlap (px)")
    ax.set_ylabel("EPE (px)", color="C0")
    ax2 = ax.twinx()
    ax2.plot(ov, [r["fps"] for r in rows], "s--", color="C1")
    ax2.set_ylabel("FPS (host)", color="C1")
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_iou_sweep(radii: Sequence[float], curves: dict[str, Sequence[float]], path) -> Path:
    """IoU of the obstacle mask against ball radius, one line per setting."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ious in curves.items():
        ax.plot(radii, ious, "o-", label=name)
    ax.set_xlabel("ball radius (px)")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _finish(fig, path)


def plot_history(history: Sequence[dict], path) -> Path:
    ep = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [h["train_loss"] for h in history], label="train loss")
    if any(h.get("val_epe") is not None for h in history):
        ax.plot(ep, [h["val_epe"] for h in history], label="val EPE")
    ax.set_xlabel("epoch")
    ax.grid(alpha=0.3)
    ax.legend()
    return _finish(fig, path)


def plot_bench(results, path) -> Path:
    labels = [r.label or str(r.shape) for r in results]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(range(len(results)), [r.fps for r in results], yerr=[r.iqr / 2 for r in results], color="C2")
    ax.set_xticks(range(len(results)), labels, rotation=20, fontsize=8)
    ax.set_ylabel("frames per second (host)")
    return _finish(fig, path)
