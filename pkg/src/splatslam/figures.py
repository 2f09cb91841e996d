"""Matplotlib exports written next to the delimited outputs: keyframe render
panels, trajectory overlays, per-frame metric curves and the ablation chart."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 110


def _imshow(ax, img, title, **kw):
    ax.imshow(img, interpolation="nearest", **kw)
    ax.set_title(title, fontsize=8)
    ax.axis("off")


def save_keyframe_panel(frame, buffers_np: dict, path, class_count: int):
    """Observed vs rendered color/albedo/depth/semantics for one keyframe."""
    fig, axes = plt.subplots(2, 4, figsize=(9, 4.2))
    depth_max = max(float(frame.depth.max()), float(buffers_np["depth"].max()), 1e-6)
    _imshow(axes[0, 0], np.clip(frame.rgb, 0, 1), "observed rgb")
    _imshow(axes[0, 1], np.clip(buffers_np["color"], 0, 1), "rendered color")
    _imshow(axes[0, 2], np.clip(buffers_np["albedo"], 0, 1), "rendered albedo")
    _imshow(axes[0, 3], buffers_np["coverage"], "coverage", vmin=0, vmax=1, cmap="gray")
    _imshow(axes[1, 0], frame.depth, "observed depth", vmin=0, vmax=depth_max, cmap="viridis")
    _imshow(axes[1, 1], buffers_np["depth"], "rendered depth", vmin=0, vmax=depth_max, cmap="viridis")
    _imshow(axes[1, 2], frame.sem, "observed classes", vmin=0, vmax=class_count - 1, cmap="tab10")
    _imshow(axes[1, 3], buffers_np["sem"].argmax(-1), "rendered classes",
            vmin=0, vmax=class_count - 1, cmap="tab10")
    fig.suptitle(f"keyframe {frame.index}", fontsize=10)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=DPI)
    plt.close(fig)


def save_trajectory_plot(est, gt, keyframe_indices, path):
    """Top-down (x, y) view of estimated vs ground-truth camera tracks."""
    fig, ax = plt.subplots(figsize=(5, 5))
    est_t = np.stack([p.t for _, p in est])
    ax.plot(est_t[:, 0], est_t[:, 1], "o-", ms=2.5, lw=1, label="estimated")
    if gt is not None:
        gt_t = np.stack([p.t for p in gt])
        ax.plot(gt_t[:, 0], gt_t[:, 1], "k--", lw=1, label="ground truth")
    kf = [i for i, (idx, _) in enumerate(est) if idx in set(keyframe_indices)]
    if kf:
        ax.plot(est_t[kf, 0], est_t[kf, 1], "r^", ms=5, label="keyframes")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    ax.set_title("camera trajectory (top view)")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=DPI)
    plt.close(fig)


def save_metric_curves(per_frame: list, path):
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    idx = [r["frame"] for r in per_frame]
    axes[0].plot(idx, [r["psnr_db"] for r in per_frame], "o-", ms=3)
    axes[0].set_title("PSNR [dB]")
    axes[1].plot(idx, [r["depth_l1_cm"] for r in per_frame], "o-", ms=3, color="tab:orange")
    axes[1].set_title("depth L1 [cm]")
    miou = [(r["frame"], r["miou_percent"]) for r in per_frame
            if r.get("miou_percent") is not None]
    if miou:
        axes[2].plot([m[0] for m in miou], [m[1] for m in miou], "o-", ms=3,
                     color="tab:green")
    axes[2].set_title("mIoU [%]")
    for ax in axes:
        ax.set_xlabel("frame")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=DPI)
    plt.close(fig)


def save_ablation_chart(rows: list, path):
    """rows: (setting name, EvalReport)."""
    names = [name for name, _ in rows]
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.0))
    metrics = [("ate_rmse_cm", "ATE RMSE [cm]"), ("depth_l1_cm", "depth L1 [cm]"),
               ("psnr_db", "PSNR [dB]"), ("miou_percent", "mIoU [%]")]
    for ax, (key, label) in zip(axes, metrics):
        vals = [getattr(rep, key) or 0.0 for _, rep in rows]
        ax.bar(range(len(names)), vals, color="tab:blue")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=7)
        ax.set_title(label, fontsize=9)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=DPI)
    plt.close(fig)
