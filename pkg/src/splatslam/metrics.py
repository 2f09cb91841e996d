"""Evaluation metrics: trajectory error, rendering quality, semantics, depth."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PSNR_MAX_DB = 99.0


def ate_rmse(est, gt) -> float:
    """ATE RMSE in cm after closed-form rigid (no scale) alignment of the
    translation tracks."""
    if len(est) != len(gt):
        raise ValueError("trajectory lengths differ")
    if len(est) < 2:
        raise ValueError("need at least two poses")
    p = np.stack([e.t if hasattr(e, "t") else np.asarray(e, dtype=np.float64) for e in est])
    q = np.stack([g.t if hasattr(g, "t") else np.asarray(g, dtype=np.float64) for g in gt])
    pc = p - p.mean(axis=0)
    qc = q - q.mean(axis=0)
    # Kabsch: R minimizing ||R @ p_i + t - q_i||
    H = pc.T @ qc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = q.mean(axis=0) - R @ p.mean(axis=0)
    resid = (p @ R.T + t) - q
    return float(np.sqrt((resid**2).sum(axis=1).mean()) * 100.0)


def psnr(a, b) -> float:
    """PSNR in dB on unit dynamic range; identical images report the 99 dB
    sentinel instead of infinity."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_MAX_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_MAX_DB))


def miou(pred, gt, class_count: int) -> float:
    """Mean IoU in percent over the classes present in gt."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("raster shapes differ")
    ious = []
    for k in range(class_count):
        gt_k = gt == k
        if not gt_k.any():
            continue
        pred_k = pred == k
        inter = float(np.logical_and(pred_k, gt_k).sum())
        union = float(np.logical_or(pred_k, gt_k).sum())
        ious.append(inter / union)
    if not ious:
        raise ValueError("gt raster contains no classes")
    return float(np.mean(ious) * 100.0)


def depth_l1(pred, gt) -> float:
    """Mean absolute depth error in cm over pixels with valid (nonzero) gt."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("depth shapes differ")
    mask = gt > 0
    if not mask.any():
        raise ValueError("no valid gt depth pixels")
    return float(np.abs(pred[mask] - gt[mask]).mean() * 100.0)


@dataclass
class EvalReport:
    ate_rmse_cm: float | None
    psnr_db: float
    ssim: float
    miou_percent: float | None
    depth_l1_cm: float
    per_frame: list = field(default_factory=list)
    failed: bool = False
    tracked_frames: int = 0
    keyframe_indices: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ate_rmse_cm": self.ate_rmse_cm,
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "miou_percent": self.miou_percent,
            "depth_l1_cm": self.depth_l1_cm,
            "failed": self.failed,
            "tracked_frames": self.tracked_frames,
            "keyframe_indices": list(self.keyframe_indices),
            "per_frame": self.per_frame,
        }

    def to_json(self, extra: dict | None = None) -> str:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True)
