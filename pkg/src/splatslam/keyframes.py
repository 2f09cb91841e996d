"""Two-stage keyframe selection: a reprojection-ratio window on map overlap
and a semantic-novelty check against the last selected keyframe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import Frame, GaussianMap, Intrinsics, Pose
from .render import RenderConfig, render


@dataclass
class KeyframeConfig:
    eta_range: tuple = (0.3, 0.99)
    sem_eps: float = 0.01
    snapshot_size: tuple = (64, 48)     # (width, height) of the argmax raster
    near_clip: float = 0.01
    far_clip: float = 100.0


@dataclass
class KeyframeRecord:
    frame_index: int
    pose: Pose
    sem_snapshot: np.ndarray


def reprojection_ratio(gmap: GaussianMap, pose: Pose, K: Intrinsics,
                       near_clip: float = 0.01, far_clip: float = 100.0) -> float:
    """Fraction of map primitives whose center lands in the view frustum."""
    if len(gmap) == 0:
        raise ValueError("empty map")
    with torch.no_grad():
        R = torch.as_tensor(pose.rotation_matrix(), dtype=gmap.mu.dtype)
        t = torch.as_tensor(pose.t, dtype=gmap.mu.dtype)
        cam = (gmap.mu - t) @ R        # rows: R^T @ (mu - t)
        z = cam[:, 2]
        in_depth = (z > near_clip) & (z < far_clip)
        zs = z.clamp(min=near_clip)
        u = K.fx * cam[:, 0] / zs + K.cx
        v = K.fy * cam[:, 1] / zs + K.cy
        inside = in_depth & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        return float(inside.sum()) / len(gmap)


def geometry_filter(eta: float, eta_range=(0.3, 0.95)) -> bool:
    lo, hi = eta_range
    return lo <= eta <= hi


def _nearest_resize(raster: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = raster.shape
    rows = np.minimum((np.arange(height) + 0.5) * h / height, h - 1).astype(int)
    cols = np.minimum((np.arange(width) + 0.5) * w / width, w - 1).astype(int)
    return raster[np.ix_(rows, cols)]


def semantic_snapshot(gmap: GaussianMap, pose: Pose, K: Intrinsics,
                      render_cfg: RenderConfig, size=(64, 48)) -> np.ndarray:
    buf = render(gmap, pose, K, render_cfg, track_grad=False)
    argmax = buf.sem.numpy().argmax(axis=-1).astype(np.int32)
    return _nearest_resize(argmax, size[0], size[1])


def semantic_filter(candidate_snapshot, last_kf_snapshot, eps: float = 0.01) -> bool:
    """Keep the candidate when it differs from the last keyframe on more than
    an eps fraction of cells; identical views carry no new semantics."""
    if last_kf_snapshot is None:
        return True
    a = np.asarray(candidate_snapshot)
    b = np.asarray(last_kf_snapshot)
    if a.shape != b.shape:
        raise ValueError("snapshot shapes differ")
    return float((a != b).mean()) > eps


def select_keyframe(frame: Frame, pose: Pose, gmap: GaussianMap,
                    last_kf: KeyframeRecord | None,
                    cfg: KeyframeConfig = KeyframeConfig(),
                    render_cfg: RenderConfig = RenderConfig()):
    """Returns (selected, record|None). The first frame is always selected."""
    if last_kf is None or len(gmap) == 0:
        snap = (semantic_snapshot(gmap, pose, frame.intrinsics, render_cfg,
                                  cfg.snapshot_size)
                if len(gmap) else np.zeros((cfg.snapshot_size[1],
                                            cfg.snapshot_size[0]), np.int32))
        return True, KeyframeRecord(frame.index, pose, snap)

    eta = reprojection_ratio(gmap, pose, frame.intrinsics,
                             cfg.near_clip, cfg.far_clip)
    if not geometry_filter(eta, cfg.eta_range):
        return False, None
    snap = semantic_snapshot(gmap, pose, frame.intrinsics, render_cfg,
                             cfg.snapshot_size)
    if not semantic_filter(snap, last_kf.sem_snapshot, cfg.sem_eps):
        return False, None
    return True, KeyframeRecord(frame.index, pose, snap)
