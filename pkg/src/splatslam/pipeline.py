"""End-to-end runner: frame-0 bootstrap, the tracking -> keyframe -> mapping
loop, evaluation against ground truth, artifact export (TUM trajectories,
report.json, map.npz, figures) and the four-configuration ablation harness.

Runs are deterministic for a fixed config and seed: all sampling goes through
one seeded generator consumed in frame order, and torch runs single-threaded
CPU kernels.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Pose, TrackingError
from .dataset import DatasetBundle, write_trajectory
from .drb import ssim
from .keyframes import KeyframeConfig, select_keyframe, semantic_snapshot, KeyframeRecord
from .mapping import (MapKeyframe, MappingConfig, densify, optimize_map,
                      prune, select_window)
from .metrics import EvalReport, ate_rmse, depth_l1, miou, psnr
from .palette import PaletteSpec
from .render import RenderConfig, render
from .tracking import TrackerState, TrackingConfig, track_frame

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    seed: int = 0
    enable_ian: bool = True
    enable_drb: bool = True
    gate_threshold: float = 0.5
    dtype: str = "float32"
    background: tuple = (0.0, 0.0, 0.0)
    palette: PaletteSpec = field(default_factory=PaletteSpec)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    keyframes: KeyframeConfig = field(default_factory=KeyframeConfig)
    bootstrap_cap: int = 900
    bootstrap_px_radius: float = 2.4
    bootstrap_iters: int = 100
    max_failure_fraction: float = 0.2
    save_figures: bool = True

    def render_config(self) -> RenderConfig:
        return RenderConfig(quantize_albedo=self.enable_ian,
                            palette=self.palette,
                            background=tuple(self.background),
                            dtype=self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d


@dataclass
class PipelineResult:
    report: EvalReport
    est: list                    # (frame index, Pose) per successfully tracked frame
    gmap: object
    keyframes: list              # MapKeyframe entries
    failures: int = 0


def _effective_configs(cfg: PipelineConfig, has_semantics: bool):
    tracking = replace(cfg.tracking, gate_threshold=cfg.gate_threshold)
    mapping = replace(cfg.mapping)
    if not has_semantics:
        tracking = replace(tracking, lambda_sem=0.0)
        mapping = replace(mapping, lambda_sem=0.0)
    if not cfg.enable_drb:
        tracking = replace(tracking, lambda_drb=0.0)
        mapping = replace(mapping, lambda_drb=0.0)
    return tracking, mapping


def run_pipeline(dataset: DatasetBundle, cfg: PipelineConfig = PipelineConfig(),
                 out_dir=None) -> PipelineResult:
    frames = dataset.frames
    if not frames:
        raise ValueError("dataset has no frames")
    rng = np.random.default_rng(cfg.seed)
    render_cfg = cfg.render_config()
    tracking_cfg, mapping_cfg = _effective_configs(cfg, dataset.has_semantics)
    kf_cfg = cfg.keyframes

    from .core import GaussianMap
    gmap = GaussianMap.empty(dataset.class_count)

    # bootstrap: back-project frame 0 at gt depth, then map-only optimization
    pose0 = dataset.gt_poses[0] if dataset.gt_poses else Pose.identity()
    kf0 = MapKeyframe(frame=frames[0], pose=pose0)
    densify(gmap, [kf0], mapping_cfg, render_cfg, rng,
            cap=cfg.bootstrap_cap, px_radius=cfg.bootstrap_px_radius)
    optimize_map([kf0], gmap, mapping_cfg, render_cfg, rng,
                 iters=cfg.bootstrap_iters)
    prune(gmap, mapping_cfg)
    log.info("bootstrap: %d primitives from frame 0", len(gmap))

    keyframes = [kf0]
    last_record = KeyframeRecord(
        frames[0].index, pose0,
        semantic_snapshot(gmap, pose0, frames[0].intrinsics, render_cfg,
                          kf_cfg.snapshot_size))
    est = [(frames[0].index, pose0)]
    state = TrackerState(prev_pose=pose0, curr_pose=pose0)
    failures = 0

    for frame in frames[1:]:
        try:
            res = track_frame(frame, state, gmap, tracking_cfg, render_cfg,
                              enable_drb=cfg.enable_drb)
        except TrackingError as exc:
            failures += 1
            log.warning("frame %d: tracking failed (%s), skipping", frame.index, exc)
            continue
        est.append((frame.index, res.pose))
        state.advance(res.pose, res.theta, res.gate.active)

        selected, record = select_keyframe(frame, res.pose, gmap, last_record,
                                           kf_cfg, render_cfg)
        if selected:
            keyframes.append(MapKeyframe(frame=frame, pose=res.pose,
                                         gate=res.gate, theta=res.theta))
            last_record = record
            window = select_window(keyframes, mapping_cfg.keyframe_window)
            densify(gmap, window, mapping_cfg, render_cfg, rng)
            optimize_map(window, gmap, mapping_cfg, render_cfg, rng)
            prune(gmap, mapping_cfg)
            log.info("frame %d: keyframe accepted (gate %.3f%s), map size %d",
                     frame.index, res.gate.score,
                     " ACTIVE" if res.gate.active else "", len(gmap))

    failed = failures > cfg.max_failure_fraction * max(len(frames) - 1, 1)
    report = _evaluate(dataset, gmap, est, keyframes, render_cfg)
    report.failed = failed
    report.tracked_frames = len(est)
    report.keyframe_indices = [kf.frame.index for kf in keyframes]
    result = PipelineResult(report=report, est=est, gmap=gmap,
                            keyframes=keyframes, failures=failures)
    if out_dir is not None:
        _export(result, dataset, cfg, render_cfg, Path(out_dir))
    return result


def _evaluate(dataset: DatasetBundle, gmap, est, keyframes, render_cfg) -> EvalReport:
    frames_by_index = {f.index: f for f in dataset.frames}
    kf_set = {kf.frame.index for kf in keyframes}
    per_frame = []
    for idx, pose in est:
        frame = frames_by_index[idx]
        buf = render(gmap, pose, frame.intrinsics, render_cfg, track_grad=False)
        color = np.clip(buf.color.numpy().astype(np.float64), 0.0, 1.0)
        depth = buf.depth.numpy().astype(np.float64)
        row = {
            "frame": idx,
            "keyframe": idx in kf_set,
            "psnr_db": psnr(color, frame.rgb),
            "ssim": float(ssim(color, frame.rgb)[0]),
            "depth_l1_cm": depth_l1(depth, frame.depth),
            "miou_percent": (miou(buf.sem.numpy().argmax(-1), frame.sem,
                                  dataset.class_count)
                             if dataset.has_semantics else None),
        }
        per_frame.append(row)

    ate = None
    if dataset.gt_poses is not None and len(est) >= 2:
        gt = [dataset.gt_poses[idx] for idx, _ in est]
        ate = ate_rmse([p for _, p in est], gt)
    mious = [r["miou_percent"] for r in per_frame if r["miou_percent"] is not None]
    return EvalReport(
        ate_rmse_cm=ate,
        psnr_db=float(np.mean([r["psnr_db"] for r in per_frame])),
        ssim=float(np.mean([r["ssim"] for r in per_frame])),
        miou_percent=float(np.mean(mious)) if mious else None,
        depth_l1_cm=float(np.mean([r["depth_l1_cm"] for r in per_frame])),
        per_frame=per_frame,
    )


def _export(result: PipelineResult, dataset: DatasetBundle, cfg: PipelineConfig,
            render_cfg: RenderConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "est_traj.txt", result.est)
    if dataset.gt_poses is not None:
        write_trajectory(out / "gt_traj.txt",
                         [(f.index, p) for f, p in zip(dataset.frames, dataset.gt_poses)])
    result.gmap.save(out / "map.npz")
    (out / "report.json").write_text(
        result.report.to_json(extra={"config": cfg.to_dict()}) + "\n")
    if cfg.save_figures:
        from . import figures
        figdir = out / "figures"
        (figdir / "keyframes").mkdir(parents=True, exist_ok=True)
        figures.save_trajectory_plot(result.est, dataset.gt_poses,
                                     result.report.keyframe_indices,
                                     figdir / "trajectory.png")
        figures.save_metric_curves(result.report.per_frame, figdir / "metrics.png")
        for kf in result.keyframes:
            buf = render(result.gmap, kf.pose, kf.frame.intrinsics, render_cfg,
                         track_grad=False)
            figures.save_keyframe_panel(kf.frame, buf.numpy(),
                                        figdir / "keyframes" / f"kf_{kf.frame.index:06d}.png",
                                        dataset.class_count)


ABLATION_VARIANTS = (
    ("baseline", False, False),
    ("ian", True, False),
    ("drb", False, True),
    ("full", True, True),
)


def run_ablation(dataset: DatasetBundle, cfg: PipelineConfig = PipelineConfig(),
                 out_dir=None) -> list:
    """Run {baseline, +IAN, +DRB, full} with identical data and seed; returns
    [(setting, EvalReport)] and writes ablation.csv plus a chart."""
    rows = []
    for name, ian, drb in ABLATION_VARIANTS:
        variant = replace(cfg, enable_ian=ian, enable_drb=drb)
        sub = Path(out_dir) / name if out_dir is not None else None
        log.info("ablation: running %s", name)
        result = run_pipeline(dataset, variant, sub)
        rows.append((name, result.report))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["setting", "depth_l1_cm", "ate_rmse_cm",
                             "psnr_db", "miou_percent"])
            for name, rep in rows:
                writer.writerow([
                    name,
                    f"{rep.depth_l1_cm:.6f}",
                    "" if rep.ate_rmse_cm is None else f"{rep.ate_rmse_cm:.6f}",
                    f"{rep.psnr_db:.6f}",
                    "" if rep.miou_percent is None else f"{rep.miou_percent:.6f}",
                ])
        from . import figures
        figures.save_ablation_chart(rows, out / "ablation.png")
    return rows
