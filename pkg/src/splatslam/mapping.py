"""Joint optimization of all Gaussian parameters over the keyframe window,
plus depth-driven densification and opacity pruning.

Mapping supervises the *full* color render (albedo times illumination), unlike
tracking which matches the albedo channel; semantics switch from L1 to
cross-entropy. Keyframe poses are never touched here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import (Frame, GaussianMap, Pose, SplatError, quat_mul_t,
                   so3_exp_quat_t)
from .drb import ExposureParams, GateState, drb_term
from .optim import Adam
from .palette import quantize_array
from .render import RenderConfig, render, render_backward

MAP_PARAMS = ("mu", "rot", "scale", "opacity", "albedo", "log_illum", "sem_logits")


def default_map_lrs() -> dict:
    return {"mu": 2e-3, "rot": 1e-3, "scale": 2e-3, "opacity": 2e-2,
            "albedo": 1e-2, "log_illum": 1e-2, "sem_logits": 5e-2,
            "theta": 3e-2}


@dataclass
class MappingConfig:
    iters_per_round: int = 25
    pixels_per_keyframe: int = 1536
    lambda_depth: float = 1.0
    lambda_color: float = 0.5
    lambda_sem: float = 0.05
    lambda_drb: float = 1.0
    drb_lam1: float = 1.0
    drb_lam2: float = 0.5
    ce_floor: float = 1e-8
    densify_depth_err: float = 0.05
    densify_cap: int = 500
    densify_px_radius: float = 1.8
    densify_opacity: float = 0.5
    densify_sem_logit: float = 5.0
    prune_opacity: float = 0.05
    keyframe_window: int = 8
    keyframes_per_step: int = 3     # window members sampled per descent step
    lrs: dict = field(default_factory=default_map_lrs)
    optimize_params: tuple = MAP_PARAMS


@dataclass
class MapKeyframe:
    frame: Frame
    pose: Pose
    gate: GateState = field(default_factory=lambda: GateState(1.0, False))
    theta: ExposureParams = field(default_factory=ExposureParams)


@dataclass
class MappingLossResult:
    value: float
    param_grads: dict
    theta_grads: dict


@dataclass
class MappingStats:
    losses: list = field(default_factory=list)
    aborted: bool = False
    inserted: int = 0
    pruned: int = 0


def select_window(keyframes: list, size: int = 8) -> list:
    """Most recent `size` keyframes plus the first one as a global anchor."""
    if len(keyframes) <= size + 1:
        return list(keyframes)
    return [keyframes[0]] + keyframes[-size:]


def _sample_pixels(rng, K, count: int):
    total = K.width * K.height
    if count >= total:
        return None
    flat = rng.choice(total, size=count, replace=False)
    flat.sort()
    return np.column_stack([flat % K.width, flat // K.width]).astype(np.int64)


def mapping_loss(keyframes: list, gmap: GaussianMap,
                 cfg: MappingConfig = MappingConfig(),
                 render_cfg: RenderConfig = RenderConfig(),
                 rng: np.random.Generator | None = None) -> MappingLossResult:
    """One evaluation of the mapping loss over the window; returns gradients
    for every primitive parameter class (poses stay frozen) and for each
    flagged keyframe's exposure parameters."""
    if not keyframes:
        raise SplatError("mapping needs at least one keyframe")
    if cfg.pixels_per_keyframe <= 0:
        raise SplatError("empty pixel sample")
    rng = rng or np.random.default_rng(0)

    sums: dict = {}
    theta_grads: dict = {}
    total_value = 0.0
    n_kf = len(keyframes)

    for kf in keyframes:
        frame, K = kf.frame, kf.frame.intrinsics
        flagged = kf.gate.active and cfg.lambda_drb > 0
        pixels = _sample_pixels(rng, K, cfg.pixels_per_keyframe)
        if flagged or pixels is None:
            # flagged frames render full-frame: the exposure term needs
            # spatially contiguous pixels for its gradient-difference part
            buffers = render(gmap, kf.pose, K, render_cfg)
            if pixels is None:
                buf_sel = gt_sel = None
            else:
                buf_sel = gt_sel = (pixels[:, 1], pixels[:, 0])
        else:
            buffers = render(gmap, kf.pose, K, render_cfg, pixels=pixels)
            buf_sel, gt_sel = None, (pixels[:, 1], pixels[:, 0])
        dt_ = buffers.color.dtype

        heads = {name: getattr(buffers, name).detach().requires_grad_(True)
                 for name in ("color", "depth", "sem")}

        def pick_buf(t):
            return t if buf_sel is None else t[buf_sel]

        def pick_gt(a):
            return np.ascontiguousarray(a if gt_sel is None else a[gt_sel])

        rgb_t = torch.as_tensor(pick_gt(frame.rgb)).to(dt_)
        depth_t = torch.as_tensor(pick_gt(frame.depth)).to(dt_)
        sem_t = torch.as_tensor(pick_gt(frame.sem), dtype=torch.long)

        terms = []
        mask = (depth_t > 0) & (pick_buf(buffers.coverage.detach()) > 0.5)
        if cfg.lambda_depth > 0 and int(mask.sum()) > 0:
            terms.append(cfg.lambda_depth * (pick_buf(heads["depth"]) - depth_t).abs()[mask].mean())
        if cfg.lambda_color > 0:
            terms.append(cfg.lambda_color * (pick_buf(heads["color"]) - rgb_t).abs().mean())
        if cfg.lambda_sem > 0:
            probs = pick_buf(heads["sem"]).reshape(-1, gmap.class_count)
            picked = probs[torch.arange(sem_t.numel()), sem_t.reshape(-1)]
            terms.append(cfg.lambda_sem * (-(picked + cfg.ce_floor).log()).mean())
        theta_t = None
        if flagged:
            theta_t = kf.theta.tensor(requires_grad=True).to(dt_)
            full_rgb = torch.as_tensor(frame.rgb).to(dt_)
            terms.append(cfg.lambda_drb * drb_term(heads["color"], full_rgb,
                                                   theta_t, kf.gate,
                                                   cfg.drb_lam1, cfg.drb_lam2))
        if not terms:
            continue
        kf_loss = sum(terms) / n_kf
        total_value += float(kf_loss.detach())

        inputs = list(heads.values()) + ([theta_t] if theta_t is not None else [])
        grads = torch.autograd.grad(kf_loss, inputs, allow_unused=True)
        upstream = {name: (g if g is not None else torch.zeros_like(h))
                    for (name, h), g in zip(heads.items(), grads)}
        if theta_t is not None:
            tg = grads[-1]
            theta_grads[frame.index] = (tg.detach().to(torch.float64).numpy()
                                        if tg is not None else np.zeros(2))

        rg = render_backward(gmap, kf.pose, K, buffers, upstream, wrt=MAP_PARAMS)
        for cls in MAP_PARAMS:
            g = getattr(rg, cls).to(torch.float64)
            sums[cls] = g if cls not in sums else sums[cls] + g

    param_grads = {cls: sums.get(cls, torch.zeros_like(getattr(gmap, cls)))
                   for cls in MAP_PARAMS}
    return MappingLossResult(value=total_value, param_grads=param_grads,
                             theta_grads=theta_grads)


def _apply_deltas(gmap: GaussianMap, deltas: dict):
    with torch.no_grad():
        for cls, d in deltas.items():
            if cls == "rot":
                dq = so3_exp_quat_t(d.to(gmap.rot.dtype))
                gmap.rot.copy_(quat_mul_t(dq, gmap.rot))
            else:
                getattr(gmap, cls).add_(d.to(getattr(gmap, cls).dtype))
    gmap.project_constraints()


def optimize_map(keyframes: list, gmap: GaussianMap,
                 cfg: MappingConfig = MappingConfig(),
                 render_cfg: RenderConfig = RenderConfig(),
                 rng: np.random.Generator | None = None,
                 iters: int | None = None) -> MappingStats:
    """Descent rounds on the mapping loss; mutates the map in place and
    re-optimizes each flagged keyframe's exposure parameters alongside.
    Non-finite losses abort, restoring the last good parameters."""
    rng = rng or np.random.default_rng(0)
    stats = MappingStats()
    steps = cfg.iters_per_round if iters is None else iters
    if steps <= 0 or not keyframes:
        return stats
    adam = Adam(cfg.lrs)
    backup = {cls: getattr(gmap, cls).clone() for cls in MAP_PARAMS}
    kf_list = list(keyframes)

    for _ in range(steps):
        # per-step subsample of the window: always the newest keyframe and the
        # first (anchor), the rest drawn uniformly, so the pixel set resamples
        # across keyframes without a full-window render every step
        if 0 < cfg.keyframes_per_step < len(kf_list):
            pool = np.arange(1, len(kf_list) - 1)
            take = max(cfg.keyframes_per_step - 2, 0)
            extra = rng.choice(pool, size=min(take, pool.size), replace=False) \
                if pool.size else np.array([], int)
            picked = sorted({0, len(kf_list) - 1} | set(int(i) for i in extra))
        else:
            picked = range(len(kf_list))
        step_kfs = [kf_list[i] for i in picked]
        res = mapping_loss(step_kfs, gmap, cfg, render_cfg, rng)
        if not np.isfinite(res.value):
            with torch.no_grad():
                for cls in MAP_PARAMS:
                    getattr(gmap, cls).copy_(backup[cls])
            gmap.touch()
            stats.aborted = True
            break
        backup = {cls: getattr(gmap, cls).clone() for cls in MAP_PARAMS}
        stats.losses.append(res.value)

        grads = {cls: res.param_grads[cls] for cls in cfg.optimize_params}
        by_frame = {kf.frame.index: kf for kf in step_kfs}
        for fidx, tg in res.theta_grads.items():
            grads[f"theta_{fidx}"] = torch.as_tensor(tg)
        lr_map = dict(cfg.lrs)
        for key in grads:
            if key.startswith("theta_"):
                lr_map[key] = cfg.lrs.get("theta", 3e-2)
        adam.lrs = lr_map
        deltas = adam.step(grads)

        _apply_deltas(gmap, {k: v for k, v in deltas.items() if k in MAP_PARAMS})
        for fidx in res.theta_grads:
            d = deltas[f"theta_{fidx}"]
            kf = by_frame[fidx]
            kf.theta = ExposureParams(g=kf.theta.g + float(d[0]),
                                      o=kf.theta.o + float(d[1])).projected()
    return stats


def densify(gmap: GaussianMap, keyframes: list,
            cfg: MappingConfig = MappingConfig(),
            render_cfg: RenderConfig = RenderConfig(),
            rng: np.random.Generator | None = None,
            cap: int | None = None, px_radius: float | None = None) -> int:
    """Insert primitives where the newest keyframe sees missing or wrong
    geometry: valid gt depth with low coverage or large depth error."""
    rng = rng or np.random.default_rng(0)
    kf = keyframes[-1]
    frame, K = kf.frame, kf.frame.intrinsics
    cap = cap if cap is not None else cfg.densify_cap
    radius = px_radius if px_radius is not None else cfg.densify_px_radius

    if len(gmap):
        buf = render(gmap, kf.pose, K, render_cfg, track_grad=False)
        depth_r = buf.depth.numpy()
        coverage = buf.coverage.numpy()
    else:
        depth_r = np.zeros((K.height, K.width))
        coverage = np.zeros((K.height, K.width))

    valid = frame.depth > 0
    trigger = valid & ((coverage < 0.5)
                       | (np.abs(depth_r - frame.depth) > cfg.densify_depth_err))
    ys, xs = np.nonzero(trigger)
    if ys.size == 0:
        return 0
    if ys.size > cap:
        pick = np.sort(rng.choice(ys.size, size=cap, replace=False))
        ys, xs = ys[pick], xs[pick]

    z = frame.depth[ys, xs]
    xc = (xs - K.cx) * z / K.fx
    yc = (ys - K.cy) * z / K.fy
    cam = np.column_stack([xc, yc, z])
    R = kf.pose.rotation_matrix()
    world = cam @ R.T + kf.pose.t

    n = len(ys)
    albedo = quantize_array(frame.rgb[ys, xs], render_cfg.palette)
    scale = np.repeat((z / (0.5 * (K.fx + K.fy)) * radius)[:, None], 3, axis=1)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    sem = np.zeros((n, gmap.class_count))
    sem[np.arange(n), frame.sem[ys, xs]] = cfg.densify_sem_logit
    block = GaussianMap(world, rot, scale, np.full(n, cfg.densify_opacity),
                        albedo, np.zeros(n), sem, gmap.class_count)
    gmap.append(block)
    return n


def prune(gmap: GaussianMap, cfg: MappingConfig = MappingConfig()) -> int:
    """Drop primitives that are nearly transparent or numerically broken."""
    if len(gmap) == 0:
        return 0
    with torch.no_grad():
        finite = (torch.isfinite(gmap.mu).all(dim=1)
                  & torch.isfinite(gmap.rot).all(dim=1)
                  & torch.isfinite(gmap.scale).all(dim=1)
                  & torch.isfinite(gmap.opacity)
                  & torch.isfinite(gmap.albedo).all(dim=1)
                  & torch.isfinite(gmap.log_illum)
                  & torch.isfinite(gmap.sem_logits).all(dim=1))
        keep = finite & (gmap.opacity >= cfg.prune_opacity)
    removed = int((~keep).sum())
    if removed:
        gmap.keep(keep)
    return removed
