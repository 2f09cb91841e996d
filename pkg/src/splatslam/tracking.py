"""Per-frame camera tracking: constant-velocity prediction, the multi-term
tracking loss (depth + albedo color + semantics + gated exposure correction),
and first-order descent on the se(3) tangent.

The color term deliberately compares the rendered *albedo* against the
observed image: the albedo channel is illumination-invariant, so tracking
stays stable when lighting drifts while the gated corrective term handles
outright exposure failures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import (Frame, GaussianMap, Pose, TrackingError, apply_tangent,
                   compose, inverse)
from .drb import ExposureParams, GateState, drb_term, evaluate_gate
from .optim import Adam
from .render import RenderConfig, render, render_backward


@dataclass
class TrackingConfig:
    iters: int = 80
    lr_rot: float = 4e-3
    lr_trans: float = 2e-2
    lr_exposure: float = 0.03
    decay_final: float = 0.005      # lr fraction reached on the last iteration
    grad_tol: float = 1e-6
    plateau_patience: int = 12      # stop when best loss stalls this long
    plateau_rel: float = 1e-3
    lambda_depth: float = 1.0
    lambda_color: float = 0.5
    lambda_sem: float = 0.1
    lambda_drb: float = 1.0
    drb_lam1: float = 1.0
    drb_lam2: float = 0.5
    gate_threshold: float = 0.5
    conventional_motion: bool = False


@dataclass
class TrackerState:
    prev_pose: Pose
    curr_pose: Pose
    theta: ExposureParams = field(default_factory=ExposureParams)
    last_gate_active: bool = False
    iterations: int = 0

    def advance(self, new_pose: Pose, theta: ExposureParams, gate_active: bool):
        self.prev_pose = self.curr_pose
        self.curr_pose = new_pose
        self.theta = theta
        self.last_gate_active = gate_active
        self.iterations += 1


@dataclass
class TrackingLossResult:
    value: float
    pose_grad: torch.Tensor
    theta_grad: np.ndarray | None
    buffers: object


@dataclass
class TrackResult:
    pose: Pose
    gate: GateState
    theta: ExposureParams
    converged: bool
    loss: float
    iters_run: int
    losses: list = field(default_factory=list)


def predict_pose(e_t: Pose, e_prev: Pose, conventional: bool = False) -> Pose:
    """Constant-velocity prediction. The default composes exactly as the
    motion model is written, E_t ∘ (E_t ∘ E_prev^-1); the conventional flag
    selects (E_t ∘ E_prev^-1) ∘ E_t for comparison."""
    motion = compose(e_t, inverse(e_prev))
    if conventional:
        return compose(motion, e_t)
    return compose(e_t, motion)


def one_hot_semantics(sem: np.ndarray, class_count: int, dtype) -> torch.Tensor:
    labels = torch.as_tensor(np.ascontiguousarray(sem), dtype=torch.long)
    return torch.nn.functional.one_hot(labels, class_count).to(dtype)


def tracking_loss(frame: Frame, gmap: GaussianMap, pose: Pose,
                  theta: ExposureParams, gate: GateState,
                  cfg: TrackingConfig = TrackingConfig(),
                  render_cfg: RenderConfig = RenderConfig()) -> TrackingLossResult:
    """Evaluate the tracking loss and its pose/exposure gradients at `pose`.

    Parameter gradients are produced by the renderer's reverse pass; this
    function only differentiates the shallow per-pixel loss head.
    """
    buffers = render(gmap, pose, frame.intrinsics, render_cfg)
    dt_ = buffers.color.dtype
    drb_on = gate.active and cfg.lambda_drb > 0

    heads = {}
    if cfg.lambda_depth > 0:
        heads["depth"] = buffers.depth.detach().requires_grad_(True)
    if cfg.lambda_color > 0:
        heads["albedo"] = buffers.albedo.detach().requires_grad_(True)
    if cfg.lambda_sem > 0:
        heads["sem"] = buffers.sem.detach().requires_grad_(True)
    if drb_on:
        heads["color"] = buffers.color.detach().requires_grad_(True)

    rgb_t = torch.as_tensor(frame.rgb).to(dt_)
    terms = []
    if cfg.lambda_depth > 0:
        depth_t = torch.as_tensor(frame.depth).to(dt_)
        mask = (depth_t > 0) & (buffers.coverage.detach() > 0.5)
        if int(mask.sum()) == 0:
            raise TrackingError(f"frame {frame.index}: no covered pixels with valid depth")
        terms.append(cfg.lambda_depth * (heads["depth"] - depth_t).abs()[mask].mean())
    if cfg.lambda_color > 0:
        terms.append(cfg.lambda_color * (heads["albedo"] - rgb_t).abs().mean())
    if cfg.lambda_sem > 0:
        onehot = one_hot_semantics(frame.sem, gmap.class_count, dt_)
        terms.append(cfg.lambda_sem * (heads["sem"] - onehot).abs().mean())
    theta_t = None
    if drb_on:
        theta_t = theta.tensor(requires_grad=True).to(dt_)
        terms.append(cfg.lambda_drb * drb_term(heads["color"], rgb_t, theta_t,
                                               gate, cfg.drb_lam1, cfg.drb_lam2))
    loss = sum(terms)

    inputs = list(heads.values()) + ([theta_t] if theta_t is not None else [])
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    upstream = {}
    for (name, head), g in zip(heads.items(), grads):
        upstream[name] = g if g is not None else torch.zeros_like(head)
    theta_grad = None
    if theta_t is not None:
        tg = grads[-1]
        theta_grad = (tg if tg is not None else torch.zeros(2, dtype=dt_)).numpy().astype(np.float64)

    rg = render_backward(gmap, pose, frame.intrinsics, buffers, upstream, wrt=("pose",))
    return TrackingLossResult(value=float(loss.detach()),
                              pose_grad=rg.pose.to(torch.float64),
                              theta_grad=theta_grad, buffers=buffers)


def track_frame(frame: Frame, state: TrackerState, gmap: GaussianMap,
                cfg: TrackingConfig = TrackingConfig(),
                render_cfg: RenderConfig = RenderConfig(),
                enable_drb: bool = True,
                init_pose: Pose | None = None) -> TrackResult:
    """Track one frame: predict, gate once, then descend the tracking loss.
    Returns the best-loss pose encountered (never worse than the init)."""
    if len(gmap) == 0:
        raise TrackingError("cannot track against an empty map")
    pose = init_pose or predict_pose(state.curr_pose, state.prev_pose,
                                     cfg.conventional_motion)

    if enable_drb:
        first = render(gmap, pose, frame.intrinsics, render_cfg, track_grad=False)
        rendered = np.clip(first.color.numpy(), 0.0, 1.0)
        gate = evaluate_gate(rendered, frame.rgb, threshold=cfg.gate_threshold)
    else:
        gate = GateState(score=1.0, active=False, threshold=cfg.gate_threshold)

    theta = ExposureParams()
    if gate.active and state.last_gate_active:
        theta = state.theta.projected()

    lrs = {"rot": cfg.lr_rot, "trans": cfg.lr_trans, "theta": cfg.lr_exposure}
    adam = Adam(lrs)
    decay = cfg.decay_final ** (1.0 / max(cfg.iters - 1, 1))

    best_loss = np.inf
    best_pose, best_theta = pose, theta
    losses = []
    converged = False
    iters_run = 0
    stall = 0
    res = None
    for i in range(cfg.iters + 1):
        res = tracking_loss(frame, gmap, pose, theta, gate, cfg, render_cfg)
        if not np.isfinite(res.value):
            raise TrackingError(f"frame {frame.index}: non-finite loss at iteration {i}")
        losses.append(res.value)
        if res.value < best_loss * (1.0 - cfg.plateau_rel):
            stall = 0
        else:
            stall += 1
        if res.value < best_loss:
            best_loss, best_pose, best_theta = res.value, pose, theta
        gnorm = float(res.pose_grad.norm())
        if gnorm < cfg.grad_tol:
            converged = True
            break
        if stall >= cfg.plateau_patience:
            converged = True
            break
        if i == cfg.iters:
            break
        grads = {"rot": res.pose_grad[:3], "trans": res.pose_grad[3:]}
        if res.theta_grad is not None:
            grads["theta"] = torch.as_tensor(res.theta_grad)
        deltas = adam.step(grads, lr_scale=decay**i)
        tangent = np.concatenate([deltas["rot"].numpy(), deltas["trans"].numpy()])
        pose = apply_tangent(tangent, pose)
        if "theta" in deltas:
            theta = ExposureParams(g=theta.g + float(deltas["theta"][0]),
                                   o=theta.o + float(deltas["theta"][1])).projected()
        iters_run = i + 1

    return TrackResult(pose=best_pose, gate=gate, theta=best_theta,
                       converged=converged, loss=best_loss,
                       iters_run=iters_run, losses=losses)
