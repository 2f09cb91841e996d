"""Differentiable splat renderer: projection, depth-sorted alpha blending of
color / albedo / depth / semantics, and exact reverse-mode gradients for every
primitive parameter class plus the camera pose tangent.

The forward pass is built on explicit leaf tensors (one per parameter class),
so `render_backward` can hand out gradients for any subset of them. Rotations
are perturbed as exp(w)·R and the pose as exp(delta)·E, which makes the
reported rotation/pose gradients live in the so(3)/se(3) tangent at the
current values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import (DTYPE, GaussianMap, GaussianPrimitive, Intrinsics, Pose,
                   ProvenanceError, RenderError, quat_to_matrix_t,
                   se3_exp_t, so3_exp_matrix_t)
from .palette import PaletteSpec, ste_quantize

PARAM_CLASSES = ("mu", "rot", "scale", "opacity", "albedo", "log_illum",
                 "sem_logits", "pose")
BUFFER_NAMES = ("color", "albedo", "depth", "sem", "coverage")


@dataclass(frozen=True)
class RenderConfig:
    near_clip: float = 0.01
    weight_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    cov_reg: float = 0.3                     # px^2 added to cov2d diagonal
    margin_sigmas: float = 3.0               # visibility margin, in projected sigmas
    background: tuple = (0.0, 0.0, 0.0)
    quantize_albedo: bool = True
    palette: PaletteSpec = field(default_factory=PaletteSpec)
    dtype: str = "float64"                   # float64 for gradient tests, float32 for speed

    def torch_dtype(self):
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


@dataclass
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth_cam: float
    inv_cov2d: np.ndarray | None
    visible: bool


@dataclass
class RenderBuffers:
    """Rendered per-pixel attributes. Full-frame buffers are (H,W,...); when a
    pixel subset was rendered they are flat (M,...) and `pixels` holds the
    (x, y) sample coordinates."""

    color: torch.Tensor
    albedo: torch.Tensor
    depth: torch.Tensor
    sem: torch.Tensor
    coverage: torch.Tensor
    pixels: np.ndarray | None
    skipped: int
    leaves: dict = field(default_factory=dict, repr=False)
    stamp: tuple = field(default=(), repr=False)

    def numpy(self) -> dict:
        return {k: getattr(self, k).detach().numpy().copy() for k in BUFFER_NAMES}


@dataclass
class RenderGrads:
    mu: torch.Tensor
    rot: torch.Tensor
    scale: torch.Tensor
    opacity: torch.Tensor
    albedo: torch.Tensor
    log_illum: torch.Tensor
    sem_logits: torch.Tensor
    pose: torch.Tensor

    def asdict(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_CLASSES}


def _stamp(gmap: GaussianMap, pose: Pose, K: Intrinsics, cfg: RenderConfig,
           pixels) -> tuple:
    px = None if pixels is None else hash(np.ascontiguousarray(pixels).tobytes())
    return (gmap.version, len(gmap), pose.q.tobytes(), pose.t.tobytes(),
            K.astuple(), cfg, px)


def _pixel_grid(K: Intrinsics):
    py, px = np.mgrid[0:K.height, 0:K.width]
    return px.reshape(-1), py.reshape(-1)


def _project_internal(mu, rot_mats, scale, pose_R, pose_t, K: Intrinsics,
                      cfg: RenderConfig):
    """Camera-space means, pixel means and 2D covariances for all primitives."""
    W = pose_R.transpose(-1, -2)                     # cam-from-world rotation
    mean_c = (mu - pose_t) @ W.transpose(-1, -2)     # rows: W @ (mu_i - t)
    z = mean_c[:, 2]
    z_safe = z.clamp(min=cfg.near_clip)
    u = K.fx * mean_c[:, 0] / z_safe + K.cx
    v = K.fy * mean_c[:, 1] / z_safe + K.cy

    # world covariance R diag(s^2) R^T, then cam frame, then the projective Jacobian
    sig = rot_mats * (scale**2).unsqueeze(-2)        # R @ diag(s^2)
    sig = sig @ rot_mats.transpose(-1, -2)
    sig_cam = W @ sig @ W.transpose(-1, -2)

    zeros = torch.zeros_like(z_safe)
    jrow0 = torch.stack([K.fx / z_safe, zeros, -K.fx * mean_c[:, 0] / z_safe**2], -1)
    jrow1 = torch.stack([zeros, K.fy / z_safe, -K.fy * mean_c[:, 1] / z_safe**2], -1)
    J = torch.stack([jrow0, jrow1], -2)              # (N,2,3)
    cov2d = J @ sig_cam @ J.transpose(-1, -2)
    reg = cfg.cov_reg * torch.eye(2, dtype=mu.dtype)
    cov2d = cov2d + reg
    return mean_c, u, v, cov2d


def _visibility(u, v, z, cov2d, K: Intrinsics, cfg: RenderConfig):
    """Boolean mask of renderable primitives plus the degenerate count."""
    with torch.no_grad():
        a = cov2d[:, 0, 0]
        b = cov2d[:, 0, 1]
        c = cov2d[:, 1, 1]
        det = a * c - b * b
        finite = torch.isfinite(det) & torch.isfinite(u) & torch.isfinite(v) & torch.isfinite(z)
        degenerate = finite & (det <= 0)
        lam_max = 0.5 * (a + c) + torch.sqrt((0.5 * (a - c))**2 + b * b)
        r = cfg.margin_sigmas * torch.sqrt(lam_max.clamp(min=0.0))
        vis = (z > cfg.near_clip) & finite & (det > 0)
        vis &= (u >= -r) & (u <= K.width - 1 + r)
        vis &= (v >= -r) & (v <= K.height - 1 + r)
        skipped = int((~finite).sum()) + int(degenerate.sum())
    return vis, skipped


def project(g: GaussianPrimitive, pose: Pose, K: Intrinsics,
            cfg: RenderConfig = RenderConfig()) -> Projected2D:
    """Project a single primitive; invisible ones are flagged, never dropped."""
    gmap = GaussianMap.from_primitives([g], class_count=len(g.sem_logits))
    with torch.no_grad():
        rot_mats = quat_to_matrix_t(gmap.rot)
        pose_R = torch.as_tensor(pose.rotation_matrix(), dtype=DTYPE)
        pose_t = torch.as_tensor(pose.t, dtype=DTYPE)
        mean_c, u, v, cov2d = _project_internal(gmap.mu, rot_mats, gmap.scale,
                                                pose_R, pose_t, K, cfg)
        vis, _ = _visibility(u, v, mean_c[:, 2], cov2d, K, cfg)
    cov = cov2d[0].numpy()
    visible = bool(vis[0])
    inv = np.linalg.inv(cov) if visible else None
    return Projected2D(mean2d=np.array([float(u[0]), float(v[0])]),
                       cov2d=cov, depth_cam=float(mean_c[0, 2]),
                       inv_cov2d=inv, visible=visible)


def weight(proj: Projected2D, opacity: float, pixel,
           cfg: RenderConfig = RenderConfig()) -> float:
    """Influence of one projected primitive on one pixel."""
    d = np.asarray(pixel, dtype=np.float64) - proj.mean2d
    q = float(d @ proj.inv_cov2d @ d)
    f = float(opacity) * np.exp(-0.5 * q)
    return f if f >= cfg.weight_cutoff else 0.0


def render(gmap: GaussianMap, pose: Pose, K: Intrinsics,
           cfg: RenderConfig = RenderConfig(), pixels=None,
           track_grad: bool = True) -> RenderBuffers:
    """Depth-sorted front-to-back alpha blending of the whole map.

    pixels: optional (M,2) integer array of (x, y) sample coordinates; when
    given, buffers come back flat over the samples instead of (H,W).
    """
    n = len(gmap)
    if n == 0:
        raise RenderError("render requires a nonempty map")
    dt_ = cfg.torch_dtype()

    leaves = {
        "mu": gmap.mu.detach().to(dt_).requires_grad_(track_grad),
        "rot": torch.zeros((n, 3), dtype=dt_, requires_grad=track_grad),
        "scale": gmap.scale.detach().to(dt_).requires_grad_(track_grad),
        "opacity": gmap.opacity.detach().to(dt_).requires_grad_(track_grad),
        "albedo": gmap.albedo.detach().to(dt_).requires_grad_(track_grad),
        "log_illum": gmap.log_illum.detach().to(dt_).requires_grad_(track_grad),
        "sem_logits": gmap.sem_logits.detach().to(dt_).requires_grad_(track_grad),
        "pose": torch.zeros(6, dtype=dt_, requires_grad=track_grad),
    }

    with torch.enable_grad() if track_grad else torch.no_grad():
        rot_mats = so3_exp_matrix_t(leaves["rot"]) @ quat_to_matrix_t(gmap.rot.detach().to(dt_))
        dR, dtr = se3_exp_t(leaves["pose"])
        pose_R = dR @ torch.as_tensor(pose.rotation_matrix(), dtype=dt_)
        pose_t = dR @ torch.as_tensor(pose.t, dtype=dt_) + dtr

        mean_c, u, v, cov2d = _project_internal(
            leaves["mu"], rot_mats, leaves["scale"], pose_R, pose_t, K, cfg)
        z = mean_c[:, 2]
        vis, skipped = _visibility(u, v, z, cov2d, K, cfg)

        # front-to-back order by camera depth, ties by primitive id
        with torch.no_grad():
            idx = torch.nonzero(vis, as_tuple=False).squeeze(-1)
            order = idx[torch.argsort(z.detach()[idx], stable=True)]

        u_s, v_s, z_s = u[order], v[order], z[order]
        cov_s = cov2d[order]
        op_s = leaves["opacity"][order].clamp(0.0, 1.0)
        if cfg.quantize_albedo:
            alb_s = ste_quantize(leaves["albedo"][order], cfg.palette)
        else:
            alb_s = leaves["albedo"][order].clamp(0.0, 1.0)
        col_s = alb_s * torch.exp(leaves["log_illum"][order]).unsqueeze(-1)
        sem_s = torch.softmax(leaves["sem_logits"][order], dim=-1)

        if pixels is None:
            px_np, py_np = _pixel_grid(K)
        else:
            pixels = np.asarray(pixels)
            px_np, py_np = pixels[:, 0], pixels[:, 1]
        px = torch.as_tensor(px_np).to(dt_)
        py = torch.as_tensor(py_np).to(dt_)

        a = cov_s[:, 0, 0]
        b = cov_s[:, 0, 1]
        c = cov_s[:, 1, 1]
        det = (a * c - b * b).clamp(min=1e-12)
        # inverse-covariance coefficients, folded per primitive before broadcast
        ia = (c / det).unsqueeze(1)
        ib = (b / det).unsqueeze(1)
        ic = (a / det).unsqueeze(1)
        dx = u_s.unsqueeze(1) - px.unsqueeze(0)      # (Nv, P)
        dy = v_s.unsqueeze(1) - py.unsqueeze(0)
        quad = ia * (dx * dx) + ic * (dy * dy) - (2.0 * ib) * (dx * dy)
        f = op_s.unsqueeze(1) * torch.exp(-0.5 * quad)
        f = torch.where(f.detach() >= cfg.weight_cutoff, f, torch.zeros((), dtype=dt_))

        trans = torch.cumprod(1.0 - f, dim=0)
        trans_in = torch.cat([torch.ones((1, f.shape[1]), dtype=dt_), trans[:-1]], dim=0)
        alive = (trans_in.detach() >= cfg.transmittance_floor).to(dt_)
        wb = f * trans_in * alive                     # blend weights per (primitive, pixel)

        coverage = wb.sum(dim=0)
        color = wb.transpose(0, 1) @ col_s
        albedo_buf = wb.transpose(0, 1) @ alb_s
        depth = wb.transpose(0, 1) @ z_s.unsqueeze(-1)
        sem = wb.transpose(0, 1) @ sem_s

        bg = torch.as_tensor(cfg.background, dtype=dt_)
        color = color + (1.0 - coverage).unsqueeze(-1) * bg
        albedo_buf = albedo_buf + (1.0 - coverage).unsqueeze(-1) * bg
        depth = depth.squeeze(-1)

        if pixels is None:
            h, w = K.height, K.width
            color = color.reshape(h, w, 3)
            albedo_buf = albedo_buf.reshape(h, w, 3)
            depth = depth.reshape(h, w)
            sem = sem.reshape(h, w, gmap.class_count)
            coverage = coverage.reshape(h, w)

    return RenderBuffers(color=color, albedo=albedo_buf, depth=depth, sem=sem,
                         coverage=coverage,
                         pixels=None if pixels is None else np.asarray(pixels),
                         skipped=skipped, leaves=leaves if track_grad else {},
                         stamp=_stamp(gmap, pose, K, cfg, pixels))


def render_backward(gmap: GaussianMap, pose: Pose, K: Intrinsics,
                    buffers: RenderBuffers, upstream: dict,
                    wrt=PARAM_CLASSES) -> RenderGrads:
    """Pull per-pixel gradients back onto primitive parameters and the pose.

    upstream maps buffer names ('color', 'albedo', 'depth', 'sem', 'coverage')
    to arrays/tensors shaped like the corresponding buffer.
    """
    if not buffers.leaves:
        raise ProvenanceError("buffers were rendered without gradient tracking")
    expect = _stamp(gmap, pose, K, buffers.stamp[5],
                    buffers.pixels if buffers.stamp[6] is not None else None)
    if expect != buffers.stamp:
        raise ProvenanceError("buffers do not match the given map/pose/intrinsics")

    outputs, grads_out = [], []
    for name, g in upstream.items():
        if name not in BUFFER_NAMES:
            raise ValueError(f"unknown buffer {name!r}")
        buf = getattr(buffers, name)
        g = torch.as_tensor(g).to(buf.dtype)
        if g.shape != buf.shape:
            raise ValueError(f"upstream[{name!r}] shape {tuple(g.shape)} != {tuple(buf.shape)}")
        outputs.append(buf)
        grads_out.append(g)

    inputs = [buffers.leaves[k] for k in wrt]
    grads = torch.autograd.grad(outputs, inputs, grad_outputs=grads_out,
                                retain_graph=True, allow_unused=True)
    got = {k: (g if g is not None else torch.zeros_like(buffers.leaves[k]))
           for k, g in zip(wrt, grads)}
    full = {k: got.get(k, torch.zeros_like(buffers.leaves[k])) for k in PARAM_CLASSES}
    return RenderGrads(**full)
