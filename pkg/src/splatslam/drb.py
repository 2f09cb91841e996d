"""Exposure gating and correction: SSIM, the structural gate, the per-frame
affine exposure model and the (1-S)-weighted corrective loss.

The gate score is computed once per frame and frozen; the corrective loss uses
it as a constant weight so the optimizer cannot trade structure for gate
relief. When the gate is inactive the loss contributes exactly zero value and
zero gradient (bitwise), keeping well-exposed frames untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import DTYPE
from .optim import Adam

GAIN_RANGE = (0.1, 10.0)
OFFSET_RANGE = (-0.2, 0.2)

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


@dataclass
class ExposureParams:
    """Per-frame affine gain/offset; the box constraint is re-applied by
    projection after every optimizer step."""

    g: float = 1.0
    o: float = 0.0

    def projected(self) -> "ExposureParams":
        return ExposureParams(
            g=float(np.clip(self.g, *GAIN_RANGE)),
            o=float(np.clip(self.o, *OFFSET_RANGE)),
        )

    def tensor(self, requires_grad: bool = False) -> torch.Tensor:
        return torch.tensor([self.g, self.o], dtype=DTYPE, requires_grad=requires_grad)


@dataclass(frozen=True)
class GateState:
    score: float
    active: bool
    threshold: float = 0.5


def _as_image_tensor(img) -> torch.Tensor:
    t = torch.as_tensor(img, dtype=DTYPE) if not torch.is_tensor(img) else img.to(DTYPE)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {tuple(t.shape)}")
    return t


def _gaussian_window(n: int, sigma: float) -> torch.Tensor:
    x = torch.arange(n, dtype=DTYPE) - (n - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g.outer(g)


_WINDOW = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA).reshape(1, 1, _SSIM_WINDOW, _SSIM_WINDOW)


def _local_stats(img: torch.Tensor) -> tuple:
    # (H,W,3) -> per-channel windowed means with replicate padding, same size
    x = img.permute(2, 0, 1).unsqueeze(0)        # (1,3,H,W)
    pad = _SSIM_WINDOW // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    w = _WINDOW.expand(3, 1, -1, -1)
    return x, w


def _windowed_mean(x_padded: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return F.conv2d(x_padded, w, groups=3)


def ssim(a, b):
    """Mean SSIM and the per-pixel SSIM map (channel-averaged).

    11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2 on unit dynamic
    range, replicate boundary handling. Differentiable in both images.
    """
    ta, tb = _as_image_tensor(a), _as_image_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError("image shapes differ")
    h, w_ = ta.shape[:2]
    if h < _SSIM_WINDOW or w_ < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW}px on each side")

    xa, win = _local_stats(ta)
    xb, _ = _local_stats(tb)
    mu_a = _windowed_mean(xa, win)
    mu_b = _windowed_mean(xb, win)
    s_aa = _windowed_mean(xa * xa, win) - mu_a**2
    s_bb = _windowed_mean(xb * xb, win) - mu_b**2
    s_ab = _windowed_mean(xa * xb, win) - mu_a * mu_b

    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * s_ab + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (s_aa + s_bb + _SSIM_C2)
    smap = (num / den).squeeze(0).mean(dim=0)    # (H,W), channel mean
    return smap.mean(), smap


def evaluate_gate(render_img, gt_img, threshold: float = 0.5) -> GateState:
    """Score the render/observation pair once; the result is frozen for the
    frame's whole optimization."""
    with torch.no_grad():
        mean, _ = ssim(render_img, gt_img)
    score = float(mean)
    return GateState(score=score, active=score < threshold, threshold=threshold)


def apply_exposure(img, params: ExposureParams):
    """Affine exposure map g*I + o, unclamped (the loss sees raw values)."""
    if torch.is_tensor(img):
        return params.g * img + params.o
    return params.g * np.asarray(img, dtype=np.float64) + params.o


def _spatial_gradients(img: torch.Tensor) -> torch.Tensor:
    """Forward differences in x and y with replicate boundary (edge diff = 0),
    stacked along a leading axis."""
    gx = img[:, 1:] - img[:, :-1]
    gx = torch.cat([gx, torch.zeros_like(img[:, :1])], dim=1)
    gy = img[1:] - img[:-1]
    gy = torch.cat([gy, torch.zeros_like(img[:1])], dim=0)
    return torch.stack([gx, gy], dim=0)


def drb_term(render_t: torch.Tensor, gt_t: torch.Tensor, theta_t: torch.Tensor,
             gate: GateState, lam1: float = 1.0, lam2: float = 0.5) -> torch.Tensor:
    """Corrective loss as a torch expression for use inside larger graphs.
    Caller is responsible for only adding it when the gate is active."""
    corrected = theta_t[0] * render_t + theta_t[1]
    photometric = (corrected - gt_t).abs().mean()
    grad_diff = (_spatial_gradients(corrected) - _spatial_gradients(gt_t)).abs().mean()
    return (1.0 - gate.score) * (lam1 * photometric + lam2 * grad_diff)


@dataclass
class DrbResult:
    value: float
    grad_render: torch.Tensor
    grad_g: float
    grad_o: float


def drb_loss(render_img, gt_img, params: ExposureParams, gate: GateState,
             lam1: float = 1.0, lam2: float = 0.5) -> DrbResult:
    """Loss value plus gradients w.r.t. the rendered pixels and (g, o).

    Inactive gate -> exactly zero everywhere, so well-exposed frames see no
    interference from this term.
    """
    rt = _as_image_tensor(render_img)
    if not gate.active:
        return DrbResult(value=0.0, grad_render=torch.zeros_like(rt),
                         grad_g=0.0, grad_o=0.0)
    rt = rt.detach().requires_grad_(True)
    gt_t = _as_image_tensor(gt_img).detach()
    theta = params.tensor(requires_grad=True)
    loss = drb_term(rt, gt_t, theta, gate, lam1, lam2)
    g_render, g_theta = torch.autograd.grad(loss, [rt, theta])
    return DrbResult(value=float(loss.detach()), grad_render=g_render,
                     grad_g=float(g_theta[0]), grad_o=float(g_theta[1]))


def optimize_exposure(render_img, gt_img, gate: GateState,
                      params: ExposureParams | None = None,
                      lam1: float = 1.0, lam2: float = 0.5,
                      iters: int = 400, lr: float = 0.05,
                      lr_floor: float = 1e-4) -> ExposureParams:
    """Fit (g, o) alone on one frame pair by descending the corrective loss,
    with an exponential step decay so the L1 terms settle instead of cycling."""
    if not gate.active:
        return (params or ExposureParams()).projected()
    theta = (params or ExposureParams()).projected()
    rt = _as_image_tensor(render_img).detach()
    gt_t = _as_image_tensor(gt_img).detach()
    adam = Adam(lrs=lr)
    decay = (lr_floor / lr) ** (1.0 / max(iters - 1, 1))
    for i in range(iters):
        t = theta.tensor(requires_grad=True)
        loss = drb_term(rt, gt_t, t, gate, lam1, lam2)
        (grad,) = torch.autograd.grad(loss, [t])
        delta = adam.step({"theta": grad}, lr_scale=decay**i)["theta"]
        theta = ExposureParams(g=theta.g + float(delta[0]),
                               o=theta.o + float(delta[1])).projected()
    return theta
