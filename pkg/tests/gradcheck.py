"""Finite-difference oracle machinery for the renderer.

Everything here evaluates the renderer strictly through its public forward
path (fresh no-grad renders of perturbed inputs), so the FD gradients are
independent of the reverse pass they certify.
"""

import numpy as np
import torch

from splatslam.core import (GaussianMap, Intrinsics, Pose, apply_tangent,
                            quat_from_axis_angle, quat_mul, so3_exp_quat)
from splatslam.render import RenderConfig, render, render_backward

TENSOR_CLASSES = ("mu", "scale", "opacity", "albedo", "log_illum", "sem_logits")


def random_scene(rng, n_prims=10, class_count=4, spread=0.6, depth=(1.5, 3.5)):
    """Small random scene in front of an identity camera."""
    mu = np.column_stack([
        rng.uniform(-spread, spread, n_prims),
        rng.uniform(-spread, spread, n_prims),
        rng.uniform(*depth, n_prims),
    ])
    rot = np.stack([quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi))
                    for _ in range(n_prims)])
    scale = rng.uniform(0.05, 0.25, size=(n_prims, 3))
    opacity = rng.uniform(0.35, 0.9, n_prims)
    albedo = rng.uniform(0.15, 0.85, size=(n_prims, 3))
    log_illum = rng.normal(0, 0.3, n_prims)
    sem_logits = rng.normal(0, 1.0, size=(n_prims, class_count))
    return GaussianMap(mu, rot, scale, opacity, albedo, log_illum, sem_logits,
                       class_count)


def small_camera(width=32, height=32):
    return Intrinsics(fx=35.0, fy=35.0, cx=width / 2, cy=height / 2,
                      width=width, height=height)


def random_upstream(rng, K: Intrinsics, class_count):
    h, w = K.height, K.width
    return {
        "color": rng.normal(size=(h, w, 3)),
        "albedo": rng.normal(size=(h, w, 3)),
        "depth": rng.normal(size=(h, w)),
        "sem": rng.normal(size=(h, w, class_count)),
        "coverage": rng.normal(size=(h, w)),
    }


def scalar_loss(gmap, pose, K, cfg, upstream) -> float:
    buffers = render(gmap, pose, K, cfg, track_grad=False)
    total = 0.0
    for name, u in upstream.items():
        total += float((getattr(buffers, name).numpy() * u).sum())
    return total


def analytic_grads(gmap, pose, K, cfg, upstream):
    buffers = render(gmap, pose, K, cfg, track_grad=True)
    grads = render_backward(gmap, pose, K, buffers, upstream)
    return {k: getattr(grads, k).numpy().copy()
            for k in TENSOR_CLASSES + ("rot", "pose")}


def _perturbed_map(gmap, cls, index, h):
    m = gmap.clone()
    if cls == "rot":
        i, k = index
        e = np.zeros(3)
        e[k] = h
        q = quat_mul(so3_exp_quat(e), m.rot[i].numpy())
        with torch.no_grad():
            m.rot[i] = torch.as_tensor(q)
    else:
        t = getattr(m, cls)
        with torch.no_grad():
            t.view(-1)[index] += h
    m.touch()
    return m


def fd_grad_class(gmap, pose, K, cfg, upstream, cls, h):
    """Central finite differences for one parameter class."""
    if cls == "pose":
        out = np.zeros(6)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            lp = scalar_loss(gmap, apply_tangent(e, pose), K, cfg, upstream)
            lm = scalar_loss(gmap, apply_tangent(-e, pose), K, cfg, upstream)
            out[k] = (lp - lm) / (2 * h)
        return out
    if cls == "rot":
        out = np.zeros((len(gmap), 3))
        for i in range(len(gmap)):
            for k in range(3):
                lp = scalar_loss(_perturbed_map(gmap, "rot", (i, k), h), pose, K, cfg, upstream)
                lm = scalar_loss(_perturbed_map(gmap, "rot", (i, k), -h), pose, K, cfg, upstream)
                out[i, k] = (lp - lm) / (2 * h)
        return out
    shape = getattr(gmap, cls).shape
    flat = np.zeros(int(np.prod(shape)))
    for j in range(flat.size):
        lp = scalar_loss(_perturbed_map(gmap, cls, j, h), pose, K, cfg, upstream)
        lm = scalar_loss(_perturbed_map(gmap, cls, j, -h), pose, K, cfg, upstream)
        flat[j] = (lp - lm) / (2 * h)
    return flat.reshape(shape)


def relative_error(fd, an) -> float:
    fd = np.asarray(fd).ravel()
    an = np.asarray(an).ravel()
    denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
    return float(np.linalg.norm(fd - an) / denom)


def check_scene(seed, n_prims=8, width=32, height=32, steps=None,
                quantize=True, classes=None):
    """Returns {class: relative_error} for one random scene."""
    rng = np.random.default_rng(seed)
    gmap = random_scene(rng, n_prims=n_prims)
    K = small_camera(width, height)
    pose = apply_tangent(rng.normal(size=6) * np.array([0.05] * 3 + [0.02] * 3),
                         Pose.identity())
    cfg = RenderConfig(quantize_albedo=quantize)
    upstream = random_upstream(rng, K, gmap.class_count)
    an = analytic_grads(gmap, pose, K, cfg, upstream)
    steps = steps or {}
    out = {}
    for cls in classes or (TENSOR_CLASSES + ("rot", "pose")):
        h = steps.get(cls, 1e-5 if cls == "pose" else 1e-6)
        fd = fd_grad_class(gmap, pose, K, cfg, upstream, cls, h)
        out[cls] = relative_error(fd, an[cls])
    return out
