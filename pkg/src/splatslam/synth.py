"""Synthetic-world oracle: palette-aligned diorama scenes, smooth camera
trajectories and RGB-D-semantic sequences with controlled illumination scaling
and per-frame exposure corruption. Everything is generated from a seed, so
identical specs give bit-identical data.

The oracle renders ground truth with the system's own splat renderer
(inverse-crime setup): acceptance tests target the optimization and gating
logic, not renderer-model mismatch. CorruptionSpec.gamma adds an unmodeled
tone curve for robustness experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Frame, GaussianMap, Intrinsics, Pose, quat_from_matrix
from .palette import PaletteSpec
from .render import RenderConfig, render


@dataclass(frozen=True)
class SceneSpec:
    primitive_count: int = 600
    extent: tuple = (2.0, 2.0, 1.2)          # room size in meters
    class_count: int = 6
    palette: PaletteSpec = PaletteSpec()
    seed: int = 0
    albedo_levels: tuple | None = None        # usable palette indices, None = all
    opacity: float = 0.92


@dataclass(frozen=True)
class CorruptionSpec:
    flagged_fraction: float = 0.0
    gain_range: tuple = (2.4, 3.2)            # strong enough to trip the gate
    offset_range: tuple = (0.10, 0.18)        # magnitude; sign drawn per frame
    underexpose_prob: float = 0.5             # use 1/g instead of g
    illum_scale: float = 1.0
    noise_sigma: float = 0.0
    gamma: float = 1.0                        # unmodeled tone curve, 1 = off

    def __post_init__(self):
        if not (0.1 <= self.gain_range[0] <= self.gain_range[1] <= 10.0):
            raise ValueError("gain range outside the exposure box")
        if not (0.0 <= self.offset_range[0] <= self.offset_range[1] <= 0.2):
            raise ValueError("offset range outside the exposure box")
        if not 0.0 <= self.flagged_fraction <= 1.0:
            raise ValueError("flagged_fraction must be in [0,1]")


def default_camera(width: int = 48, height: int = 36) -> Intrinsics:
    return Intrinsics(fx=0.95 * width, fy=0.95 * width, cx=width / 2.0,
                      cy=height / 2.0, width=width, height=height)


def _pick_albedo(rng, spec: SceneSpec) -> np.ndarray:
    values = spec.palette.values()
    idx = np.asarray(spec.albedo_levels if spec.albedo_levels is not None
                     else range(spec.palette.levels))
    for _ in range(64):
        a = values[rng.choice(idx, size=3)]
        if not (a[0] == a[1] == a[2]):
            return a
    # single usable level: achromatic is unavoidable
    return values[rng.choice(idx, size=3)]


def _surface_grid(rng, n, origin, u_dir, v_dir, u_len, v_len, thin_axis):
    """Jittered grid of gaussian centers on a rectangle; returns mu, scale."""
    if n <= 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    aspect = u_len / v_len
    nu = max(1, int(round(np.sqrt(n * aspect))))
    nv = max(1, int(np.ceil(n / nu)))
    su, sv = u_len / nu, v_len / nv
    uu, vv = np.meshgrid((np.arange(nu) + 0.5) * su, (np.arange(nv) + 0.5) * sv)
    uu = uu.ravel()[:n]
    vv = vv.ravel()[:n]
    jitter = 0.15 * min(su, sv)
    uu = uu + rng.uniform(-jitter, jitter, uu.size)
    vv = vv + rng.uniform(-jitter, jitter, vv.size)
    mu = (np.asarray(origin)[None, :]
          + uu[:, None] * np.asarray(u_dir)[None, :]
          + vv[:, None] * np.asarray(v_dir)[None, :])
    s = 0.55 * max(su, sv)
    scale = np.full((mu.shape[0], 3), s)
    scale[:, thin_axis] = 0.3 * s
    return mu, scale


def _sphere_points(rng, n, center, radius):
    """Fibonacci lattice on a sphere."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    golden = np.pi * (1 + np.sqrt(5))
    theta = golden * i
    pts = np.column_stack([np.cos(theta) * np.sin(phi),
                           np.sin(theta) * np.sin(phi),
                           np.cos(phi)]) * radius + np.asarray(center)
    s = radius * np.sqrt(4 * np.pi / max(n, 1)) * 0.6
    return pts, np.full((n, 3), s)


def make_scene(spec: SceneSpec) -> GaussianMap:
    """Box-room diorama: floor, two walls and a few spherical objects, one
    semantic class per part, albedos exactly on the palette."""
    if spec.primitive_count <= 0:
        return GaussianMap.empty(spec.class_count)
    rng = np.random.default_rng(spec.seed)
    ex, ey, ez = spec.extent
    n = spec.primitive_count
    n_obj_classes = max(spec.class_count - 3, 1)
    budget = {
        "floor": int(0.45 * n),
        "back": int(0.18 * n),
        "left": int(0.13 * n),
    }
    budget["objects"] = n - sum(budget.values())

    mus, scales, classes = [], [], []
    mu, sc = _surface_grid(rng, budget["floor"], (0, 0, 0), (1, 0, 0), (0, 1, 0),
                           ex, ey, thin_axis=2)
    mus.append(mu), scales.append(sc), classes.append(np.zeros(len(mu), int))
    mu, sc = _surface_grid(rng, budget["back"], (0, ey, 0), (1, 0, 0), (0, 0, 1),
                           ex, ez, thin_axis=1)
    mus.append(mu), scales.append(sc), classes.append(np.full(len(mu), 1))
    mu, sc = _surface_grid(rng, budget["left"], (0, 0, 0), (0, 1, 0), (0, 0, 1),
                           ey, ez, thin_axis=0)
    mus.append(mu), scales.append(sc), classes.append(np.full(len(mu), 2))

    per_obj = budget["objects"] // n_obj_classes if n_obj_classes else 0
    for k in range(n_obj_classes):
        cls = 3 + k if spec.class_count > 3 else spec.class_count - 1
        count = per_obj if k < n_obj_classes - 1 else budget["objects"] - per_obj * (n_obj_classes - 1)
        if count <= 0:
            continue
        radius = rng.uniform(0.10, 0.18) * min(ex, ey)
        center = np.array([rng.uniform(0.25 * ex, 0.75 * ex),
                           rng.uniform(0.25 * ey, 0.75 * ey),
                           radius])
        mu, sc = _sphere_points(rng, count, center, radius)
        mus.append(mu), scales.append(sc), classes.append(np.full(count, cls))

    mu = np.concatenate(mus)
    scale = np.concatenate(scales)
    cls = np.concatenate(classes)
    total = len(mu)

    # one palette color per semantic class
    class_albedo = {c: _pick_albedo(rng, spec) for c in np.unique(cls)}
    albedo = np.stack([class_albedo[c] for c in cls])
    rot = np.zeros((total, 4))
    rot[:, 0] = 1.0
    sem = np.full((total, spec.class_count), 0.0)
    sem[np.arange(total), cls] = 6.0
    return GaussianMap(mu, rot, scale, np.full(total, spec.opacity), albedo,
                       np.zeros(total), sem, spec.class_count)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose with +z toward the target, pixel y downward."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    x = np.cross(f, np.asarray(up, dtype=np.float64))
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.column_stack([x, y, f])
    return Pose(quat_from_matrix(R), eye)


def make_trajectory(kind: str, n_frames: int, spec: SceneSpec,
                    sweep_deg: float = 75.0, radius: float | None = None,
                    height: float | None = None) -> list:
    """Smooth pose sequence looking at the scene center."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    ex, ey, ez = spec.extent
    center = np.array([0.5 * ex, 0.5 * ey, 0.3 * ez])
    r = radius if radius is not None else 0.95 * max(ex, ey)
    h = height if height is not None else 0.9 * ez
    if kind == "static":
        eye = center + np.array([0.0, -r, h - center[2]])
        return [look_at(eye, center)] * n_frames
    if kind == "orbit":
        sweep = np.deg2rad(sweep_deg)
        angles = -np.pi / 2 + (np.linspace(0, sweep, n_frames) if n_frames > 1
                               else np.zeros(1))
        poses = []
        for ang in angles:
            eye = center + np.array([r * np.cos(ang), r * np.sin(ang), h - center[2]])
            poses.append(look_at(eye, center))
        return poses
    if kind == "lateral":
        xs = np.linspace(0.2 * ex, 0.8 * ex, n_frames)
        return [look_at(np.array([x, -r, h]), center) for x in xs]
    raise ValueError(f"unknown trajectory kind {kind!r}")


def render_ground_truth(gmap: GaussianMap, poses, K: Intrinsics,
                        corruption: CorruptionSpec = CorruptionSpec(),
                        render_cfg: RenderConfig | None = None):
    """Render the oracle sequence and corrupt it per the spec.

    Returns (frames, truth) where truth[i] records the applied gain/offset and
    the flagged flag, for oracle-based assertions downstream.
    """
    cfg = render_cfg or RenderConfig()
    rng = np.random.default_rng(hash((corruption, len(poses))) % (2**32))
    n = len(poses)
    n_flagged = int(round(corruption.flagged_fraction * n))
    flagged = set(rng.choice(n, size=n_flagged, replace=False).tolist()) if n_flagged else set()

    frames, truth = [], []
    for i, pose in enumerate(poses):
        buf = render(gmap, pose, K, cfg, track_grad=False)
        rgb = buf.color.numpy().copy()
        coverage = buf.coverage.numpy()
        depth = buf.depth.numpy().copy()
        depth[coverage < 0.5] = 0.0
        sem = buf.sem.numpy().argmax(axis=-1).astype(np.int32)

        rgb = rgb * corruption.illum_scale
        g_applied, o_applied = 1.0, 0.0
        if i in flagged:
            g = rng.uniform(*corruption.gain_range)
            if rng.random() < corruption.underexpose_prob:
                g = 1.0 / g
            o = rng.uniform(*corruption.offset_range) * (1 if rng.random() < 0.5 else -1)
            o = float(np.clip(o, -0.2, 0.2))
            rgb = g * rgb + o
            if corruption.noise_sigma > 0:
                rgb = rgb + rng.normal(0, corruption.noise_sigma, rgb.shape)
            g_applied, o_applied = float(g), float(o)
        if corruption.gamma != 1.0:
            rgb = np.clip(rgb, 0.0, None) ** corruption.gamma
        rgb = np.clip(rgb, 0.0, 1.0)

        frames.append(Frame(rgb=rgb, depth=depth, sem=sem, intrinsics=K, index=i))
        truth.append({"flagged": i in flagged, "g": g_applied, "o": o_applied,
                      "illum_scale": corruption.illum_scale})
    return frames, truth
