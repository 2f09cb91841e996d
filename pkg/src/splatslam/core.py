"""Core scene types: Gaussian map, camera poses, intrinsics and frames.

Conventions used everywhere in this package:
  * quaternions are scalar-first (w, x, y, z) and kept unit-norm,
  * Pose is world-from-camera: x_world = R @ x_cam + t,
  * se(3)/so(3) tangent vectors are rotation-first: (wx, wy, wz, vx, vy, vz),
  * camera looks along +z, pixel y grows downward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

DTYPE = torch.float64


class SplatError(Exception):
    pass


class RenderError(SplatError):
    pass


class TrackingError(SplatError):
    pass


class ProvenanceError(SplatError):
    """Buffers handed to render_backward were not produced by a matching render."""


class DatasetError(SplatError):
    pass


# ---------------------------------------------------------------------------
# quaternion helpers (numpy, scalar-first)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # fix the double-cover sign so equal rotations compare equal
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R):
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return quat_normalize(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def quat_angle(q):
    """Rotation angle in radians represented by a unit quaternion."""
    w = min(1.0, abs(float(q[0])))
    return 2.0 * np.arccos(w)


def so3_exp_quat(omega):
    """so(3) tangent -> unit quaternion."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        return quat_normalize(np.concatenate([[1.0], 0.5 * omega]))
    axis = omega / theta
    return quat_from_axis_angle(axis, theta)


def _so3_left_jacobian(omega):
    theta = np.linalg.norm(omega)
    S = np.array([[0, -omega[2], omega[1]],
                  [omega[2], 0, -omega[0]],
                  [-omega[1], omega[0], 0]])
    if theta < 1e-8:
        return np.eye(3) + 0.5 * S + S @ S / 6.0
    a = (1 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * S + b * (S @ S)


def se3_exp(delta):
    """se(3) tangent (w, v) -> Pose(exp)."""
    delta = np.asarray(delta, dtype=np.float64)
    omega, v = delta[:3], delta[3:]
    q = so3_exp_quat(omega)
    t = _so3_left_jacobian(omega) @ v
    return Pose(q, t)


# ---------------------------------------------------------------------------
# torch counterparts (batched, differentiable, Taylor-guarded near zero)
# ---------------------------------------------------------------------------

def quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    """(N,4) unit quaternions -> (N,3,3) rotation matrices."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], -2)


def quat_mul_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def so3_exp_quat_t(omega: torch.Tensor) -> torch.Tensor:
    """(N,3) tangents -> (N,4) unit quaternions. Safe at omega = 0."""
    th2 = (omega * omega).sum(-1)
    th = torch.sqrt(th2.clamp(min=1e-24))
    small = th2 < 1e-12
    half = 0.5 * th
    # sin(th/2)/th, with its Taylor series where th is tiny
    k = torch.where(small, 0.5 - th2 / 48.0, torch.sin(half) / th)
    w = torch.where(small, 1.0 - th2 / 8.0, torch.cos(half))
    return torch.cat([w.unsqueeze(-1), k.unsqueeze(-1) * omega], -1)


def _hat_t(omega: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(omega[..., 0])
    wx, wy, wz = omega.unbind(-1)
    return torch.stack([
        torch.stack([zero, -wz, wy], -1),
        torch.stack([wz, zero, -wx], -1),
        torch.stack([-wy, wx, zero], -1),
    ], -2)


def _rodrigues_coeffs(th2: torch.Tensor):
    """A = sin(t)/t, B = (1-cos t)/t^2, C = (t - sin t)/t^3 with Taylor guards."""
    small = th2 < 1e-6
    th = torch.sqrt(th2.clamp(min=1e-24))
    a = torch.where(small, 1.0 - th2 / 6.0 + th2 * th2 / 120.0, torch.sin(th) / th)
    b = torch.where(small, 0.5 - th2 / 24.0 + th2 * th2 / 720.0, (1.0 - torch.cos(th)) / th2.clamp(min=1e-24))
    c = torch.where(small, 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0, (th - torch.sin(th)) / (th2 * th).clamp(min=1e-36))
    return a, b, c


def so3_exp_matrix_t(omega: torch.Tensor) -> torch.Tensor:
    """(N,3) tangents -> (N,3,3) rotations via Rodrigues, differentiable at 0."""
    th2 = (omega * omega).sum(-1)
    a, b, _ = _rodrigues_coeffs(th2)
    S = _hat_t(omega)
    eye = torch.eye(3, dtype=omega.dtype).expand(S.shape)
    return eye + a[..., None, None] * S + b[..., None, None] * (S @ S)


def se3_exp_t(delta: torch.Tensor):
    """(6,) tangent (w, v) -> (R, t) torch pair, differentiable at 0."""
    omega, v = delta[:3], delta[3:]
    th2 = (omega * omega).sum()
    _, b, c = _rodrigues_coeffs(th2)
    S = _hat_t(omega)
    R = so3_exp_matrix_t(omega)
    J = torch.eye(3, dtype=delta.dtype) + b * S + c * (S @ S)
    return R, J @ v


# ---------------------------------------------------------------------------
# pose / camera / frame types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid camera pose, world-from-camera."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).copy())

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.t
        return T

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(quat_from_matrix(T[:3, :3]), T[:3, 3])


def compose(a: Pose, b: Pose) -> Pose:
    """Rigid composition a∘b (rotation renormalized)."""
    q = quat_mul(a.q, b.q)
    t = quat_to_matrix(a.q) @ b.t + a.t
    return Pose(q, t)


def inverse(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(qi, -(quat_to_matrix(qi) @ p.t))


def world_to_camera(pose: Pose, p_world) -> np.ndarray:
    """Camera-frame coordinates of a world point; z is the blend depth."""
    p_world = np.asarray(p_world, dtype=np.float64)
    return pose.rotation_matrix().T @ (p_world - pose.t)


def camera_to_world(pose: Pose, p_cam) -> np.ndarray:
    p_cam = np.asarray(p_cam, dtype=np.float64)
    return pose.rotation_matrix() @ p_cam + pose.t


def apply_tangent(delta, pose: Pose) -> Pose:
    """Left-multiplicative update exp(delta) ∘ pose."""
    return compose(se3_exp(delta), pose)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside image")

    def astuple(self):
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class Frame:
    """One RGB-D-semantic observation. rgb in [0,1], depth in meters (0 = invalid)."""

    rgb: np.ndarray
    depth: np.ndarray
    sem: np.ndarray
    intrinsics: Intrinsics
    index: int = 0

    def __post_init__(self):
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} != depth shape {(h, w)}")
        if self.sem.shape != (h, w):
            raise ValueError(f"sem shape {self.sem.shape} != depth shape {(h, w)}")
        if (h, w) != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("raster size disagrees with intrinsics")


# ---------------------------------------------------------------------------
# Gaussian primitives and the map
# ---------------------------------------------------------------------------

@dataclass
class GaussianPrimitive:
    """One map element; albedo is the intrinsic color, exp(log_illum) the lighting factor."""

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: float
    albedo: np.ndarray
    log_illum: float
    sem_logits: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rot = quat_normalize(self.rot)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.sem_logits = np.asarray(self.sem_logits, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")


def covariance3d(g: GaussianPrimitive) -> np.ndarray:
    """World-space covariance R diag(scale^2) R^T."""
    R = quat_to_matrix(g.rot)
    return R @ np.diag(g.scale**2) @ R.T


_FIELDS = ("mu", "rot", "scale", "opacity", "albedo", "log_illum", "sem_logits")


class GaussianMap:
    """Struct-of-arrays Gaussian map. Single writer: mutate only between
    optimization steps; `version` bumps on every mutation so render buffers
    can prove provenance."""

    def __init__(self, mu, rot, scale, opacity, albedo, log_illum, sem_logits,
                 class_count: int):
        self.mu = torch.as_tensor(mu, dtype=DTYPE).reshape(-1, 3)
        self.rot = torch.as_tensor(rot, dtype=DTYPE).reshape(-1, 4)
        self.scale = torch.as_tensor(scale, dtype=DTYPE).reshape(-1, 3)
        self.opacity = torch.as_tensor(opacity, dtype=DTYPE).reshape(-1)
        self.albedo = torch.as_tensor(albedo, dtype=DTYPE).reshape(-1, 3)
        self.log_illum = torch.as_tensor(log_illum, dtype=DTYPE).reshape(-1)
        self.sem_logits = torch.as_tensor(sem_logits, dtype=DTYPE).reshape(len(self.mu), int(class_count))
        self.class_count = int(class_count)
        self.version = 0

    def __len__(self) -> int:
        return self.mu.shape[0]

    @staticmethod
    def empty(class_count: int) -> "GaussianMap":
        return GaussianMap(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                           np.zeros(0), np.zeros((0, 3)), np.zeros(0),
                           np.zeros((0, class_count)), class_count)

    @staticmethod
    def from_primitives(prims, class_count: int) -> "GaussianMap":
        if not prims:
            return GaussianMap.empty(class_count)
        return GaussianMap(
            np.stack([p.mu for p in prims]),
            np.stack([p.rot for p in prims]),
            np.stack([p.scale for p in prims]),
            np.array([p.opacity for p in prims]),
            np.stack([p.albedo for p in prims]),
            np.array([p.log_illum for p in prims]),
            np.stack([p.sem_logits for p in prims]),
            class_count,
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.mu[i].numpy().copy(), self.rot[i].numpy().copy(),
            self.scale[i].numpy().copy(), float(self.opacity[i]),
            self.albedo[i].numpy().copy(), float(self.log_illum[i]),
            self.sem_logits[i].numpy().copy())

    def touch(self):
        self.version += 1

    def clone(self) -> "GaussianMap":
        m = GaussianMap(*(getattr(self, f).clone() for f in _FIELDS), self.class_count)
        return m

    def append(self, other: "GaussianMap"):
        if other.class_count != self.class_count:
            raise ValueError("class_count mismatch")
        for f in _FIELDS:
            setattr(self, f, torch.cat([getattr(self, f), getattr(other, f)], dim=0))
        self.touch()

    def keep(self, mask):
        """Drop primitives where mask is False; survivor order is preserved."""
        mask = torch.as_tensor(mask, dtype=torch.bool)
        for f in _FIELDS:
            setattr(self, f, getattr(self, f)[mask])
        self.touch()

    def project_constraints(self):
        """Clamp opacity/albedo/scale into their domains and renormalize quaternions."""
        with torch.no_grad():
            self.opacity.clamp_(0.0, 1.0)
            self.albedo.clamp_(0.0, 1.0)
            self.scale.clamp_(min=1e-6)
            self.rot /= self.rot.norm(dim=1, keepdim=True).clamp(min=1e-30)
            sign = torch.where(self.rot[:, :1] < 0, -1.0, 1.0)
            self.rot *= sign
        self.touch()

    def save(self, path):
        np.savez(Path(path),
                 class_count=self.class_count,
                 **{f: getattr(self, f).numpy() for f in _FIELDS})

    @staticmethod
    def load(path) -> "GaussianMap":
        data = np.load(Path(path))
        return GaussianMap(*(data[f] for f in _FIELDS), int(data["class_count"]))
