"""Dataset directory IO and TUM-style trajectory files.

Layout: manifest.json at the root (intrinsics, depth scale, class count),
8-bit rgb/NNNNNN.png, 16-bit depth/NNNNNN.png (meters = value / depth_scale),
8-bit sem/NNNNNN.png class ids, optional gt_traj.txt. Trajectory lines are
`index tx ty tz qx qy qz qw` (scalar-last quaternion, translations in meters).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import DatasetError, Frame, Intrinsics, Pose

MANIFEST_NAME = "manifest.json"
MANIFEST_KEYS = ("width", "height", "fx", "fy", "cx", "cy", "depth_scale",
                 "class_count", "frame_count")


@dataclass
class DatasetBundle:
    frames: list
    gt_poses: list | None
    class_count: int
    has_semantics: bool
    manifest: dict


def _frame_name(i: int) -> str:
    return f"{i:06d}.png"


def write_trajectory(path, entries):
    """entries: iterable of (index, Pose)."""
    lines = []
    for idx, pose in entries:
        qw, qx, qy, qz = pose.q
        tx, ty, tz = pose.t
        lines.append(f"{idx} {tx:.9f} {ty:.9f} {tz:.9f} "
                     f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path):
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(f"trajectory line needs 8 fields, got {len(parts)}: {line!r}")
        idx = int(parts[0])
        tx, ty, tz, qx, qy, qz, qw = map(float, parts[1:])
        entries.append((idx, Pose(np.array([qw, qx, qy, qz]), [tx, ty, tz])))
    return entries


def save_dataset(path, frames, gt_poses=None, truth=None,
                 depth_scale: float = 5000.0, class_count: int | None = None):
    """Write frames (and optional gt trajectory / corruption truth table) in
    the manifest layout."""
    root = Path(path)
    for sub in ("rgb", "depth", "sem"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    K = frames[0].intrinsics
    if class_count is None:
        class_count = int(max(int(f.sem.max()) for f in frames)) + 1
    manifest = {
        "width": K.width, "height": K.height,
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "depth_scale": depth_scale, "class_count": class_count,
        "frame_count": len(frames),
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for f in frames:
        name = _frame_name(f.index)
        rgb8 = np.clip(np.round(f.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8, mode="RGB").save(root / "rgb" / name)
        d16 = np.clip(np.round(f.depth * depth_scale), 0, 65535).astype(np.uint16)
        Image.fromarray(d16).save(root / "depth" / name)
        Image.fromarray(f.sem.astype(np.uint8)).save(root / "sem" / name)
    if gt_poses is not None:
        write_trajectory(root / "gt_traj.txt",
                         [(f.index, p) for f, p in zip(frames, gt_poses)])
    if truth is not None:
        (root / "truth.json").write_text(json.dumps(truth, indent=2) + "\n")


def _read_png(path: Path, what: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except FileNotFoundError:
        raise DatasetError(f"missing {what} file {path}")
    except Exception as exc:
        raise DatasetError(f"unreadable {what} file {path}: {exc}")


def load_dataset(path) -> DatasetBundle:
    """Load a dataset directory; distinct diagnostics per failure mode.
    Missing semantics disable semantic losses with a warning; missing gt
    trajectory just skips ATE."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest: {exc}")
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise DatasetError(f"manifest missing keys: {missing}")

    K = Intrinsics(fx=float(manifest["fx"]), fy=float(manifest["fy"]),
                   cx=float(manifest["cx"]), cy=float(manifest["cy"]),
                   width=int(manifest["width"]), height=int(manifest["height"]))
    depth_scale = float(manifest["depth_scale"])
    class_count = int(manifest["class_count"])
    n = int(manifest["frame_count"])

    has_semantics = (root / "sem").is_dir()
    if not has_semantics:
        warnings.warn(f"{root}: no sem/ directory, semantic losses disabled")

    frames = []
    for i in range(n):
        name = _frame_name(i)
        rgb = _read_png(root / "rgb" / name, "rgb")
        if rgb.shape != (K.height, K.width, 3):
            raise DatasetError(f"rgb {name}: shape {rgb.shape} disagrees with manifest "
                               f"({K.height}, {K.width}, 3)")
        depth_raw = _read_png(root / "depth" / name, "depth")
        if depth_raw.shape != (K.height, K.width):
            raise DatasetError(f"depth {name}: shape {depth_raw.shape} disagrees with manifest")
        if has_semantics:
            sem = _read_png(root / "sem" / name, "sem").astype(np.int32)
            if sem.shape != (K.height, K.width):
                raise DatasetError(f"sem {name}: shape {sem.shape} disagrees with manifest")
            if sem.max() >= class_count:
                raise DatasetError(f"sem {name}: class id {sem.max()} >= class_count")
        else:
            sem = np.zeros((K.height, K.width), np.int32)
        frames.append(Frame(rgb=rgb.astype(np.float64) / 255.0,
                            depth=depth_raw.astype(np.float64) / depth_scale,
                            sem=sem, intrinsics=K, index=i))

    gt_poses = None
    traj = root / "gt_traj.txt"
    if traj.exists():
        entries = dict(read_trajectory(traj))
        try:
            gt_poses = [entries[f.index] for f in frames]
        except KeyError as exc:
            raise DatasetError(f"gt_traj.txt missing frame index {exc}")
    return DatasetBundle(frames=frames, gt_poses=gt_poses,
                         class_count=class_count,
                         has_semantics=has_semantics, manifest=manifest)
