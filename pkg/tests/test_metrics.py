"""Metric oracles: hand-computed small cases and invariances."""

import numpy as np
import pytest

from splatslam.core import Pose, quat_from_axis_angle
from splatslam.metrics import ate_rmse, depth_l1, miou, psnr


def poses_from_xyz(xyz):
    return [Pose(np.array([1.0, 0, 0, 0]), p) for p in xyz]


# ---------------------------------------------------------------------------
# ATE
# ---------------------------------------------------------------------------

def test_ate_identical_tracks_zero():
    pts = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    assert ate_rmse(poses_from_xyz(pts), poses_from_xyz(pts)) == pytest.approx(0.0, abs=1e-9)


def test_ate_absorbs_global_rigid_transform():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(10, 3))
    R = np.array(Pose(quat_from_axis_angle([0.3, 0.5, 1.0], 0.7), [0, 0, 0]).rotation_matrix())
    moved = pts @ R.T + np.array([5.0, -2.0, 1.0])
    assert ate_rmse(poses_from_xyz(moved), poses_from_xyz(pts)) == pytest.approx(0.0, abs=1e-9)


def test_ate_unit_square_one_corner_offset():
    # gt: unit square corners; est: one corner pushed 0.1 m in x.
    # closed-form oracle computed independently below via the same algebra
    # spelled out longhand (centroids + Kabsch on the 2D tracks).
    gt = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    est = gt.copy()
    est[2, 0] += 0.1

    p = est - est.mean(axis=0)
    q = gt - gt.mean(axis=0)
    H = p.T @ q
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1, 1, d]) @ U.T
    resid = (est - est.mean(0)) @ R.T + gt.mean(0) - gt
    expect_cm = np.sqrt((resid**2).sum(axis=1).mean()) * 100

    got = ate_rmse(poses_from_xyz(est), poses_from_xyz(gt))
    assert got == pytest.approx(expect_cm, abs=1e-9)
    assert 0 < got < 10.0


def test_ate_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        ate_rmse(poses_from_xyz([[0, 0, 0]]), poses_from_xyz([[0, 0, 0], [1, 1, 1]]))


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------

def test_psnr_known_mse():
    a = np.zeros((10, 10, 3))
    b = np.full((10, 10, 3), 0.1)     # mse = 0.01 -> 20 dB
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_black_vs_white():
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_identical_images_sentinel():
    img = np.random.default_rng(1).random((8, 8, 3))
    assert psnr(img, img) == 99.0


def test_psnr_matches_direct_formula():
    rng = np.random.default_rng(2)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    expect = 10 * np.log10(1.0 / np.mean((a - b) ** 2))
    assert psnr(a, b) == pytest.approx(expect, rel=1e-12)


# ---------------------------------------------------------------------------
# mIoU
# ---------------------------------------------------------------------------

def test_miou_perfect_and_disjoint():
    a = np.array([[0, 0], [1, 1]])
    assert miou(a, a, 2) == 100.0
    b = np.array([[1, 1], [0, 0]])
    assert miou(b, a, 2) == 0.0


def test_miou_checkerboard_one_flip_hand_counted():
    # 4x4 checkerboard, classes {0,1}, one cell flipped from 0 to 1.
    # class 0: inter 7, union 8 -> 7/8 ; class 1: inter 8, union 9 -> 8/9
    gt = np.indices((4, 4)).sum(axis=0) % 2
    pred = gt.copy()
    pred[0, 0] = 1
    expect = (7 / 8 + 8 / 9) / 2 * 100
    assert miou(pred, gt, 2) == pytest.approx(expect, abs=1e-12)


def test_miou_ignores_classes_absent_from_gt():
    gt = np.zeros((4, 4), dtype=int)
    pred = np.zeros((4, 4), dtype=int)
    pred[0, 0] = 3
    # class 3 absent from gt: only class 0 scored, IoU 15/16
    assert miou(pred, gt, 8) == pytest.approx(15 / 16 * 100, abs=1e-12)


def test_miou_relabeling_invariance():
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 4, size=(12, 12))
    pred = rng.integers(0, 4, size=(12, 12))
    perm = np.array([2, 3, 0, 1])
    assert miou(pred, gt, 4) == pytest.approx(miou(perm[pred], perm[gt], 4), abs=1e-12)


# ---------------------------------------------------------------------------
# depth L1
# ---------------------------------------------------------------------------

def test_depth_l1_zero_and_uniform_offset():
    gt = np.full((6, 6), 2.0)
    assert depth_l1(gt, gt) == 0.0
    assert depth_l1(gt + 0.01, gt) == pytest.approx(1.0, abs=1e-12)


def test_depth_l1_masks_invalid():
    gt = np.full((4, 4), 1.0)
    gt[:2] = 0.0                      # invalid half
    pred = np.full((4, 4), 1.02)
    pred[:2] = 55.0                   # garbage where gt is invalid; must be ignored
    assert depth_l1(pred, gt) == pytest.approx(2.0, abs=1e-9)


def test_depth_l1_no_valid_pixels_raises():
    with pytest.raises(ValueError):
        depth_l1(np.ones((3, 3)), np.zeros((3, 3)))
