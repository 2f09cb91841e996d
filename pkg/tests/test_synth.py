"""Synthetic-world oracle: determinism, palette alignment, trajectories,
corruption bookkeeping."""

import numpy as np
import pytest

from splatslam.core import quat_angle, quat_conj, quat_mul, world_to_camera
from splatslam.palette import PaletteSpec
from splatslam.synth import (CorruptionSpec, SceneSpec, default_camera,
                             look_at, make_scene, make_trajectory,
                             render_ground_truth)

PALETTE = PaletteSpec().values()


def test_empty_scene():
    assert len(make_scene(SceneSpec(primitive_count=0))) == 0


def test_scene_albedos_on_palette():
    gmap = make_scene(SceneSpec(primitive_count=300, seed=3))
    alb = gmap.albedo.numpy()
    assert np.isin(alb, PALETTE).all()


def test_scene_albedo_levels_restriction():
    gmap = make_scene(SceneSpec(primitive_count=200, seed=4, albedo_levels=(0, 1)))
    assert np.isin(gmap.albedo.numpy(), PALETTE[:2]).all()


def test_scene_determinism():
    a = make_scene(SceneSpec(primitive_count=250, seed=9))
    b = make_scene(SceneSpec(primitive_count=250, seed=9))
    assert np.array_equal(a.mu.numpy(), b.mu.numpy())
    assert np.array_equal(a.albedo.numpy(), b.albedo.numpy())
    assert np.array_equal(a.sem_logits.numpy(), b.sem_logits.numpy())


def test_scene_semantics_one_hot_and_log_illum_zero():
    gmap = make_scene(SceneSpec(primitive_count=200, seed=5))
    sem = gmap.sem_logits.numpy()
    assert ((sem == 0) | (sem == 6.0)).all()
    assert (sem == 6.0).sum(axis=1).min() == 1
    assert np.all(gmap.log_illum.numpy() == 0)


def test_look_at_points_camera_at_target():
    pose = look_at([1.0, -2.0, 1.5], [0.5, 0.5, 0.3])
    cam = world_to_camera(pose, [0.5, 0.5, 0.3])
    assert cam[2] > 0                       # in front
    assert np.allclose(cam[:2], 0, atol=1e-12)  # on the optical axis


def test_static_trajectory():
    poses = make_trajectory("static", 5, SceneSpec())
    assert len(poses) == 5
    for p in poses[1:]:
        assert np.array_equal(p.q, poses[0].q)
        assert np.array_equal(p.t, poses[0].t)


def test_orbit_sweep_angle():
    spec = SceneSpec()
    poses = make_trajectory("orbit", 30, spec, sweep_deg=60.0)
    rel = quat_mul(poses[-1].q, quat_conj(poses[0].q))
    assert np.rad2deg(quat_angle(rel)) == pytest.approx(60.0, abs=1.0)


def test_orbit_step_bounded():
    spec = SceneSpec()
    poses = make_trajectory("orbit", 40, spec, sweep_deg=70.0)
    steps = [np.linalg.norm(b.t - a.t) for a, b in zip(poses, poses[1:])]
    assert max(steps) < 0.12


def test_ground_truth_clean_equals_render():
    spec = SceneSpec(primitive_count=150, seed=6)
    gmap = make_scene(spec)
    poses = make_trajectory("orbit", 3, spec)
    K = default_camera(32, 24)
    frames, truth = render_ground_truth(gmap, poses, K, CorruptionSpec())
    from splatslam.render import RenderConfig, render
    buf = render(gmap, poses[0], K, RenderConfig(), track_grad=False)
    assert np.array_equal(frames[0].rgb, np.clip(buf.color.numpy(), 0, 1))
    assert all(not t["flagged"] for t in truth)


def test_flagged_count_and_box():
    spec = SceneSpec(primitive_count=150, seed=7, albedo_levels=(0, 1))
    gmap = make_scene(spec)
    poses = make_trajectory("orbit", 10, spec)
    K = default_camera(32, 24)
    cor = CorruptionSpec(flagged_fraction=0.3, noise_sigma=0.002)
    frames, truth = render_ground_truth(gmap, poses, K, cor)
    assert sum(t["flagged"] for t in truth) == 3
    for t in truth:
        assert 0.1 <= t["g"] <= 10.0
        assert -0.2 <= t["o"] <= 0.2


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec(gain_range=(0.01, 2.0))
    with pytest.raises(ValueError):
        CorruptionSpec(offset_range=(0.0, 0.5))


def test_exposure_corruption_trips_gate_on_default_scene():
    # "drastic" is operational: corruption drawn from the default ranges must
    # push SSIM below the 0.5 gate (magnitudes calibrated by this very check)
    from splatslam.drb import evaluate_gate
    spec = SceneSpec(primitive_count=400, seed=8, albedo_levels=(0, 1))
    gmap = make_scene(spec)
    poses = make_trajectory("orbit", 1, spec)
    K = default_camera(48, 36)
    clean, _ = render_ground_truth(gmap, poses, K, CorruptionSpec())
    lo_g, _ = CorruptionSpec().gain_range
    lo_o, _ = CorruptionSpec().offset_range
    rgb = np.clip(lo_g * clean[0].rgb + lo_o, 0, 1)
    gate = evaluate_gate(clean[0].rgb, rgb)
    assert gate.active, gate
    under = np.clip(clean[0].rgb / lo_g - lo_o, 0, 1)
    assert evaluate_gate(clean[0].rgb, under).active
