"""Mapping: loss oracles, joint optimization, densify and prune."""

import numpy as np
import pytest
import torch

from worlds import small_world

from splatslam.core import Frame, GaussianMap, GaussianPrimitive, Pose
from splatslam.drb import GateState
from splatslam.mapping import (MapKeyframe, MappingConfig, densify,
                               mapping_loss, optimize_map, prune,
                               select_window)
from splatslam.metrics import psnr
from splatslam.render import RenderConfig, render


def to_keyframes(frames, poses):
    return [MapKeyframe(frame=f, pose=p) for f, p in zip(frames, poses)]


def map_snapshot(gmap):
    return {k: getattr(gmap, k).clone() for k in
            ("mu", "rot", "scale", "opacity", "albedo", "log_illum", "sem_logits")}


def maps_equal(a, snap):
    return all(torch.equal(getattr(a, k), v) for k, v in snap.items())


# ---------------------------------------------------------------------------
# mapping loss
# ---------------------------------------------------------------------------

def test_loss_zero_gradients_at_generating_map():
    _, gmap, K, poses, frames = small_world(seed=20)
    kfs = to_keyframes(frames, poses)
    cfg = MappingConfig(lambda_sem=0.0, pixels_per_keyframe=10**6)
    res = mapping_loss(kfs, gmap, cfg)
    assert res.value == pytest.approx(0.0, abs=1e-12)
    for cls, g in res.param_grads.items():
        assert float(g.abs().max()) < 1e-6, cls


def test_loss_cross_entropy_uniform_closed_form():
    # opaque gaussians with all-zero logits fully covering the frame: the
    # blended simplex is uniform over K=8 -> CE = ln 8
    K_classes = 8
    g1 = GaussianPrimitive([0, 0, 1.0], [1, 0, 0, 0], [12.0] * 3, 1.0,
                           [0.5, 0.5, 0.5], 0.0, np.zeros(K_classes))
    g2 = GaussianPrimitive([0, 0, 1.5], [1, 0, 0, 0], [12.0] * 3, 1.0,
                           [0.5, 0.5, 0.5], 0.0, np.zeros(K_classes))
    gmap = GaussianMap.from_primitives([g1, g2], K_classes)
    from splatslam.synth import default_camera
    K = default_camera(16, 12)
    buf = render(gmap, Pose.identity(), K, track_grad=False)
    assert buf.coverage.numpy().min() > 0.999
    frame = Frame(rgb=buf.color.numpy().clip(0, 1), depth=buf.depth.numpy(),
                  sem=np.zeros((12, 16), np.int32), intrinsics=K)
    cfg = MappingConfig(lambda_depth=0.0, lambda_color=0.0, lambda_sem=1.0,
                        lambda_drb=0.0, pixels_per_keyframe=10**6)
    res = mapping_loss([MapKeyframe(frame=frame, pose=Pose.identity())], gmap, cfg)
    assert res.value == pytest.approx(np.log(8), rel=1e-3)


def test_loss_albedo_perturbation_increases_loss():
    _, gmap, K, poses, frames = small_world(seed=21)
    kfs = to_keyframes(frames[:1], poses[:1])
    cfg = MappingConfig(lambda_sem=0.0, pixels_per_keyframe=10**6)
    base = mapping_loss(kfs, gmap, cfg).value
    bumped = gmap.clone()
    with torch.no_grad():
        bumped.albedo[0, 0] += 0.25       # one full palette step
    bumped.touch()
    assert mapping_loss(kfs, bumped, cfg).value > base


def test_loss_empty_sample_rejected():
    from splatslam.core import SplatError
    _, gmap, K, poses, frames = small_world(seed=22)
    kfs = to_keyframes(frames[:1], poses[:1])
    with pytest.raises(SplatError):
        mapping_loss(kfs, gmap, MappingConfig(pixels_per_keyframe=0))
    with pytest.raises(SplatError):
        mapping_loss([], gmap, MappingConfig())


# ---------------------------------------------------------------------------
# optimize_map
# ---------------------------------------------------------------------------

def test_optimize_zero_iterations_is_noop():
    _, gmap, K, poses, frames = small_world(seed=23)
    kfs = to_keyframes(frames, poses)
    before = map_snapshot(gmap)
    stats = optimize_map(kfs, gmap, MappingConfig(), iters=0)
    assert maps_equal(gmap, before)
    assert stats.losses == []


def test_optimize_poses_bitwise_frozen():
    _, gmap, K, poses, frames = small_world(seed=24)
    kfs = to_keyframes(frames, poses)
    qs = [p.q.copy() for p in poses]
    ts = [p.t.copy() for p in poses]
    optimize_map(kfs, gmap, MappingConfig(iters_per_round=3),
                 RenderConfig(dtype="float32"), np.random.default_rng(0))
    for kf, q, t in zip(kfs, qs, ts):
        assert np.array_equal(kf.pose.q, q)
        assert np.array_equal(kf.pose.t, t)


def test_optimize_albedos_stay_on_palette():
    from splatslam.palette import PaletteSpec, quantize_array
    _, gmap, K, poses, frames = small_world(seed=25)
    kfs = to_keyframes(frames, poses)
    with torch.no_grad():
        gmap.albedo += 0.07               # push off the palette
    gmap.touch()
    optimize_map(kfs, gmap, MappingConfig(iters_per_round=4),
                 RenderConfig(dtype="float32"), np.random.default_rng(0))
    # the rendered (effective) albedo is the quantized one
    rendered = quantize_array(gmap.albedo.numpy())
    assert np.isin(rendered, PaletteSpec().values()).all()


def test_optimize_best_loss_non_increasing_window():
    _, gmap, K, poses, frames = small_world(seed=26)
    kfs = to_keyframes(frames, poses)
    noisy = gmap.clone()
    rng = np.random.default_rng(1)
    with torch.no_grad():
        noisy.mu += torch.as_tensor(rng.normal(0, 0.01, noisy.mu.shape))
        noisy.log_illum += torch.as_tensor(rng.normal(0, 0.15, noisy.log_illum.shape))
    noisy.touch()
    stats = optimize_map(kfs, noisy, MappingConfig(iters_per_round=25),
                         RenderConfig(dtype="float32"), np.random.default_rng(2))
    best = np.minimum.accumulate(stats.losses)
    assert (np.diff(best) <= 1e-12).all()
    assert best[-1] < stats.losses[0]


def test_optimize_recovers_perturbed_map_psnr():
    _, gmap, K, poses, frames = small_world(n_prims=260, seed=27, width=48,
                                            height=36, n_frames=4)
    kfs = to_keyframes(frames, poses)
    noisy = gmap.clone()
    rng = np.random.default_rng(3)
    with torch.no_grad():
        noisy.mu += torch.as_tensor(rng.normal(0, 0.008, noisy.mu.shape))
        noisy.albedo += torch.as_tensor(rng.normal(0, 0.05, noisy.albedo.shape))
        noisy.log_illum += torch.as_tensor(rng.normal(0, 0.1, noisy.log_illum.shape))
        noisy.opacity.clamp_(0.3, 0.9)
    noisy.touch()
    rc = RenderConfig(dtype="float32")
    optimize_map(kfs, noisy, MappingConfig(iters_per_round=120),
                 rc, np.random.default_rng(4))
    vals = []
    for f, p in zip(frames, poses):
        buf = render(noisy, p, K, rc, track_grad=False)
        vals.append(psnr(np.clip(buf.color.numpy(), 0, 1), f.rgb))
    assert np.mean(vals) > 30.0, vals


# ---------------------------------------------------------------------------
# densify / prune
# ---------------------------------------------------------------------------

def test_densify_perfect_map_inserts_nothing():
    _, gmap, K, poses, frames = small_world(seed=28)
    kfs = to_keyframes(frames[:1], poses[:1])
    n0 = len(gmap)
    assert densify(gmap, kfs, MappingConfig()) == 0
    assert len(gmap) == n0


def test_densify_fills_hole():
    _, gmap, K, poses, frames = small_world(seed=29, n_prims=300)
    kfs = to_keyframes(frames[:1], poses[:1])
    # carve out everything in a world-space slab and re-render the gt frame
    mu = gmap.mu.numpy()
    hole = (mu[:, 0] > 0.8) & (mu[:, 0] < 1.3) & (mu[:, 2] < 0.2)
    holed = gmap.clone()
    holed.keep(torch.as_tensor(~hole))
    inserted = densify(holed, kfs, MappingConfig(densify_cap=500))
    assert inserted > 0
    new_mu = holed.mu.numpy()[-inserted:]
    frac_in_hole = ((new_mu[:, 0] > 0.7) & (new_mu[:, 0] < 1.4)).mean()
    assert frac_in_hole > 0.5, frac_in_hole


def test_densify_respects_cap():
    _, gmap, K, poses, frames = small_world(seed=30)
    kfs = to_keyframes(frames[:1], poses[:1])
    empty = GaussianMap.empty(gmap.class_count)
    inserted = densify(empty, kfs, MappingConfig(densify_cap=64))
    assert inserted == 64
    assert len(empty) == 64


def test_densify_bootstrap_quantizes_albedo():
    from splatslam.palette import PaletteSpec
    _, gmap, K, poses, frames = small_world(seed=31)
    kfs = to_keyframes(frames[:1], poses[:1])
    empty = GaussianMap.empty(gmap.class_count)
    densify(empty, kfs, MappingConfig(densify_cap=200))
    assert np.isin(empty.albedo.numpy(), PaletteSpec().values()).all()
    assert np.all(empty.log_illum.numpy() == 0.0)
    assert np.all(empty.opacity.numpy() == 0.5)


def test_prune_removals():
    _, gmap, K, poses, frames = small_world(seed=32)
    n0 = len(gmap)
    assert prune(gmap, MappingConfig()) == 0       # all opacities high
    with torch.no_grad():
        gmap.opacity[5] = 0.01
        gmap.mu[7, 0] = np.nan
    gmap.touch()
    removed = prune(gmap, MappingConfig())
    assert removed == 2
    assert len(gmap) == n0 - 2


def test_prune_preserves_survivor_order():
    _, gmap, K, poses, frames = small_world(seed=33)
    ids = gmap.mu.numpy().copy()
    with torch.no_grad():
        gmap.opacity[3] = 0.0
    gmap.touch()
    prune(gmap, MappingConfig())
    survivors = np.delete(ids, 3, axis=0)
    assert np.array_equal(gmap.mu.numpy(), survivors)


def test_prune_invisible_changes_little():
    # below the weight cutoff the primitive never contributed: renders are
    # bit-identical; slightly above, the change stays PSNR-irrelevant
    _, gmap, K, poses, frames = small_world(seed=34)
    with torch.no_grad():
        gmap.opacity[10] = 0.003          # under the 1/255 cutoff
    gmap.touch()
    before = render(gmap, poses[0], K, track_grad=False).color.numpy()
    prune(gmap, MappingConfig())
    after = render(gmap, poses[0], K, track_grad=False).color.numpy()
    assert np.array_equal(before, after)

    with torch.no_grad():
        gmap.opacity[11] = 0.03
    gmap.touch()
    before = render(gmap, poses[0], K, track_grad=False).color.numpy()
    prune(gmap, MappingConfig())
    after = render(gmap, poses[0], K, track_grad=False).color.numpy()
    assert psnr(np.clip(after, 0, 1), np.clip(before, 0, 1)) > 40.0


def test_select_window():
    kfs = list(range(12))
    win = select_window(kfs, size=8)
    assert win == [0] + list(range(4, 12))
    assert select_window(kfs[:5], size=8) == kfs[:5]
