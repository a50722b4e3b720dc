import numpy as np
import pytest

from handprior import synth
from handprior.preprocess import (CubeSpec, DepthFrame, Intrinsics, NoHandError, Pose, crop_rect,
                                  denormalize_pose, detect_hand, extract_patch, normalize_pose, preprocess)

INTR = Intrinsics(100.0, 100.0, 32.0, 24.0)


def blank(w=64, h=48):
    return np.zeros((h, w), dtype=np.float32)


def test_single_pixel_center():
    d = blank()
    d[24, 32] = 500.0
    cube = detect_hand(DepthFrame(d, INTR))
    assert cube.center == pytest.approx((0.0, 0.0, 500.0))
    assert cube.side == 250.0


def test_symmetric_pixels_center():
    d = blank()
    d[20, 28] = d[28, 36] = 400.0
    c = detect_hand(DepthFrame(d, INTR)).center
    assert abs(c[0]) < 1e-12 and abs(c[1]) < 1e-12 and c[2] == pytest.approx(400.0)


def test_band_excludes_background():
    d = blank()
    d[24, 32] = 500.0
    d[:5, :5] = 900.0
    assert detect_hand(DepthFrame(d, INTR), z_band=150).center == pytest.approx((0.0, 0.0, 500.0))


def test_empty_frame_rejected():
    with pytest.raises(NoHandError):
        detect_hand(DepthFrame(blank(), INTR, "f7"))


def test_rendered_hand_centroid():
    cfg = synth.SynthConfig(n_samples=20, seed=3)
    for s in synth.render_dataset(cfg):
        c = np.array(detect_hand(s.frame).center)
        assert np.linalg.norm(c - s.centroid) <= 5.0


def test_patch_value_map():
    # the cube projects to columns 12..52 and rows 4..44, fully inside the image
    cube = CubeSpec((0.0, 0.0, 500.0), 200.0)
    d = np.full((48, 64), 500.0, dtype=np.float32)
    bands = [(0.0, 1.0), (600.0, 1.0), (400.0, -1.0), (700.0, 1.0), (300.0, -1.0)]
    for i, (depth, _) in enumerate(bands):
        d[:, 12 + 4 * i:16 + 4 * i] = depth
    p = extract_patch(DepthFrame(d, INTR), cube, 40)
    assert p.crop == pytest.approx((12.0, 4.0, 52.0, 44.0))
    for i, (_, value) in enumerate(bands):
        assert np.all(p.values[:, 4 * i:4 * i + 4] == value)
    assert np.all(p.values[:, 20:] == 0.0)


def test_cube_outside_image_rejected():
    d = np.full((48, 64), 500.0, dtype=np.float32)
    with pytest.raises(ValueError):
        extract_patch(DepthFrame(d, INTR), CubeSpec((5000.0, 0.0, 500.0), 250.0), 32)


def test_random_frames_bounded_and_missing_is_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        d = rng.uniform(300, 900, (48, 64)).astype(np.float32)
        d[rng.random(d.shape) < 0.2] = 0.0
        p = preprocess(DepthFrame(d, INTR), 32)
        assert p.values.min() >= -1.0 and p.values.max() <= 1.0


def test_crop_is_cube_projection():
    cube = CubeSpec((10.0, -20.0, 400.0), 250.0)
    u0, v0, u1, v1 = crop_rect(cube, INTR)
    assert u0 == pytest.approx(100 * (10 - 125) / 400 + 32)
    assert v1 == pytest.approx(100 * (-20 + 125) / 400 + 24)


def test_depth_translation_invariance():
    # same hand at two distances yields nearly the same patch
    angles = synth.angles_from_latent(np.zeros(8))
    intr = Intrinsics(160.0, 160.0, 80.0, 60.0)
    patches = []
    for z in (450.0, 550.0):
        hand = synth.pose_hand(angles, np.array([0.0, 0.0, z]))
        depth, _ = synth.render_depth(hand, intr, 160, 120)
        patches.append(preprocess(DepthFrame(depth.astype(np.float32), intr), 64).values)
    diff = np.abs(patches[0] - patches[1])
    assert np.mean(diff < 0.05) > 0.9


def test_pose_normalization_examples():
    cube = CubeSpec((10.0, 20.0, 500.0), 250.0)
    np.testing.assert_allclose(normalize_pose(np.array([[10.0, 20.0, 500.0]]), cube), [[0, 0, 0]])
    np.testing.assert_allclose(normalize_pose(np.array([[135.0, 20.0, 500.0]]), cube), [[1, 0, 0]])
    p = np.random.default_rng(0).normal(0, 100, (16, 3)) + [0, 0, 500]
    assert np.max(np.abs(denormalize_pose(normalize_pose(p, cube), cube) - p)) <= 1e-9


def test_pose_frame_flags():
    cube = CubeSpec((0.0, 0.0, 500.0))
    mm = Pose(np.zeros((3, 3)) + [0, 0, 500])
    n = normalize_pose(mm, cube)
    assert n.normalized
    with pytest.raises(ValueError):
        normalize_pose(n, cube)
    with pytest.raises(ValueError):
        denormalize_pose(mm, cube)
    with pytest.raises(ValueError):
        Pose(np.zeros((3, 2)))


def test_invalid_specs():
    with pytest.raises(ValueError):
        CubeSpec((0, 0, 500), 0)
    with pytest.raises(ValueError):
        CubeSpec((0, 0, -1))
    with pytest.raises(ValueError):
        Intrinsics(0, 1, 0, 0)
