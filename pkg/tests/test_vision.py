import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from nanoloc import vision
from nanoloc.pose import Pose, relative_pose
from nanoloc.vision import AugmentationConfig, CameraIntrinsics, TargetModel

GOLDEN = Path(__file__).parent / "golden"
OBS = Pose(0, 0, 0, 0)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def test_apparent_size_at_published_distances():
    p4 = vision.project(OBS, Pose(0.4, 0, 0))
    assert p4.width_px == pytest.approx(18.0)
    assert p4.height_px == pytest.approx(7.92)
    p15 = vision.project(OBS, Pose(1.5, 0, 0))
    assert p15.width_px == pytest.approx(4.8)


def test_projection_limit_far_away():
    widths, centers = [], []
    for d in (10.0, 100.0, 1000.0):
        p = vision.project(OBS, Pose(d, 0.5, 0.2))
        widths.append(p.width_px)
        centers.append((p.center_u, p.center_v))
    assert widths[0] > widths[1] > widths[2]
    assert widths[-1] < 0.01
    cam = CameraIntrinsics()
    assert centers[-1][0] == pytest.approx(cam.cx, abs=0.05)
    assert centers[-1][1] == pytest.approx(cam.cy, abs=0.05)


def test_target_behind_camera_out_of_view():
    assert vision.project(OBS, Pose(-0.5, 0, 0)) is None
    assert vision.project(OBS, Pose(0.0, 0, 0)) is None


def test_target_off_frame_out_of_view():
    assert vision.project(OBS, Pose(0.4, 2.0, 0)) is None


def test_projection_lateral_offsets():
    cam = CameraIntrinsics()
    p = vision.project(OBS, Pose(0.8, 0.1, -0.05))
    assert p.center_u == pytest.approx(cam.cx - 72 * 0.1 / 0.8)
    assert p.center_v == pytest.approx(cam.cy + 72 * 0.05 / 0.8)


# ---------------------------------------------------------------------------
# Rendering and blob detection
# ---------------------------------------------------------------------------


def test_out_of_view_renders_pure_background():
    frame = vision.render(OBS, Pose(-1.0, 0, 0))
    assert np.all(frame == vision.FLAT_BACKGROUND)


def test_render_single_connected_blob_of_right_width():
    from scipy import ndimage

    frame = vision.render(OBS, Pose(0.4, 0, 0))
    mask = frame < vision.FLAT_BACKGROUND - 25
    labels, count = ndimage.label(mask)
    assert count == 1
    cols = np.nonzero(mask.any(axis=0))[0]
    width = cols.max() - cols.min() + 1
    assert abs(width - 18) <= 1


def test_render_deterministic():
    a = vision.render(OBS, Pose(0.7, 0.1, 0.0), background="textured", seed=5)
    b = vision.render(OBS, Pose(0.7, 0.1, 0.0), background="textured", seed=5)
    assert np.array_equal(a, b)
    c = vision.render(OBS, Pose(0.7, 0.1, 0.0), background="textured", seed=6)
    assert not np.array_equal(a, c)


def test_blob_extent_at_far_distance():
    frame = vision.render(OBS, Pose(1.5, 0, 0))
    blob = vision.detect_blob(frame)
    assert abs(blob.extent_w - 5) <= 1


def test_projection_blob_consistency():
    # blob center within 1 px of the projection, width within 1 px (>= 4 px wide)
    for x, y, z in [(0.35, 0.0, 0.0), (0.5, 0.08, -0.04), (0.9, -0.15, 0.1), (1.4, 0.1, 0.05)]:
        tgt = Pose(x, y, z)
        proj = vision.project(OBS, tgt)
        assert proj.width_px >= 4
        frame = vision.render(OBS, tgt)
        blob = vision.detect_blob(frame)
        assert abs(blob.center_u - proj.center_u) <= 1.0
        assert abs(blob.center_v - proj.center_v) <= 1.0
        assert abs(blob.width_px - proj.width_px) <= 1.0


def test_inverse_consistency_sweep():
    # pinhole inversion recovers (x, y, z) within 5% over [0.3, 1.5] m
    for d in np.linspace(0.3, 1.5, 9):
        tgt = Pose(float(d), 0.15 * d, -0.1 * d)
        est = vision.estimate_pose_from_blob(vision.render(OBS, tgt))
        assert est is not None
        rel = relative_pose(OBS, tgt)
        for got, want in zip(est.as_tuple()[:3], rel.as_tuple()[:3]):
            assert abs(got - want) / abs(want) <= 0.05, (d, got, want)


def test_blob_none_on_empty_frame():
    frame = np.full((160, 160), 170, dtype=np.uint8)
    assert vision.detect_blob(frame) is None


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def test_identity_augmentation_is_noop():
    rng = np.random.Generator(np.random.PCG64(1))
    frame = vision.render(OBS, Pose(0.5, 0, 0))
    out = vision.augment(frame, AugmentationConfig.identity(), rng)
    assert np.array_equal(out, frame)


def test_exposure_gain_hand_arithmetic():
    cfg = AugmentationConfig(
        exposure_range=(2.0, 2.0),
        gamma_range=(1.0, 1.0),
        dynamic_range=(1.0, 1.0),
        blur_kernels=(1,),
        vignette_range=(0.0, 0.0),
        noise_sigma_range=(0.0, 0.0),
        probability=1.0,
    )
    rng = np.random.Generator(np.random.PCG64(2))
    frame = np.full((16, 16), 64, dtype=np.uint8)
    out = vision.augment(frame, cfg, rng)
    assert np.all(out == 128)


def test_augment_clamps_to_uint8():
    cfg = AugmentationConfig(
        exposure_range=(3.0, 3.0), probability=1.0, noise_sigma_range=(8.0, 8.0)
    )
    rng = np.random.Generator(np.random.PCG64(3))
    frame = np.full((16, 16), 200, dtype=np.uint8)
    out = vision.augment(frame, cfg, rng)
    assert out.dtype == np.uint8
    assert out.max() <= 255 and out.min() >= 0


def test_augment_golden_hash():
    rng = np.random.Generator(np.random.PCG64(1234))
    frame = vision.render(OBS, Pose(0.6, 0.05, -0.02), background="gradient")
    out = vision.augment(frame, AugmentationConfig(), rng)
    digest = hashlib.sha256(out.tobytes()).hexdigest()
    want = json.loads((GOLDEN / "augment_hash.json").read_text())["sha256"]
    assert digest == want


def test_augment_deterministic_given_state():
    frame = vision.render(OBS, Pose(0.6, 0.0, 0.0))
    a = vision.augment(frame, AugmentationConfig(), np.random.Generator(np.random.PCG64(9)))
    b = vision.augment(frame, AugmentationConfig(), np.random.Generator(np.random.PCG64(9)))
    assert np.array_equal(a, b)


def test_augment_centroid_shift_bounded():
    # centroid never moves more than the blur radius (2 px for kernel 5)
    cfg = AugmentationConfig(noise_sigma_range=(0.0, 4.0))
    for seed in range(6):
        rng = np.random.Generator(np.random.PCG64(seed))
        tgt = Pose(0.5, 0.06, -0.03)
        frame = vision.render(OBS, tgt)
        before = vision.detect_blob(frame)
        after = vision.detect_blob(vision.augment(frame, cfg, rng))
        if after is None:
            continue
        shift = math.hypot(after.center_u - before.center_u, after.center_v - before.center_v)
        assert shift <= 2.5


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


def test_dataset_roundtrip(tmp_path):
    pairs = [(OBS, Pose(0.4 + 0.2 * k, 0.02 * k, -0.01 * k)) for k in range(5)]
    manifest = vision.generate_dataset(pairs, tmp_path, seed=3)
    rows = vision.read_manifest(manifest)
    assert len(rows) == 5
    for row, (obs, tgt) in zip(rows, pairs):
        assert row.relative.as_tuple() == pytest.approx(relative_pose(obs, tgt).as_tuple())
        assert (tmp_path / row.frame).exists()


def test_manifest_rejects_malformed(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("nonsense,header\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        vision.read_manifest(path)
    good = tmp_path / "short.csv"
    good.write_text(",".join(vision.MANIFEST_COLUMNS) + "\nframe.pgm,1,2\n")
    with pytest.raises(ValueError, match="line 2"):
        vision.read_manifest(good)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(focal_px=-1)
    with pytest.raises(ValueError):
        CameraIntrinsics(cx=500)


def test_focal_length_solves_published_sizes():
    cam = CameraIntrinsics()
    model = TargetModel()
    assert model.width_m * cam.focal_px / 0.4 == pytest.approx(18.0)
    assert model.width_m * cam.focal_px / 1.5 == pytest.approx(4.8, abs=0.25)
