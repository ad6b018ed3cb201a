import math

import numpy as np
import pytest

from tbcalib import calibration as cal
from tbcalib.phantom import (PhantomSpec, RigidPose, generate_phantom,
                             rotation_angle_deg, rotation_from_euler_deg)
from tbcalib.volume import LabelMask


def blob_mask(centers, side=40, spacing=0.5):
    """Mask with a 3^3 blob at each (x, y, z) index center."""
    vox = np.zeros((side, side, side), dtype=np.uint8)
    for cx, cy, cz in centers:
        vox[cz - 1:cz + 2, cy - 1:cy + 2, cx - 1:cx + 2] = 1
    # centered so voxel centers are symmetric about x = 0
    return LabelMask(voxels=vox, spacing=(spacing,) * 3,
                     origin=(-(side - 1) * spacing / 2,) * 3)


def small_phantom(**kw):
    kw.setdefault("dims", (160, 64, 48))
    return generate_phantom(PhantomSpec(**kw))


# --- component split ---------------------------------------------------------

def test_split_components_left_right_by_world_x():
    m = blob_mask([(30, 20, 20), (10, 20, 20)])
    left, right = cal.split_components(m)
    assert left[:, 0].mean() < right[:, 0].mean()
    assert len(left) == len(right) == 27


def test_split_components_requires_two():
    with pytest.raises(cal.InsufficientAnchorsError):
        cal.split_components(blob_mask([(20, 20, 20)]))
    empty = LabelMask(voxels=np.zeros((8, 8, 8), dtype=np.uint8))
    with pytest.raises(cal.InsufficientAnchorsError):
        cal.split_components(empty)


def test_split_components_min_size_filter():
    vox = np.zeros((20, 20, 20), dtype=np.uint8)
    vox[5:8, 5:8, 5:8] = 1          # 27 voxels, keeps
    vox[15, 15, 15] = 1             # 1 voxel, below threshold
    m = LabelMask(voxels=vox)
    with pytest.raises(cal.InsufficientAnchorsError):
        cal.split_components(m)


def test_split_components_keeps_two_largest():
    vox = np.zeros((40, 40, 40), dtype=np.uint8)
    vox[5:10, 5:10, 5:10] = 1       # 125
    vox[5:9, 5:9, 30:34] = 1        # 64
    vox[30:33, 30:33, 20:23] = 1    # 27 (dropped)
    m = LabelMask(voxels=vox)
    left, right = cal.split_components(m)
    assert {len(left), len(right)} == {125, 64}


# --- anchors -------------------------------------------------------------------

def test_find_anchors_extremal_points():
    left = np.array([[0.0, 0, 0], [-2.0, 1, 1], [-1.0, 5, 5]])
    right = np.array([[3.0, 0, 0], [5.0, -1, 2], [4.0, 0, 0]])
    p1, p2 = cal.find_anchors(left, right, (1.0, 0, 0))
    np.testing.assert_array_equal(p1, [-2.0, 1, 1])
    np.testing.assert_array_equal(p2, [5.0, -1, 2])


def test_find_anchors_lexicographic_tie_break():
    left = np.array([[0.0, 2.0, 0.0], [0.0, 1.0, 3.0], [0.0, 1.0, 1.0]])
    p1, _ = cal.find_anchors(left, left + [10, 0, 0], (1.0, 0, 0))
    np.testing.assert_array_equal(p1, [0.0, 1.0, 1.0])


def test_refine_sagittal_single_iteration_when_l0_infinite():
    _, mask, _ = small_phantom()
    left, right = cal.split_components(mask)
    _, _, info = cal.refine_sagittal(left, right, l0=float("inf"))
    assert info["iterations"] == 1
    assert info["converged"]


def test_refine_sagittal_identity_phantom_axis():
    _, mask, _ = small_phantom()
    left, right = cal.split_components(mask)
    p0, d, info = cal.refine_sagittal(left, right)
    assert info["converged"]
    angle = math.degrees(math.acos(min(1.0, abs(d @ [1.0, 0, 0]))))
    assert angle < 0.1
    assert np.abs(p0).max() < 0.5  # mid-point near the world origin


def test_refine_sagittal_slab_zero_uses_raw_voxels():
    _, mask, _ = small_phantom()
    left, right = cal.split_components(mask)
    p1_set = {tuple(p) for p in left}
    _, _, info = cal.refine_sagittal(left, right, anchor_slab_mm=0.0)
    assert tuple(info["p1"]) in p1_set


def test_refine_sagittal_validation():
    left = np.zeros((5, 3))
    with pytest.raises(ValueError):
        cal.refine_sagittal(left, left, l0=0.0)
    with pytest.raises(ValueError):
        cal.refine_sagittal(left, left, max_iter=0)
    with pytest.raises(ValueError):
        cal.refine_sagittal(left, left, anchor_slab_mm=-1.0)


# --- plane fit -----------------------------------------------------------------

def test_fit_plane_recovers_tilted_normal():
    rng = np.random.default_rng(0)
    n_true = np.array([0.1, -0.2, 1.0])
    n_true /= np.linalg.norm(n_true)
    u = np.array([1.0, 0, 0]) - n_true[0] * n_true
    u /= np.linalg.norm(u)
    v = np.cross(n_true, u)
    pts = rng.normal(size=(500, 2)) @ np.stack([u, v]) + rng.uniform(-3, 3, 3)
    z, rms = cal.fit_lsc_plane(pts, u)
    assert rms < 1e-9
    assert abs(z @ n_true) > 1.0 - 1e-9
    assert z[2] > 0  # sign fixed toward +z


def test_fit_plane_rms_of_noisy_points():
    rng = np.random.default_rng(1)
    pts = np.zeros((1000, 3))
    pts[:, :2] = rng.normal(size=(1000, 2)) * 5
    pts[:, 2] = rng.normal(size=1000) * 0.2
    z, rms = cal.fit_lsc_plane(pts, np.array([1.0, 0, 0]))
    assert 0.15 < rms < 0.25


def test_fit_plane_degenerate_collinear():
    pts = np.outer(np.arange(10, dtype=float), [1.0, 0, 0])
    with pytest.raises(cal.CalibrationError):
        cal.fit_lsc_plane(pts, np.array([0.0, 1.0, 0]))


# --- frame / transform ------------------------------------------------------------

def test_build_frame_right_handed_orthonormal():
    f = cal.build_frame(np.zeros(3), [1.0, 0, 0], [0.0, 0, 1.0])
    r = f.rotation
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(f.y_axis, [0, 1.0, 0], atol=1e-12)


def test_build_frame_rejects_non_orthogonal_axes():
    with pytest.raises(cal.CalibrationError):
        cal.build_frame(np.zeros(3), [1.0, 0, 0], [0.8, 0, 0.6])


def test_estimate_transform_maps_frame_to_canonical():
    rot = rotation_from_euler_deg(10, 20, 30)
    f = cal.build_frame(np.array([3.0, -1.0, 2.0]), rot[:, 0], rot[:, 2])
    pose = cal.estimate_transform(f)
    np.testing.assert_allclose(pose.apply(f.origin), 0.0, atol=1e-12)
    np.testing.assert_allclose(pose.apply(f.origin + f.x_axis), [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(pose.apply(f.origin + f.z_axis), [0, 0, 1], atol=1e-12)


def test_decomposition_angles():
    a = cal.decomposition_angles_deg(np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(a, [0.0, 0.0, 0.0], atol=1e-12)
    a = cal.decomposition_angles_deg(np.array([math.cos(0.3), math.sin(0.3), 0.0]))
    assert a[0] == pytest.approx(math.degrees(0.3))


# --- resampling --------------------------------------------------------------------

def test_resample_identity_preserves_values():
    from tbcalib.volume import Volume
    rng = np.random.default_rng(2)
    v = Volume(voxels=rng.normal(size=(10, 12, 14)).astype(np.float32),
               spacing=(0.5, 0.5, 0.5), origin=(-3.0, -3.0, -2.5))
    out = cal.resample(v, RigidPose.identity(), spacing=0.5, pad_voxels=0)
    # output grid coincides with input voxel centers; trilinear is exact there
    assert out.voxels.shape == v.voxels.shape
    np.testing.assert_allclose(out.voxels, v.voxels, atol=1e-5)


def test_resample_mask_nearest_binary():
    m = blob_mask([(10, 20, 20), (30, 20, 20)])
    pose = RigidPose(rotation_from_euler_deg(0, 0, 10), np.array([0.3, -0.2, 0.1]))
    out = cal.resample(m, pose, spacing=0.5)
    assert isinstance(out, LabelMask)
    assert set(np.unique(out.voxels)) <= {0, 1}
    # voxel count approximately preserved under a rigid move
    assert abs(out.foreground_count() - m.foreground_count()) <= \
        0.3 * m.foreground_count()


def test_resample_rejects_bad_spacing():
    m = blob_mask([(10, 20, 20), (30, 20, 20)])
    with pytest.raises(ValueError):
        cal.resample(m, RigidPose.identity(), spacing=0.0)


def test_mirror_mask_of_symmetric_mask_is_identical():
    _, mask, _ = small_phantom()
    mirrored = cal.mirror_mask_x(mask)
    np.testing.assert_array_equal(mirrored.voxels, mask.voxels)


def test_mirror_mask_moves_one_sided_blob():
    m = blob_mask([(10, 20, 20), (30, 20, 20)])
    one_sided = LabelMask(voxels=(m.voxels * (np.arange(40) < 20)[None, None, :]).astype(np.uint8),
                          spacing=m.spacing, origin=m.origin)
    mirrored = cal.mirror_mask_x(one_sided)
    from tbcalib.losses import dsc_metric
    assert dsc_metric(one_sided, mirrored) == 0.0


# --- ranking ------------------------------------------------------------------------

def test_rank_excellent_for_symmetric_mask():
    m = blob_mask([(10, 20, 20), (29, 20, 20)])  # symmetric about x = 0
    rank, gap, mirror = cal.rank_result(m)
    assert rank == "Excellent"
    assert gap == 0.0
    assert mirror == 1.0


def test_rank_good_when_asymmetric_but_overlapping():
    m = blob_mask([(10, 20, 20), (29, 26, 21)])  # y/x offset kills the mirror
    rank, gap, mirror = cal.rank_result(m)
    assert rank == "Good"
    assert mirror < 0.8


def test_rank_failed_no_axial_overlap():
    m = blob_mask([(10, 20, 10), (29, 20, 30)])
    rank, _, _ = cal.rank_result(m)
    assert rank == "Failed"


def test_rank_failed_single_component():
    m = blob_mask([(20, 20, 20)])
    rank, gap, mirror = cal.rank_result(m)
    assert rank == "Failed"
    assert math.isnan(gap) and math.isnan(mirror)


# --- full pipeline -------------------------------------------------------------------

def test_calibrate_identity_phantom_excellent():
    vol, mask, _ = small_phantom()
    cal_vol, cal_mask, report, pose = cal.calibrate(vol, mask)
    assert report.rank == "Excellent"
    assert report.converged
    assert report.mirror_dsc > 0.95
    assert rotation_angle_deg(pose.rotation, np.eye(3)) < 0.2
    assert np.linalg.norm(pose.translation) < 0.5
    assert cal_vol.spacing[0] == 0.5
    assert cal_mask.same_grid(cal_vol)


def test_calibrate_undoes_known_skew():
    skew = RigidPose(rotation_from_euler_deg(6, -9, 12), np.array([1.5, -2.0, 1.0]))
    vol, mask, pose_true = generate_phantom(
        PhantomSpec(dims=(176, 80, 64), skew=skew))
    _, _, report, pose_est = cal.calibrate(vol, mask)
    resid = pose_est.compose(pose_true)
    assert rotation_angle_deg(resid.rotation, np.eye(3)) < 1.5
    assert np.linalg.norm(resid.translation) < 1.0
    assert report.rank in ("Excellent", "Good")


def test_calibrate_empty_mask_reports_failure():
    vol, mask, _ = small_phantom()
    empty = LabelMask(voxels=np.zeros_like(mask.voxels),
                      spacing=mask.spacing, origin=mask.origin)
    cal_vol, cal_mask, report, pose = cal.calibrate(vol, empty)
    assert cal_vol is None and cal_mask is None and pose is None
    assert report.rank == "Failed"
    assert report.error


def test_report_json_roundtrip():
    rep = cal.CalibrationReport(iterations=3, converged=True, l1_mm=0.01,
                                p1=[1.0, 2.0, 3.0], p2=[4.0, 5.0, 6.0],
                                rms_mm=0.2, angles_deg=[1.0, 2.0, 3.0],
                                rank="Good", slice_gap=0.5, mirror_dsc=0.7)
    back = cal.CalibrationReport.from_json(rep.to_json())
    assert back == rep
