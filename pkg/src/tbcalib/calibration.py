"""Mask-driven geometric calibration.

From a binary canal mask: split left/right components, find the outermost
anchor points, iterate the mid-sagittal axis to a fixed point, fit the canal
plane by total least squares, assemble an orthonormal frame, and resample
the volume onto an isotropic grid aligned with that frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .losses import dsc_metric
from .phantom import RigidPose
from .volume import LabelMask, Volume

MIN_COMPONENT_VOXELS = 20
DEFAULT_L0_MM = 0.1
DEFAULT_MAX_ITER = 50
DEFAULT_OUT_SPACING = 0.5
BBOX_PAD_VOXELS = 2
RANK_MIRROR_DSC = 0.8
RANK_SLICE_GAP = 1.0
FRAME_TOL = 1e-9


class CalibrationError(Exception):
    pass


class InsufficientAnchorsError(CalibrationError):
    """Fewer than two usable canal components in the mask."""


@dataclass
class CalibrationFrame:
    """Origin and right-handed orthonormal axes of the calibrated system.

    x_axis is the mid-sagittal normal (anchor axis, left to right), z_axis
    the canal-plane normal (toward superior), y_axis the coronal normal.
    """

    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray
    p1: np.ndarray | None = None  # anchors kept as metadata
    p2: np.ndarray | None = None

    def __post_init__(self):
        axes = np.column_stack([self.x_axis, self.y_axis, self.z_axis])
        if np.abs(axes.T @ axes - np.eye(3)).max() > FRAME_TOL:
            raise CalibrationError("frame axes not orthonormal")
        if np.linalg.det(axes) < 0:
            raise CalibrationError("frame is left-handed")

    @property
    def rotation(self) -> np.ndarray:
        """Columns are (x_axis, y_axis, z_axis)."""
        return np.column_stack([self.x_axis, self.y_axis, self.z_axis])


@dataclass
class CalibrationReport:
    iterations: int = 0
    converged: bool = False
    l1_mm: float = float("nan")
    l0_mm: float = DEFAULT_L0_MM
    p1: list = field(default_factory=list)
    p2: list = field(default_factory=list)
    rms_mm: float = float("nan")
    angles_deg: list = field(default_factory=list)
    rank: str = "Failed"
    slice_gap: float = float("nan")
    mirror_dsc: float = float("nan")
    error: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "iterations": self.iterations,
            "converged": self.converged,
            "l1_mm": self.l1_mm,
            "l0_mm": self.l0_mm,
            "p1": [float(v) for v in self.p1],
            "p2": [float(v) for v in self.p2],
            "rms_mm": self.rms_mm,
            "angles_deg": [float(v) for v in self.angles_deg],
            "rank": self.rank,
            "slice_gap": self.slice_gap,
            "mirror_dsc": self.mirror_dsc,
            "error": self.error,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        d = json.loads(text)
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


def split_components(mask: LabelMask):
    """26-connected component split; returns (left, right) world-coordinate
    point sets (n, 3), assigned by world-x centroid."""
    if mask.foreground_count() == 0:
        raise InsufficientAnchorsError("mask is empty")
    labeled, n = ndimage.label(mask.voxels, structure=np.ones((3, 3, 3), dtype=int))
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
    order = np.argsort(sizes)[::-1]
    keep = [int(order[i]) + 1 for i in range(min(2, n)) if sizes[order[i]] >= MIN_COMPONENT_VOXELS]
    if len(keep) < 2:
        raise InsufficientAnchorsError(
            f"insufficient anchors: need two components with >= {MIN_COMPONENT_VOXELS} voxels")
    sets = []
    for lab in keep:
        zz, yy, xx = np.nonzero(labeled == lab)
        idx = np.stack([xx, yy, zz], axis=1)
        sets.append(mask.world(idx))
    if sets[0][:, 0].mean() <= sets[1][:, 0].mean():
        return sets[0], sets[1]
    return sets[1], sets[0]


def _extremal(points: np.ndarray, direction: np.ndarray, largest: bool) -> np.ndarray:
    """Extremal point along `direction`, lexicographic (x, y, z) tie-break."""
    proj = points @ direction
    best = proj.max() if largest else proj.min()
    ties = points[np.abs(proj - best) < 1e-12]
    order = np.lexsort((ties[:, 2], ties[:, 1], ties[:, 0]))
    return ties[order[0]].copy()


def find_anchors(left: np.ndarray, right: np.ndarray, direction):
    """Outermost points: P1 minimizes <p, d> over the left set, P2 maximizes
    it over the right set."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return _extremal(left, d, largest=False), _extremal(right, d, largest=True)


DEFAULT_ANCHOR_SLAB_MM = 0.75


def _slab_centroid(points: np.ndarray, direction: np.ndarray, largest: bool,
                   slab_mm: float) -> np.ndarray:
    """Centroid of the points within slab_mm of the extremal projection.

    A single extremal voxel sits anywhere on the nearly-flat cap of the canal
    surface, so its transverse position is quantization noise on the order of
    sqrt(R * spacing).  Averaging the whole cap slab is unbiased (the cap is
    symmetric about the true extremum) and shrinks that noise by sqrt(N).
    """
    proj = points @ direction
    if largest:
        sel = proj >= proj.max() - slab_mm
    else:
        sel = proj <= proj.min() + slab_mm
    return points[sel].mean(axis=0)


def refine_sagittal(left: np.ndarray, right: np.ndarray,
                    l0: float = DEFAULT_L0_MM, max_iter: int = DEFAULT_MAX_ITER,
                    anchor_slab_mm: float = DEFAULT_ANCHOR_SLAB_MM):
    """Fixed-point refinement of the inter-anchor axis.

    Starting from world x, repeatedly re-select the extremal anchors along
    the current direction and re-align the direction with P1 -> P2.  The
    residual L1 converts the angular change of the axis into millimeters of
    displacement at the farther anchor; iteration stops once L1 < l0.

    Anchors are sub-voxel estimates: the centroid of each component's
    extremal slab of depth `anchor_slab_mm` along the current direction
    (pass 0 to use the raw extremal voxels instead).

    Returns (P0, x_axis, dict with iterations/l1/converged/p1/p2).
    """
    if l0 <= 0:
        raise ValueError("l0 must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if anchor_slab_mm < 0:
        raise ValueError("anchor_slab_mm must be >= 0")
    d = np.array([1.0, 0.0, 0.0])
    p0 = p1 = p2 = None
    l1 = float("inf")
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if anchor_slab_mm > 0:
            p1 = _slab_centroid(left, d, largest=False, slab_mm=anchor_slab_mm)
            p2 = _slab_centroid(right, d, largest=True, slab_mm=anchor_slab_mm)
        else:
            p1, p2 = find_anchors(left, right, d)
        p0 = (p1 + p2) / 2.0
        sep = p2 - p1
        norm = np.linalg.norm(sep)
        if norm == 0:
            raise CalibrationError("anchor points coincide")
        d_new = sep / norm
        cosang = float(np.clip(d @ d_new, -1.0, 1.0))
        dtheta = math.acos(cosang)
        lever = max(np.linalg.norm(p1 - p0), np.linalg.norm(p2 - p0))
        l1 = lever * dtheta
        d = d_new
        if l1 < l0:
            converged = True
            break
    info = {"iterations": iterations, "l1_mm": float(l1), "converged": converged,
            "p1": p1, "p2": p2}
    return p0, d, info


def fit_lsc_plane(points: np.ndarray, x_axis: np.ndarray):
    """Total-least-squares plane through all foreground voxel centers.

    The normal (smallest-eigenvalue eigenvector of the centered covariance)
    is orthogonalized against x_axis and sign-fixed toward +z.  Returns
    (z_axis, rms residual in mm).
    """
    if len(points) < 3:
        raise CalibrationError("plane fit needs at least 3 points")
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] < 1e-12:
        raise CalibrationError("degenerate (collinear) point set")
    normal = evecs[:, 0]
    rms = float(np.sqrt(np.mean((centered @ normal) ** 2)))
    normal = normal - (normal @ x_axis) * x_axis
    norm = np.linalg.norm(normal)
    if norm < 1e-9:
        raise CalibrationError("canal-plane normal parallel to the anchor axis")
    normal /= norm
    if normal[2] < 0:
        normal = -normal
    return normal, rms


def build_frame(p0, x_axis, z_axis, p1=None, p2=None) -> CalibrationFrame:
    """Complete the right-handed frame with y = z cross x."""
    x = np.asarray(x_axis, dtype=np.float64)
    z = np.asarray(z_axis, dtype=np.float64)
    if abs(x @ z) > 1e-6:
        raise CalibrationError(f"axes not orthogonal (dot {x @ z:.2e})")
    # Re-orthogonalize exactly so the frame meets the 1e-9 invariant.
    x = x / np.linalg.norm(x)
    z = z - (z @ x) * x
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    return CalibrationFrame(origin=np.asarray(p0, dtype=np.float64),
                            x_axis=x, y_axis=y, z_axis=z, p1=p1, p2=p2)


def decomposition_angles_deg(x_axis: np.ndarray) -> list:
    """Diagnostic angles of the sagittal normal projected onto each
    coordinate plane (xy, xz, yz), measured against the in-plane first axis."""
    x, y, z = x_axis
    return [
        math.degrees(math.atan2(y, x)),  # xy plane, vs +x
        math.degrees(math.atan2(z, x)),  # xz plane, vs +x
        math.degrees(math.atan2(z, y)) if (abs(y) + abs(z)) > 0 else 0.0,  # yz plane, vs +y
    ]


def estimate_transform(frame: CalibrationFrame) -> RigidPose:
    """Rigid world -> calibrated map q = R^T (p - P0), R columns = frame axes."""
    rt = frame.rotation.T
    return RigidPose(rt, -rt @ frame.origin)


def resample(vol, pose: RigidPose, spacing: float = DEFAULT_OUT_SPACING,
             pad_voxels: int = BBOX_PAD_VOXELS):
    """Resample a Volume (trilinear) or LabelMask (nearest) onto an isotropic
    grid axis-aligned in the calibrated frame.

    `pose` maps world to calibrated coordinates.  The output grid covers the
    transformed bounding box of the input, padded by `pad_voxels` per side;
    out-of-field intensities take the input minimum (air), labels take 0.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    nx, ny, nz = vol.dims
    corners_idx = np.array([[x, y, z]
                            for x in (0, nx - 1)
                            for y in (0, ny - 1)
                            for z in (0, nz - 1)], dtype=np.float64)
    corners_cal = pose.apply(vol.world(corners_idx))
    lo = corners_cal.min(axis=0) - pad_voxels * spacing
    hi = corners_cal.max(axis=0) + pad_voxels * spacing
    out_dims = np.maximum(np.ceil((hi - lo) / spacing).astype(int) + 1, 1)
    onx, ony, onz = (int(v) for v in out_dims)

    inv = pose.inverse()
    is_mask = isinstance(vol, LabelMask)
    order = 0 if is_mask else 1
    fill = 0 if is_mask else float(vol.voxels.min())
    out = np.empty((onz, ony, onx), dtype=vol.voxels.dtype)
    xs = lo[0] + np.arange(onx) * spacing
    ys = lo[1] + np.arange(ony) * spacing
    rot = inv.rotation
    tr = inv.translation
    sp = vol.spacing
    org = vol.origin
    for iz in range(onz):
        q = np.empty((ony, onx, 3), dtype=np.float64)
        q[..., 0] = xs[None, :]
        q[..., 1] = ys[:, None]
        q[..., 2] = lo[2] + iz * spacing
        p = q @ rot.T + tr
        idx = (p - org) / sp
        out[iz] = ndimage.map_coordinates(
            vol.voxels, [idx[..., 2], idx[..., 1], idx[..., 0]],
            order=order, mode="constant", cval=fill)
    cls = LabelMask if is_mask else Volume
    return cls(voxels=out, spacing=(spacing,) * 3, origin=lo)


def mirror_mask_x(mask: LabelMask) -> LabelMask:
    """Reflect a mask about the calibrated mid-sagittal plane (world x = 0)."""
    nz, ny, nx = mask.voxels.shape
    # Index of the mirror image of voxel i: world x_i = origin_x + i*sx
    # maps to -x_i, i.e. index (-2*origin_x/sx) - i.
    m = -2.0 * mask.origin[0] / mask.spacing[0]
    mi = np.rint(m).astype(int)
    out = np.zeros_like(mask.voxels)
    src = mi - np.arange(nx)
    valid = (src >= 0) & (src < nx)
    out[:, :, valid] = mask.voxels[:, :, src[valid]]
    return LabelMask(voxels=out, spacing=mask.spacing.copy(), origin=mask.origin.copy())


def rank_result(calibrated_mask: LabelMask):
    """Rank a calibrated mask: Excellent / Good / Failed.

    Excellent requires the two components' axial index ranges to overlap,
    centroid axial gap <= 1 slice, and mirror-DSC >= 0.8; Good requires only
    the range overlap; anything else (including a failed component split)
    is Failed.  Returns (rank, slice_gap, mirror_dsc).
    """
    try:
        split_components(calibrated_mask)
    except InsufficientAnchorsError:
        return "Failed", float("nan"), float("nan")
    labeled, n = ndimage.label(calibrated_mask.voxels, structure=np.ones((3, 3, 3), dtype=int))
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
    top = np.argsort(sizes)[::-1][:2] + 1
    ranges = []
    centroids = []
    for lab in top:
        zz = np.nonzero(labeled == lab)[0]
        ranges.append((zz.min(), zz.max()))
        centroids.append(zz.mean())
    overlap = ranges[0][0] <= ranges[1][1] and ranges[1][0] <= ranges[0][1]
    gap = float(abs(centroids[0] - centroids[1]))
    mirror = dsc_metric(calibrated_mask, mirror_mask_x(calibrated_mask))
    if not overlap:
        return "Failed", gap, mirror
    if gap <= RANK_SLICE_GAP and mirror >= RANK_MIRROR_DSC:
        return "Excellent", gap, mirror
    return "Good", gap, mirror


def calibrate(vol: Volume, mask: LabelMask,
              l0: float = DEFAULT_L0_MM, max_iter: int = DEFAULT_MAX_ITER,
              spacing: float = DEFAULT_OUT_SPACING,
              anchor_slab_mm: float = DEFAULT_ANCHOR_SLAB_MM):
    """Full pipeline: split -> refine -> fit -> frame -> transform -> resample.

    Returns (calibrated volume, calibrated mask, CalibrationReport, pose)
    where pose maps world to calibrated coordinates.  On anchor failure the
    volume/mask/pose are None and the report rank is Failed.
    """
    report = CalibrationReport(l0_mm=l0)
    try:
        left, right = split_components(mask)
    except InsufficientAnchorsError as exc:
        report.error = str(exc)
        return None, None, report, None
    p0, x_axis, info = refine_sagittal(left, right, l0=l0, max_iter=max_iter,
                                       anchor_slab_mm=anchor_slab_mm)
    report.iterations = info["iterations"]
    report.l1_mm = info["l1_mm"]
    report.converged = info["converged"]
    report.p1 = list(info["p1"])
    report.p2 = list(info["p2"])
    all_points = np.concatenate([left, right], axis=0)
    z_axis, rms = fit_lsc_plane(all_points, x_axis)
    report.rms_mm = rms
    frame = build_frame(p0, x_axis, z_axis, p1=info["p1"], p2=info["p2"])
    report.angles_deg = decomposition_angles_deg(frame.x_axis)
    pose = estimate_transform(frame)
    cal_vol = resample(vol, pose, spacing=spacing)
    cal_mask = resample(mask, pose, spacing=spacing)
    rank, gap, mirror = rank_result(cal_mask)
    report.rank = rank
    report.slice_gap = gap
    report.mirror_dsc = mirror
    return cal_vol, cal_mask, report, pose
