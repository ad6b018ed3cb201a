"""Synthetic temporal-bone phantoms with two canal arcs under a known rigid skew.

The canonical scene holds two mirror-symmetric arc tubes (major radius R_c,
tube radius r_c) lying in the z=0 plane, centered at (+/-c, 0, 0).  The scene
is rigidly moved by a known pose and sampled on a voxel grid; the analytic
mask is the ground truth against which segmentation and calibration are
verified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .volume import CUBOID_SIDE, Cuboid, LabelMask, Volume

ORTHO_TOL = 1e-9


@dataclass
class RigidPose:
    """Rotation + translation (world, millimeters); maps p -> R p + t."""

    rotation: np.ndarray  # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (max |RtR - I| = {err:.3e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        """Transform points of shape (..., 3)."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self o other: apply `other` first."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)


def rotation_from_euler_deg(rx, ry, rz) -> np.ndarray:
    """R = Rz(rz) @ Ry(ry) @ Rx(rx), angles in degrees."""
    ax, ay, az = (math.radians(a) for a in (rx, ry, rz))
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx_m = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry_m = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz_m = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz_m @ ry_m @ rx_m


def rotation_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, degrees."""
    c = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def write_pose(pose: RigidPose, path) -> None:
    """Nine rotation entries row-major, then three translation entries."""
    with open(path, "w") as f:
        for v in pose.rotation.ravel():
            f.write(f"{v:.12f}\n")
        for v in pose.translation:
            f.write(f"{v:.12f}\n")


def read_pose(path) -> RigidPose:
    with open(path) as f:
        vals = [float(line) for line in f if line.strip()]
    if len(vals) != 12:
        raise ValueError(f"{path}: pose file must hold 12 values, got {len(vals)}")
    return RigidPose(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:]))


@dataclass
class PhantomSpec:
    major_radius: float = 3.0       # R_c, mm
    tube_radius: float = 0.6        # r_c, mm
    arc_span_deg: float = 240.0     # occupied arc; gap faces -y in canonical pose
    half_separation: float = 30.0   # c, mm: canal centers at (+/-c, 0, 0)
    canal_intensity: float = 600.0
    background_intensity: float = 0.0
    shell_intensity: float = 1800.0
    shell_thickness: float = 2.0    # bone shell: within this distance of the tube surface
    noise_amplitude: float = 0.0    # additive uniform in [-a, +a]
    dims: tuple = (160, 96, 96)     # (nx, ny, nz)
    spacing: tuple = (0.5, 0.5, 0.5)
    skew: RigidPose = field(default_factory=RigidPose.identity)
    seed: int = 0

    def __post_init__(self):
        if not (self.major_radius > self.tube_radius > 0):
            raise ValueError("need R_c > r_c > 0")
        if not (0 < self.arc_span_deg <= 360):
            raise ValueError("arc span must be in (0, 360] degrees")
        if self.half_separation <= self.major_radius:
            raise ValueError("half-separation c must exceed R_c")


def _spec_grid_origin(spec: PhantomSpec):
    """Grid centered on world origin; voxel centers symmetric about x=0."""
    dims = np.asarray(spec.dims, dtype=np.float64)
    sp = np.asarray(spec.spacing, dtype=np.float64)
    return -(dims - 1) * sp / 2.0


def spec_to_text(spec: PhantomSpec) -> str:
    """Flat key=value serialization (skew as Euler-free raw matrix entries)."""
    lines = [
        f"major_radius={spec.major_radius!r}",
        f"tube_radius={spec.tube_radius!r}",
        f"arc_span_deg={spec.arc_span_deg!r}",
        f"half_separation={spec.half_separation!r}",
        f"canal_intensity={spec.canal_intensity!r}",
        f"background_intensity={spec.background_intensity!r}",
        f"shell_intensity={spec.shell_intensity!r}",
        f"shell_thickness={spec.shell_thickness!r}",
        f"noise_amplitude={spec.noise_amplitude!r}",
        "dims=" + ",".join(str(int(v)) for v in spec.dims),
        "spacing=" + ",".join(repr(float(v)) for v in spec.spacing),
        "skew_rotation=" + ",".join(repr(float(v)) for v in spec.skew.rotation.ravel()),
        "skew_translation=" + ",".join(repr(float(v)) for v in spec.skew.translation),
        f"seed={spec.seed}",
    ]
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> PhantomSpec:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    spec = PhantomSpec()
    floats = [
        "major_radius", "tube_radius", "arc_span_deg", "half_separation",
        "canal_intensity", "background_intensity", "shell_intensity",
        "shell_thickness", "noise_amplitude",
    ]
    kwargs = {k: float(kv[k]) for k in floats if k in kv}
    if "dims" in kv:
        kwargs["dims"] = tuple(int(v) for v in kv["dims"].split(","))
    if "spacing" in kv:
        kwargs["spacing"] = tuple(float(v) for v in kv["spacing"].split(","))
    if "seed" in kv:
        kwargs["seed"] = int(kv["seed"])
    rot = np.eye(3)
    tr = np.zeros(3)
    if "skew_rotation" in kv:
        rot = np.array([float(v) for v in kv["skew_rotation"].split(",")]).reshape(3, 3)
    if "skew_translation" in kv:
        tr = np.array([float(v) for v in kv["skew_translation"].split(",")])
    kwargs["skew"] = RigidPose(rot, tr)
    return replace(spec, **kwargs)


def _arc_distance_sq(q, center_x, r_major, span_deg):
    """Squared distance from points q (..., 3) to the arc centered at (center_x, 0, 0).

    The arc lies in z=0 with radius r_major; its gap (360 - span degrees)
    is centered on the -y direction.
    """
    vx = q[..., 0] - center_x
    vy = q[..., 1]
    vz = q[..., 2]
    rho = np.hypot(vx, vy)
    theta = np.arctan2(vy, vx)
    half_gap = math.radians(360.0 - span_deg) / 2.0
    # Gap occupies theta in (-pi/2 - half_gap, -pi/2 + half_gap).
    off = np.abs(np.mod(theta + math.pi / 2.0, 2.0 * math.pi) - math.pi)
    in_arc = off >= half_gap
    d_arc = (rho - r_major) ** 2 + vz ** 2
    # Endpoint angles of the arc.
    t0 = -math.pi / 2.0 + half_gap
    t1 = -math.pi / 2.0 - half_gap
    d_end = np.full_like(d_arc, np.inf)
    for te in (t0, t1):
        ex = center_x + r_major * math.cos(te)
        ey = r_major * math.sin(te)
        d_end = np.minimum(
            d_end, (q[..., 0] - ex) ** 2 + (q[..., 1] - ey) ** 2 + vz ** 2
        )
    return np.where(in_arc, d_arc, d_end)


def _canal_distance_sq(q, spec: PhantomSpec):
    """Squared distance to the nearest of the two canal arcs."""
    d_left = _arc_distance_sq(q, -spec.half_separation, spec.major_radius, spec.arc_span_deg)
    d_right = _arc_distance_sq(q, +spec.half_separation, spec.major_radius, spec.arc_span_deg)
    return np.minimum(d_left, d_right)


def _counter_noise(seed: int, indices: np.ndarray, amplitude: float) -> np.ndarray:
    """Order-independent uniform noise in [-a, +a] keyed on (seed, voxel index).

    splitmix64-style mix so the value for a voxel depends only on its flat
    index, never on generation order.
    """
    with np.errstate(over="ignore"):
        x = indices.astype(np.uint64) + np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
        x = np.uint64(0x9E3779B97F4A7C15) + x
        z = x
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    u = z.astype(np.float64) / float(2 ** 64)  # [0, 1)
    return (2.0 * u - 1.0) * amplitude


def _arc_sample_points(spec: PhantomSpec, n=720):
    """Dense world-space samples of both skewed arc center-lines."""
    half_gap = math.radians(360.0 - spec.arc_span_deg) / 2.0
    t0 = -math.pi / 2.0 + half_gap
    thetas = t0 + np.linspace(0.0, math.radians(spec.arc_span_deg), n)
    pts = []
    for cx in (-spec.half_separation, spec.half_separation):
        p = np.stack(
            [cx + spec.major_radius * np.cos(thetas),
             spec.major_radius * np.sin(thetas),
             np.zeros_like(thetas)],
            axis=1,
        )
        pts.append(p)
    return spec.skew.apply(np.concatenate(pts, axis=0))


def generate_phantom(spec: PhantomSpec):
    """Render (Volume, LabelMask, RigidPose) for a phantom spec.

    The mask is computed analytically per voxel center and is noise-free;
    the volume adds counter-based uniform noise.  Raises if either skewed
    canal comes within 2*r_c of the volume boundary.
    """
    nx, ny, nz = spec.dims
    sp = np.asarray(spec.spacing, dtype=np.float64)
    origin = _spec_grid_origin(spec)

    # Bounds check: arc center-lines plus tube radius must fit with margin.
    margin = 2.0 * spec.tube_radius
    lo = origin - sp / 2.0
    hi = origin + (np.array([nx, ny, nz]) - 0.5) * sp
    arc_pts = _arc_sample_points(spec)
    reach = spec.tube_radius + margin
    if np.any(arc_pts - reach < lo) or np.any(arc_pts + reach > hi):
        raise ValueError("canals are clipped by the volume bounds (including 2*r_c margin)")

    inv = spec.skew.inverse()
    vol = np.empty((nz, ny, nx), dtype=np.float32)
    mask = np.empty((nz, ny, nx), dtype=np.uint8)
    xs = origin[0] + np.arange(nx) * sp[0]
    ys = origin[1] + np.arange(ny) * sp[1]
    r_in = spec.tube_radius ** 2
    r_shell = (spec.tube_radius + spec.shell_thickness) ** 2
    for iz in range(nz):
        wz = origin[2] + iz * sp[2]
        w = np.empty((ny, nx, 3), dtype=np.float64)
        w[..., 0] = xs[None, :]
        w[..., 1] = ys[:, None]
        w[..., 2] = wz
        q = inv.apply(w)
        d2 = _canal_distance_sq(q, spec)
        fg = d2 <= r_in
        shell = (d2 <= r_shell) & ~fg
        slab = np.full((ny, nx), spec.background_intensity, dtype=np.float64)
        slab[shell] = spec.shell_intensity
        slab[fg] = spec.canal_intensity
        if spec.noise_amplitude > 0:
            flat = (np.arange(ny * nx, dtype=np.uint64) + np.uint64(iz * ny * nx)).reshape(ny, nx)
            slab = slab + _counter_noise(spec.seed, flat, spec.noise_amplitude)
        vol[iz] = slab.astype(np.float32)
        mask[iz] = fg.astype(np.uint8)

    volume = Volume(voxels=vol, spacing=sp, origin=origin)
    label = LabelMask(voxels=mask, spacing=sp, origin=origin)
    return volume, label, spec.skew


def sample_training_pair(vol: Volume, mask: LabelMask, seed: int,
                         max_rotation_deg: float = 5.0,
                         foreground_bias: float = 0.75):
    """Draw one augmented 48^3 training pair (intensity cuboid, label cuboid).

    With probability `foreground_bias` the window is centered on a random
    foreground voxel, guaranteeing foreground presence; otherwise the offset
    is uniform.  A random rotation up to +/-max_rotation_deg per axis is
    applied about the window center: trilinear for intensities, nearest
    neighbor for labels.  Deterministic in `seed`.
    """
    if not mask.same_grid(vol):
        raise ValueError("volume and mask grids must match")
    if mask.foreground_count() == 0:
        raise ValueError("mask has no foreground voxels")
    nx, ny, nz = vol.dims
    if min(nx, ny, nz) < CUBOID_SIDE:
        raise ValueError(f"volume smaller than {CUBOID_SIDE}^3")
    rng = np.random.default_rng(seed)

    if rng.random() < foreground_bias:
        fg = mask.foreground_indices_xyz()
        center = fg[rng.integers(len(fg))]
        offset = np.clip(center - CUBOID_SIDE // 2, 0,
                         np.array([nx, ny, nz]) - CUBOID_SIDE)
    else:
        offset = np.array([rng.integers(n - CUBOID_SIDE + 1) for n in (nx, ny, nz)])
    angles = rng.uniform(-max_rotation_deg, max_rotation_deg, size=3)

    ox, oy, oz = (int(v) for v in offset)
    if np.allclose(angles, 0.0):
        cub = extract_window(vol.voxels, ox, oy, oz)
        lab = extract_window(mask.voxels, ox, oy, oz)
        return Cuboid(cub.astype(np.float32), (ox, oy, oz)), Cuboid(lab, (ox, oy, oz))

    rot = rotation_from_euler_deg(*angles)
    sp = vol.spacing
    half = (CUBOID_SIDE - 1) / 2.0
    li = np.arange(CUBOID_SIDE)
    zz, yy, xx = np.meshgrid(li, li, li, indexing="ij")
    local = np.stack([xx, yy, zz], axis=-1).astype(np.float64) - half  # window-centered
    # Rotate in world space about the window center, then back to index space.
    src = (local * sp) @ rot + half * sp  # inverse rotation of output coords
    src_idx = src / sp + np.array([ox, oy, oz])
    coords = [src_idx[..., 2], src_idx[..., 1], src_idx[..., 0]]  # (z, y, x) order
    cub = map_coordinates(vol.voxels, coords, order=1, mode="nearest")
    lab = map_coordinates(mask.voxels, coords, order=0, mode="nearest")
    return (Cuboid(cub.astype(np.float32), (ox, oy, oz)),
            Cuboid(lab.astype(np.uint8), (ox, oy, oz)))


def extract_window(arr_zyx: np.ndarray, ox: int, oy: int, oz: int) -> np.ndarray:
    return arr_zyx[oz:oz + CUBOID_SIDE, oy:oy + CUBOID_SIDE, ox:ox + CUBOID_SIDE].copy()
