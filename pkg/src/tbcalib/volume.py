"""Volume / mask data model, coordinate transforms, and MVOL file IO.

Voxel arrays are stored as numpy arrays of shape (nz, ny, nx), C-order,
so the in-memory byte order is x-fastest — the same layout the MVOL
payload uses on disk.  Volumes hold float32 intensities, masks hold
uint8 labels in {0, 1}.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
MVOL_HEADER_SIZE = 48
DTYPE_F32 = 1
DTYPE_U8 = 2

CUBOID_SIDE = 48

# Default display/normalization window, air to dense bone.
DEFAULT_WINDOW = (-1000.0, 3000.0)


class MvolError(Exception):
    """Base class for MVOL decode/encode failures."""


class BadMagicError(MvolError):
    pass


class TruncatedFileError(MvolError):
    pass


class BadDtypeError(MvolError):
    pass


class BadSpacingError(MvolError):
    pass


def _check_geometry(shape_zyx, spacing, origin):
    if len(shape_zyx) != 3:
        raise ValueError(f"voxel array must be 3D, got shape {shape_zyx}")
    if any(n < 1 for n in shape_zyx):
        raise ValueError(f"all dims must be >= 1, got {shape_zyx}")
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if spacing.shape != (3,) or origin.shape != (3,):
        raise ValueError("spacing and origin must be 3-vectors")
    if not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
        raise BadSpacingError(f"spacing must be positive and finite, got {spacing}")
    return spacing, origin


@dataclass
class _Grid3:
    """Shared geometry behaviour for Volume and LabelMask."""

    voxels: np.ndarray  # (nz, ny, nx)
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))  # (sx, sy, sz) mm
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world mm of voxel (0,0,0)

    def __post_init__(self):
        self.spacing, self.origin = _check_geometry(self.voxels.shape, self.spacing, self.origin)
        self.voxels.setflags(write=False)

    @property
    def dims(self):
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    def world(self, index_xyz):
        """World position (mm) of voxel center(s); index order (x, y, z)."""
        idx = np.asarray(index_xyz, dtype=np.float64)
        return self.origin + idx * self.spacing

    def index(self, world_xyz):
        """Continuous voxel index (x, y, z) of world position(s) in mm."""
        w = np.asarray(world_xyz, dtype=np.float64)
        return (w - self.origin) / self.spacing

    def voxel_centers_world(self):
        """World coordinates of every voxel center, shape (nz, ny, nx, 3)."""
        nz, ny, nx = self.voxels.shape
        zi, yi, xi = np.meshgrid(
            np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij"
        )
        idx = np.stack([xi, yi, zi], axis=-1).astype(np.float64)
        return self.origin + idx * self.spacing

    def same_grid(self, other) -> bool:
        return (
            self.voxels.shape == other.voxels.shape
            and np.array_equal(self.spacing, other.spacing)
            and np.array_equal(self.origin, other.origin)
        )


@dataclass
class Volume(_Grid3):
    """Scalar CT volume; float32 intensities on an anisotropic grid."""

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        super().__post_init__()


@dataclass
class LabelMask(_Grid3):
    """Binary voxel mask congruent to a Volume; 1 = canal foreground."""

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.uint8)
        super().__post_init__()
        bad = np.setdiff1d(np.unique(self.voxels), [0, 1])
        if bad.size:
            raise ValueError(f"mask labels must be 0/1, found {bad}")

    def foreground_count(self) -> int:
        return int(self.voxels.sum())

    def foreground_indices_xyz(self) -> np.ndarray:
        """Integer (x, y, z) indices of foreground voxels, shape (n, 3)."""
        zz, yy, xx = np.nonzero(self.voxels)
        return np.stack([xx, yy, zz], axis=1)

    def foreground_world(self) -> np.ndarray:
        """World coordinates (mm) of foreground voxel centers, shape (n, 3)."""
        return self.world(self.foreground_indices_xyz())


@dataclass
class Cuboid:
    """A 48^3 sub-volume plus its index offset (x, y, z) into the parent."""

    values: np.ndarray  # (48, 48, 48) as (z, y, x)
    offset: tuple  # (ox, oy, oz)

    def __post_init__(self):
        if self.values.shape != (CUBOID_SIDE,) * 3:
            raise ValueError(f"cuboid must be {CUBOID_SIDE}^3, got {self.values.shape}")
        self.offset = tuple(int(v) for v in self.offset)


def extract_cuboid(vol, offset_xyz) -> Cuboid:
    """Copy a 48^3 window starting at integer offset (x, y, z)."""
    ox, oy, oz = (int(v) for v in offset_xyz)
    nx, ny, nz = vol.dims
    if ox < 0 or oy < 0 or oz < 0 or ox + CUBOID_SIDE > nx or oy + CUBOID_SIDE > ny or oz + CUBOID_SIDE > nz:
        raise IndexError(
            f"cuboid offset {(ox, oy, oz)} + {CUBOID_SIDE} exceeds dims {(nx, ny, nz)}"
        )
    win = vol.voxels[oz:oz + CUBOID_SIDE, oy:oy + CUBOID_SIDE, ox:ox + CUBOID_SIDE]
    return Cuboid(values=win.copy(), offset=(ox, oy, oz))


def normalize_intensity(vol: Volume, window=DEFAULT_WINDOW) -> Volume:
    """Clamp to [lo, hi] then map affinely to [0, 1]."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got ({lo}, {hi})")
    v = np.clip(vol.voxels, lo, hi)
    v = (v - lo) / (hi - lo)
    return Volume(voxels=v.astype(np.float32), spacing=vol.spacing.copy(), origin=vol.origin.copy())


# ---------------------------------------------------------------------------
# MVOL format
#
# little-endian, 48-byte header:
#   0-3   magic "MVOL"
#   4     version = 1
#   5     dtype: 1 = f32 (Volume), 2 = u8 (LabelMask)
#   6-7   reserved (zero)
#   8-19  dims nx, ny, nz as u32
#   20-31 spacing sx, sy, sz as f32 (mm)
#   32-43 origin as f32 (mm)
#   44-47 reserved (zero)
# payload: nx*ny*nz values, x-fastest.
# ---------------------------------------------------------------------------

_HEADER_FMT = "<4sBBH3I3f3fI"


def write_mvol(obj, path) -> None:
    """Serialize a Volume or LabelMask to an MVOL file."""
    if isinstance(obj, Volume):
        dtype_code = DTYPE_F32
    elif isinstance(obj, LabelMask):
        dtype_code = DTYPE_U8
    else:
        raise TypeError(f"cannot write object of type {type(obj).__name__}")
    nx, ny, nz = obj.dims
    header = struct.pack(
        _HEADER_FMT,
        MVOL_MAGIC,
        MVOL_VERSION,
        dtype_code,
        0,
        nx, ny, nz,
        *np.asarray(obj.spacing, dtype=np.float32),
        *np.asarray(obj.origin, dtype=np.float32),
        0,
    )
    assert len(header) == MVOL_HEADER_SIZE
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(obj.voxels).tobytes())


def read_mvol(path):
    """Decode an MVOL file; returns Volume or LabelMask per the dtype code."""
    with open(path, "rb") as f:
        header = f.read(MVOL_HEADER_SIZE)
        if len(header) < MVOL_HEADER_SIZE:
            raise TruncatedFileError(f"{path}: header truncated ({len(header)} bytes)")
        magic, version, dtype_code, _r0, nx, ny, nz, sx, sy, sz, ox, oy, oz, _r1 = struct.unpack(
            _HEADER_FMT, header
        )
        if magic != MVOL_MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        if version != MVOL_VERSION:
            raise MvolError(f"{path}: unsupported version {version}")
        if dtype_code == DTYPE_F32:
            np_dtype, cls, itemsize = np.float32, Volume, 4
        elif dtype_code == DTYPE_U8:
            np_dtype, cls, itemsize = np.uint8, LabelMask, 1
        else:
            raise BadDtypeError(f"{path}: unknown dtype code {dtype_code}")
        if sx <= 0 or sy <= 0 or sz <= 0:
            raise BadSpacingError(f"{path}: non-positive spacing ({sx}, {sy}, {sz})")
        n = int(nx) * int(ny) * int(nz)
        payload = f.read(n * itemsize)
        if len(payload) < n * itemsize:
            raise TruncatedFileError(
                f"{path}: payload truncated ({len(payload)} of {n * itemsize} bytes)"
            )
    voxels = np.frombuffer(payload, dtype="<" + np.dtype(np_dtype).str[1:]).reshape(nz, ny, nx)
    return cls(voxels=voxels.copy(), spacing=(sx, sy, sz), origin=(ox, oy, oz))


# ---------------------------------------------------------------------------
# Raw-stack import: a directory of equally sized 2D raw slices plus a
# sidecar text file ("stack.txt", key=value) giving dims/spacing.
# Slices are assembled in filename-sorted order, one slice per file.
# ---------------------------------------------------------------------------

def read_raw_stack(directory, sidecar="stack.txt") -> Volume:
    meta = {}
    with open(os.path.join(directory, sidecar)) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    nx, ny, nz = int(meta["nx"]), int(meta["ny"]), int(meta["nz"])
    spacing = (float(meta["sx"]), float(meta["sy"]), float(meta["sz"]))
    origin = tuple(float(meta.get(k, 0.0)) for k in ("ox", "oy", "oz"))
    names = sorted(
        f for f in os.listdir(directory)
        if re.search(r"\.raw$", f)
    )
    if len(names) != nz:
        raise ValueError(f"expected {nz} .raw slices in {directory}, found {len(names)}")
    slices = []
    for name in names:
        data = np.fromfile(os.path.join(directory, name), dtype="<f4")
        if data.size != nx * ny:
            raise ValueError(f"{name}: expected {nx * ny} values, got {data.size}")
        slices.append(data.reshape(ny, nx))
    return Volume(voxels=np.stack(slices, axis=0), spacing=spacing, origin=origin)
