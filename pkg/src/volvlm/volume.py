"""CT volumes: RVOL file format and the resample / window / crop pipeline."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
_HEADER = struct.Struct("<4sHIIIfff")

AIR_HU = -1000


class VolumeFormatError(ValueError):
    """Raised when an RVOL file or a Volume violates the format."""


@dataclass(frozen=True)
class Volume:
    """HU voxel grid indexed ``voxels[x, y, z]`` plus physical spacing in mm."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise VolumeFormatError(f"voxels must be a non-empty 3D array, got shape {v.shape}")
        if len(self.spacing_mm) != 3 or not all(s > 0 for s in self.spacing_mm):
            raise VolumeFormatError(f"spacing must be three positive values, got {self.spacing_mm}")
        if v.dtype != np.int16:
            if v.size and (v.min() < -32768 or v.max() > 32767):
                raise VolumeFormatError("HU values outside the int16 range")
            v = v.astype(np.int16)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.spacing_mm == other.spacing_mm
                and self.voxels.shape == other.voxels.shape
                and np.array_equal(self.voxels, other.voxels))


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing_mm: tuple[float, float, float] = (1.5, 1.5, 3.0)
    hu_window: tuple[float, float] = (-1000.0, 1000.0)
    target_dims: tuple[int, int, int] = (64, 64, 32)
    pad_fill: float = 0.0

    def __post_init__(self):
        lo, hi = self.hu_window
        if not lo < hi:
            raise ValueError(f"hu_window needs lo < hi, got {self.hu_window}")
        if any(s <= 0 for s in self.target_spacing_mm):
            raise ValueError(f"target_spacing_mm must be positive, got {self.target_spacing_mm}")
        if any(int(d) < 1 for d in self.target_dims):
            raise ValueError(f"target_dims must be >= 1, got {self.target_dims}")


PAPER_PREPROCESS = PreprocessConfig(target_dims=(224, 224, 112))


# --------------------------------------------------------------------------
# RVOL io
# --------------------------------------------------------------------------


def write_rvol(v: Volume, path) -> None:
    nx, ny, nz = v.dims
    header = _HEADER.pack(RVOL_MAGIC, RVOL_VERSION, nx, ny, nz, *v.spacing_mm)
    # payload is x-fastest: Fortran order over (x, y, z)
    payload = np.asarray(v.voxels, dtype="<i2").tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_rvol(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != RVOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != RVOL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    for name, n in (("nx", nx), ("ny", ny), ("nz", nz)):
        if n < 1:
            raise VolumeFormatError(f"{path}: non-positive dimension {name}={n}")
    for name, s in (("sx", sx), ("sy", sy), ("sz", sz)):
        if not s > 0:
            raise VolumeFormatError(f"{path}: non-positive spacing {name}={s}")
    need = nx * ny * nz * 2
    payload = raw[_HEADER.size:]
    if len(payload) < need:
        raise VolumeFormatError(
            f"{path}: payload truncated, expected {need} bytes, got {len(payload)}")
    if len(payload) > need:
        raise VolumeFormatError(f"{path}: {len(payload) - need} trailing bytes after payload")
    vox = np.frombuffer(payload, dtype="<i2").reshape((nx, ny, nz), order="F")
    return Volume(np.array(vox, dtype=np.int16), (sx, sy, sz))


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def resampled_dims(dims, spacing, target) -> tuple[int, int, int]:
    # floor(x + 0.5): half-up rounding, not banker's
    return tuple(max(1, int(np.floor(n * s / t + 0.5))) for n, s, t in zip(dims, spacing, target))


def resample_trilinear(v: Volume, target) -> Volume:
    """Trilinear resampling onto a new spacing.

    Output voxel j on each axis samples physical coordinate ``j * target``;
    input voxel i sits at ``i * spacing``. Samples past the last input voxel
    get air.
    """
    target = tuple(float(t) for t in target)
    if any(t <= 0 for t in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    out_dims = resampled_dims(v.dims, v.spacing_mm, target)
    if target == v.spacing_mm:
        return Volume(v.voxels.copy(), target)
    steps = [t / s for t, s in zip(target, v.spacing_mm)]
    out = kernels.resample_trilinear(v.voxels.astype(np.float64), out_dims, steps, float(AIR_HU))
    out = np.clip(np.floor(out + 0.5), -32768, 32767).astype(np.int16)
    return Volume(out, target)


def clip_normalize_hu(voxels, window=(-1000.0, 1000.0), dtype=np.float64) -> np.ndarray:
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got {window}")
    arr = np.asarray(voxels.voxels if isinstance(voxels, Volume) else voxels, dtype=np.float64)
    return ((np.clip(arr, lo, hi) - lo) / (hi - lo)).astype(dtype)


def center_crop_pad(grid: np.ndarray, target_dims, fill: float = 0.0) -> np.ndarray:
    """Crop (low offset ``floor((in - out) / 2)``) or pad (extra voxel high) per axis."""
    grid = np.asarray(grid)
    out = np.full(tuple(int(t) for t in target_dims), fill, dtype=grid.dtype)
    src, dst = [], []
    for n_in, n_out in zip(grid.shape, out.shape):
        if n_in >= n_out:
            lo = (n_in - n_out) // 2
            src.append(slice(lo, lo + n_out))
            dst.append(slice(0, n_out))
        else:
            lo = (n_out - n_in) // 2
            src.append(slice(0, n_in))
            dst.append(slice(lo, lo + n_in))
    out[tuple(dst)] = grid[tuple(src)]
    return out


def preprocess(v: Volume, cfg: PreprocessConfig = PreprocessConfig(), dtype=np.float64) -> np.ndarray:
    """resample -> clip/normalize -> crop/pad; returns a (tx, ty, tz) grid in [0, 1]."""
    r = resample_trilinear(v, cfg.target_spacing_mm)
    g = clip_normalize_hu(r.voxels, cfg.hu_window, dtype=dtype)
    return center_crop_pad(g, cfg.target_dims, cfg.pad_fill)
