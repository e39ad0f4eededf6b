"""In-memory 3D volume and binary mask types plus grid resampling.

Arrays are kept in z-major order (nz, ny, nx) with spacing (dz, dy, dx) in mm.
Instances are frozen and their arrays are marked read-only, so they are safe
to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _check_grid(data: np.ndarray, spacing: tuple) -> None:
    if data.ndim != 3:
        raise ValueError(f"expected a 3D grid, got {data.ndim} dimensions")
    if any(n < 1 for n in data.shape):
        raise ValueError(f"all dims must be >= 1, got {data.shape}")
    if len(spacing) != 3 or any(not (s > 0) for s in spacing):
        raise ValueError(f"spacing components must be > 0, got {spacing}")


@dataclass(frozen=True)
class Volume:
    """A scalar intensity grid in Hounsfield units."""

    data: np.ndarray
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        _check_grid(data, self.spacing)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Mask:
    """A binary grid aligned with a Volume. Values are exactly 0 or 1."""

    data: np.ndarray
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_grid(data, self.spacing)
        if not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must all be 0 or 1")
        data = data.astype(np.uint8)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        """Number of foreground voxels."""
        return int(self.data.sum())


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # Voxel centers of input and output grids span the same physical extent:
    # output center i maps to input coordinate (i + 0.5) * n_in/n_out - 0.5.
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _rescaled_spacing(spacing, dims_in, dims_out) -> tuple[float, float, float]:
    return tuple(s * n_in / n_out for s, n_in, n_out in zip(spacing, dims_in, dims_out))


def resample(v: Volume | Mask, target_dims: tuple[int, int, int]) -> Volume | Mask:
    """Resample to `target_dims`: trilinear for volumes, nearest-neighbor for masks.

    Edge coordinates clamp to the input grid; spacing is rescaled so the
    physical extent is preserved.
    """
    if len(target_dims) != 3 or any(n < 1 for n in target_dims):
        raise ValueError(f"target dims must be >= 1 on every axis, got {target_dims}")
    coords = [_source_coords(m, n) for m, n in zip(target_dims, v.dims)]
    spacing = _rescaled_spacing(v.spacing, v.dims, target_dims)

    if isinstance(v, Mask):
        # Nearest neighbor; ties at .5 round toward +inf.
        idx = [np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1) for c, n in zip(coords, v.dims)]
        out = v.data[np.ix_(idx[0], idx[1], idx[2])]
        return Mask(out, spacing)

    lo = [np.clip(np.floor(c).astype(np.intp), 0, n - 1) for c, n in zip(coords, v.dims)]
    hi = [np.clip(l + 1, 0, n - 1) for l, n in zip(lo, v.dims)]
    frac = [np.clip(c - l, 0.0, 1.0) for c, l in zip(coords, lo)]

    def gather(iz, iy, ix):
        return v.data[np.ix_(iz, iy, ix)]

    fz = frac[0][:, None, None]
    fy = frac[1][None, :, None]
    fx = frac[2][None, None, :]
    out = (
        gather(lo[0], lo[1], lo[2]) * (1 - fz) * (1 - fy) * (1 - fx)
        + gather(lo[0], lo[1], hi[2]) * (1 - fz) * (1 - fy) * fx
        + gather(lo[0], hi[1], lo[2]) * (1 - fz) * fy * (1 - fx)
        + gather(lo[0], hi[1], hi[2]) * (1 - fz) * fy * fx
        + gather(hi[0], lo[1], lo[2]) * fz * (1 - fy) * (1 - fx)
        + gather(hi[0], lo[1], hi[2]) * fz * (1 - fy) * fx
        + gather(hi[0], hi[1], lo[2]) * fz * fy * (1 - fx)
        + gather(hi[0], hi[1], hi[2]) * fz * fy * fx
    )
    return Volume(out, spacing)
