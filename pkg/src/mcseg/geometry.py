"""Signed distance transforms and surface-distance primitives.

Conventions used throughout:

* A boundary voxel is a foreground voxel with at least one face-adjacent
  background voxel; foreground voxels on the grid edge also count.
* Signed distances are negative strictly inside, zero on boundary voxels and
  positive strictly outside, measured center-to-center in voxel units unless
  a per-axis ``spacing`` is supplied.
* Degenerate masks (empty or full foreground) map to an all-zero field so
  downstream losses stay finite.

All functions are pure and safe to call from concurrent workers.
"""

from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.special import expit

from mcseg import backend
from mcseg.errors import InvalidInputError, UndefinedSurfaceError

DEFAULT_STEEPNESS = 1500.0

ArrayLike = Union[np.ndarray, "object"]


def _as_label_array(mask: ArrayLike) -> np.ndarray:
    """Accept a raw integer grid or anything carrying one in a .data field."""
    data = getattr(mask, "data", mask)
    arr = np.asarray(data)
    if arr.ndim not in (1, 2, 3):
        raise InvalidInputError(f"expected a 1-D to 3-D grid, got ndim={arr.ndim}")
    return arr


def boundary_mask(foreground: np.ndarray) -> np.ndarray:
    """Boolean map of boundary voxels of a boolean foreground grid."""
    fg = np.asarray(foreground, dtype=bool)
    interior = fg.copy()
    for axis in range(fg.ndim):
        lo = [slice(None)] * fg.ndim
        hi = [slice(None)] * fg.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        shifted_fwd = np.zeros_like(fg)
        shifted_bwd = np.zeros_like(fg)
        shifted_fwd[tuple(lo)] = fg[tuple(hi)]   # neighbor at +1; edge -> background
        shifted_bwd[tuple(hi)] = fg[tuple(lo)]   # neighbor at -1
        interior &= shifted_fwd & shifted_bwd
    return fg & ~interior


def distance_to_set(seed: np.ndarray, spacing: Optional[Sequence[float]] = None) -> np.ndarray:
    """Euclidean distance from every voxel to the nearest True voxel of ``seed``.

    Exact (not chamfer); backend-dispatched between the numba lower-envelope
    scan and scipy's EDT. ``seed`` must contain at least one True voxel.
    """
    seed = np.asarray(seed, dtype=bool)
    if not seed.any():
        raise InvalidInputError("distance_to_set requires a nonempty seed set")
    if spacing is None:
        spacing = (1.0,) * seed.ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != seed.ndim:
        raise InvalidInputError("spacing length must match grid dimensionality")
    if backend.active_backend() == "numba" and backend.HAVE_NUMBA and seed.ndim in (2, 3):
        from mcseg import _kernels

        work = np.empty(seed.shape, dtype=np.float64)
        seed8 = np.ascontiguousarray(seed, dtype=np.uint8)
        if seed.ndim == 2:
            _kernels.edt2d_sq(seed8, spacing[0], spacing[1], work)
        else:
            _kernels.edt3d_sq(seed8, spacing[0], spacing[1], spacing[2], work)
        return np.sqrt(work)
    return ndimage.distance_transform_edt(~seed, sampling=spacing)


def sdf_transform(
    mask: ArrayLike,
    foreground: int = 1,
    spacing: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Signed Euclidean distance to the object boundary for one category.

    Returns a float64 grid: negative inside, zero on the boundary, positive
    outside. Empty or full foreground yields an all-zero field.
    """
    arr = _as_label_array(mask)
    fg = arr == foreground
    if not fg.any() or fg.all():
        return np.zeros(arr.shape, dtype=np.float64)
    surface = boundary_mask(fg)
    dist = distance_to_set(surface, spacing=spacing)
    sdf = np.where(fg, -dist, dist)
    sdf[surface] = 0.0
    return sdf


def sdf_normalize(sdf: np.ndarray) -> np.ndarray:
    """Scale a signed distance field into [-1, 1].

    Negative values are divided by |min|, positive values by max, so both
    extremes land exactly on -1/+1 while zeros stay zero. An all-zero field
    is returned unchanged.
    """
    sdf = np.asarray(sdf, dtype=np.float64)
    out = sdf.copy()
    neg = sdf < 0
    pos = sdf > 0
    if neg.any():
        out[neg] = sdf[neg] / abs(sdf.min())
    if pos.any():
        out[pos] = sdf[pos] / sdf.max()
    return out


def inverse_sdf(sdf_values: np.ndarray, k: float = DEFAULT_STEEPNESS) -> np.ndarray:
    """Smooth inverse of the signed distance transform: 1 / (1 + exp(k*z)).

    Maps negative (inside) distances toward 1 and positive (outside) toward 0,
    matching the foreground-probability convention of the segmentation head.
    Saturates instead of overflowing for large |k*z|.
    """
    if k <= 0:
        raise InvalidInputError(f"steepness k must be positive, got {k}")
    z = np.asarray(sdf_values, dtype=np.float64)
    return expit(-k * z)


class SurfaceDistanceSet(NamedTuple):
    """Directed boundary-to-boundary distances between two masks."""

    a_to_b: np.ndarray
    b_to_a: np.ndarray


def surface_distances(
    a: ArrayLike,
    b: ArrayLike,
    foreground: int = 1,
    spacing: Optional[Sequence[float]] = None,
) -> SurfaceDistanceSet:
    """Distances from each boundary voxel of ``a`` to the boundary of ``b``
    and vice versa. Both masks must have nonempty foreground."""
    arr_a = _as_label_array(a)
    arr_b = _as_label_array(b)
    if arr_a.shape != arr_b.shape:
        raise InvalidInputError(f"shape mismatch: {arr_a.shape} vs {arr_b.shape}")
    fg_a = arr_a == foreground
    fg_b = arr_b == foreground
    if not fg_a.any() or not fg_b.any():
        raise UndefinedSurfaceError("surface distances need nonempty foreground in both masks")
    surf_a = boundary_mask(fg_a)
    surf_b = boundary_mask(fg_b)
    dist_to_b = distance_to_set(surf_b, spacing=spacing)
    dist_to_a = distance_to_set(surf_a, spacing=spacing)
    return SurfaceDistanceSet(a_to_b=dist_to_b[surf_a], b_to_a=dist_to_a[surf_b])
