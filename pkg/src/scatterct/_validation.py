"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .forward import MaterialMap, SinogramSet
from .geometry import Grid2D, ScanGeometry


def check_geometry(geometry) -> ScanGeometry:
    if not isinstance(geometry, ScanGeometry):
        raise TypeError(f"geometry must be a ScanGeometry, got {type(geometry).__name__}")
    return geometry


def check_material(X, grid: Grid2D) -> MaterialMap:
    """Accept a MaterialMap or an array of shape ``(2, n_pixels)`` holding
    density and photoelectric rows."""
    if isinstance(X, MaterialMap):
        if X.grid != grid:
            raise ValueError("material map grid differs from the estimator geometry")
        return X
    arr = np.asarray(X, dtype=float)
    if arr.shape != (2, grid.n_pixels):
        raise ValueError(f"expected a MaterialMap or an array of shape (2, {grid.n_pixels}), got {arr.shape}")
    return MaterialMap(grid, arr[0], arr[1])


def check_sinograms(X, geometry: ScanGeometry) -> SinogramSet:
    if not isinstance(X, SinogramSet):
        raise TypeError(f"expected a SinogramSet, got {type(X).__name__}")
    if X.geometry_hash and X.geometry_hash != geometry.hash():
        raise ValueError("sinograms were produced by a different geometry")
    if X.g_A.size != geometry.n_atten_rows or X.g_C.size != geometry.n_scatter_rows:
        raise ValueError("sinogram lengths do not match the geometry")
    if not (np.all(np.isfinite(X.g_A)) and np.all(np.isfinite(X.g_C))):
        raise ValueError("sinograms contain non-finite values")
    return X
