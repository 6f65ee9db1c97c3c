"""Pixel grid, ray tracing, raypath bookkeeping and detector geometry."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .physics import EnergyBinning, Spectrum, default_spectrum

# chords shorter than this (cm) are treated as edge touches and dropped
MIN_CHORD_CM = 1e-12


@dataclass(frozen=True)
class Grid2D:
    """Square ``n x n`` pixelization of the imaging plane.

    Pixel ``j = row * n + col`` where ``row`` counts upward from ``origin``
    along y and ``col`` counts rightward along x.
    """

    n: int
    extent_cm: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"grid size must be a positive integer, got {self.n!r}")
        if not self.extent_cm > 0:
            raise ValueError(f"grid extent must be positive, got {self.extent_cm!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def pixel_size(self) -> float:
        return self.extent_cm / self.n

    @property
    def n_pixels(self) -> int:
        return self.n * self.n

    def index(self, row, col):
        return np.asarray(row) * self.n + np.asarray(col)

    def row_col(self, j):
        return np.divmod(np.asarray(j), self.n)

    def pixel_centers(self) -> np.ndarray:
        """(n_pixels, 2) array of pixel-center coordinates in index order."""
        c = (np.arange(self.n) + 0.5) * self.pixel_size
        yy, xx = np.meshgrid(c + self.origin[1], c + self.origin[0], indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(pts)
        x0, y0 = self.origin
        e = self.extent_cm
        return (
            (pts[:, 0] >= x0 - tol)
            & (pts[:, 0] <= x0 + e + tol)
            & (pts[:, 1] >= y0 - tol)
            & (pts[:, 1] <= y0 + e + tol)
        )

    def with_size(self, n: int) -> "Grid2D":
        """Same physical square, different pixel count."""
        return Grid2D(n, self.extent_cm, self.origin)

    def to_dict(self) -> dict:
        return {"n": self.n, "extent_cm": self.extent_cm, "origin": list(self.origin)}


@dataclass(frozen=True)
class Detector:
    center: tuple[float, float]
    width_cm: float
    height_cm: float
    normal: tuple[float, float]

    def __post_init__(self):
        if not (self.width_cm > 0 and self.height_cm > 0):
            raise ValueError("detector width and height must be positive")
        nrm = np.asarray(self.normal, dtype=float)
        norm = np.hypot(*nrm)
        if norm == 0:
            raise ValueError("detector normal must be nonzero")
        object.__setattr__(self, "normal", (float(nrm[0] / norm), float(nrm[1] / norm)))
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "width_cm": self.width_cm,
            "height_cm": self.height_cm,
            "normal": list(self.normal),
        }


@dataclass(frozen=True)
class Source:
    position: tuple[float, float]
    spectrum_id: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))

    def to_dict(self) -> dict:
        return {"position": list(self.position), "spectrum_id": self.spectrum_id}


@dataclass(frozen=True)
class RaySegment:
    pixel: int
    length_cm: float
    midpoint: tuple[float, float]
    pixel_center: tuple[float, float]


class RayTrace(NamedTuple):
    """Flat, ray-major table of chord segments for a batch of rays."""

    ray: np.ndarray
    pixel: np.ndarray
    length: np.ndarray
    midpoint: np.ndarray  # (n_seg, 2)

    def ray_lengths(self, n_rays: int) -> np.ndarray:
        return np.bincount(self.ray, weights=self.length, minlength=n_rays)


def trace_rays(grid: Grid2D, p_from, p_to, chunk: int = 1 << 21) -> RayTrace:
    """Trace a batch of straight rays through ``grid``.

    Parametric (Siddon-style) traversal: every crossing with a vertical or
    horizontal grid line is collected per ray, the crossings are sorted, and
    each consecutive pair delimits one chord.  Segments come back ordered by
    ray and, within a ray, from ``p_from`` toward ``p_to``.
    """
    p0 = np.atleast_2d(np.asarray(p_from, dtype=float))
    p1 = np.atleast_2d(np.asarray(p_to, dtype=float))
    p0, p1 = np.broadcast_arrays(p0, p1)
    n_rays = p0.shape[0]
    per_chunk = max(1, chunk // (2 * grid.n + 4))
    if n_rays <= per_chunk:
        return _trace_block(grid, p0, p1)
    parts = []
    for start in range(0, n_rays, per_chunk):
        tr = _trace_block(grid, p0[start:start + per_chunk], p1[start:start + per_chunk])
        parts.append(tr._replace(ray=tr.ray + start))
    return RayTrace(*(np.concatenate(cols) for cols in zip(*parts)))


def _trace_block(grid: Grid2D, p0: np.ndarray, p1: np.ndarray) -> RayTrace:
    n_rays = p0.shape[0]
    d = p1 - p0
    total = np.hypot(d[:, 0], d[:, 1])
    if np.any(total == 0):
        raise ValueError("ray endpoints must differ")

    n = grid.n
    delta = grid.pixel_size
    planes = np.arange(n + 1) * delta
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ax = (planes[None, :] + grid.origin[0] - p0[:, :1]) / d[:, :1]
        ay = (planes[None, :] + grid.origin[1] - p0[:, 1:]) / d[:, 1:]
    alphas = np.concatenate([np.zeros((n_rays, 1)), np.ones((n_rays, 1)), ax, ay], axis=1)
    alphas[~np.isfinite(alphas) | (alphas < 0.0) | (alphas > 1.0)] = np.nan
    alphas.sort(axis=1)  # NaNs sort last

    a_lo = alphas[:, :-1]
    a_hi = alphas[:, 1:]
    seg_len = (a_hi - a_lo) * total[:, None]
    a_mid = 0.5 * (a_lo + a_hi)
    mx = p0[:, :1] + a_mid * d[:, :1]
    my = p0[:, 1:] + a_mid * d[:, 1:]

    x0, y0 = grid.origin
    e = grid.extent_cm
    inside = (mx > x0) & (mx < x0 + e) & (my > y0) & (my < y0 + e)
    keep = np.isfinite(seg_len) & (seg_len >= MIN_CHORD_CM) & inside

    ray_idx = np.broadcast_to(np.arange(n_rays)[:, None], keep.shape)[keep]
    mx = mx[keep]
    my = my[keep]
    col = np.minimum(((mx - x0) / delta).astype(np.int64), n - 1)
    row = np.minimum(((my - y0) / delta).astype(np.int64), n - 1)
    return RayTrace(
        ray=ray_idx.astype(np.int64),
        pixel=row * n + col,
        length=seg_len[keep],
        midpoint=np.column_stack([mx, my]),
    )


def trace_ray(grid: Grid2D, p_from, p_to) -> list[RaySegment]:
    """Chord segments of a single ray, ordered from ``p_from`` to ``p_to``.

    A ray that misses the grid yields an empty list.
    """
    tr = trace_rays(grid, p_from, p_to)
    centers = grid.pixel_centers()
    return [
        RaySegment(int(j), float(ln), (float(m[0]), float(m[1])), tuple(centers[j]))
        for j, ln, m in zip(tr.pixel, tr.length, tr.midpoint)
    ]


def clipped_length(grid: Grid2D, p_from, p_to) -> float:
    """Length of the part of segment ``p_from -> p_to`` inside the grid square
    (Liang-Barsky clipping, independent of :func:`trace_rays`)."""
    p0 = np.asarray(p_from, dtype=float)
    d = np.asarray(p_to, dtype=float) - p0
    lo, hi = 0.0, 1.0
    bounds = [
        (grid.origin[0], grid.origin[0] + grid.extent_cm),
        (grid.origin[1], grid.origin[1] + grid.extent_cm),
    ]
    for k, (bmin, bmax) in enumerate(bounds):
        if d[k] == 0:
            if not bmin <= p0[k] <= bmax:
                return 0.0
            continue
        t1 = (bmin - p0[k]) / d[k]
        t2 = (bmax - p0[k]) / d[k]
        lo = max(lo, min(t1, t2))
        hi = min(hi, max(t1, t2))
    return max(hi - lo, 0.0) * float(np.hypot(*d))


def scattering_angle(r, r_d, r_dp):
    """Angle between the directions from ``r`` toward ``r_d`` and ``r_dp``.

    Broadcasts over leading dimensions of (..., 2) point arrays.
    """
    r = np.asarray(r, dtype=float)
    u = r - np.asarray(r_d, dtype=float)
    v = r - np.asarray(r_dp, dtype=float)
    nu = np.hypot(u[..., 0], u[..., 1])
    nv = np.hypot(v[..., 0], v[..., 1])
    if np.any(nu == 0) or np.any(nv == 0):
        raise ValueError("scattering point coincides with a detector")
    c = (u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1]) / (nu * nv)
    theta = np.arccos(np.clip(c, -1.0, 1.0))
    return float(theta) if theta.ndim == 0 else theta


def solid_angle(r, det: Detector):
    """Solid angle (sr) subtended by a rectangular detector seen from ``r``.

    ``Omega = 4 asin(sin(alpha) sin(beta))`` with ``alpha = atan(w / 2d)``
    and ``beta = atan(h cos(theta) / 2d)``, ``theta`` being the in-plane angle
    between the line of sight and the detector normal.  Points behind the
    detector face see nothing.
    """
    r = np.asarray(r, dtype=float)
    v = r - np.asarray(det.center)
    d = np.hypot(v[..., 0], v[..., 1])
    if np.any(d == 0):
        raise ValueError("point lies at the detector center")
    cos_t = np.clip((v[..., 0] * det.normal[0] + v[..., 1] * det.normal[1]) / d, 0.0, 1.0)
    alpha = np.arctan(det.width_cm / (2.0 * d))
    beta = np.arctan(det.height_cm * cos_t / (2.0 * d))
    omega = 4.0 * np.arcsin(np.sin(alpha) * np.sin(beta))
    return float(omega) if omega.ndim == 0 else omega


@dataclass(frozen=True)
class ScanGeometry:
    grid: Grid2D
    sources: tuple[Source, ...]
    detectors: tuple[Detector, ...]
    atten_bins: EnergyBinning
    scatter_bins: EnergyBinning
    spectra: dict[str, Spectrum] = field(default_factory=lambda: {"default": default_spectrum()})

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "detectors", tuple(self.detectors))
        if not self.sources:
            raise ValueError("at least one source is required")
        if len(self.detectors) < 2:
            raise ValueError("at least two detectors are required")
        for s in self.sources:
            if s.spectrum_id not in self.spectra:
                raise ValueError(f"unknown spectrum id {s.spectrum_id!r}")
            x, y = s.position
            x0, y0 = self.grid.origin
            e = self.grid.extent_cm
            if x0 < x < x0 + e and y0 < y < y0 + e:
                raise ValueError(f"source at {s.position} lies inside the imaging grid")

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    @property
    def n_primary(self) -> int:
        return self.n_sources * self.n_detectors

    @property
    def n_secondary(self) -> int:
        return self.n_primary * (self.n_detectors - 1)

    @property
    def n_atten_rows(self) -> int:
        return self.n_primary * self.atten_bins.n

    @property
    def n_scatter_rows(self) -> int:
        return self.n_secondary * self.scatter_bins.n

    def with_grid(self, grid: Grid2D) -> "ScanGeometry":
        return ScanGeometry(grid, self.sources, self.detectors, self.atten_bins, self.scatter_bins, self.spectra)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "sources": [s.to_dict() for s in self.sources],
            "detectors": [d.to_dict() for d in self.detectors],
            "atten_bins": self.atten_bins.to_dict(),
            "scatter_bins": self.scatter_bins.to_dict(),
            "spectra": {k: v.to_dict() for k, v in sorted(self.spectra.items())},
        }

    def hash(self) -> str:
        """Stable content hash of everything that shapes the measurements."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class RaypathTable:
    source: np.ndarray  # (n_primary,)
    detector: np.ndarray  # (n_primary,)
    trace: RayTrace
    secondary: np.ndarray  # (n_primary, n_detectors - 1) detector indices

    @property
    def n_primary(self) -> int:
        return self.source.size

    @property
    def n_secondary(self) -> int:
        return self.secondary.size


def enumerate_raypaths(geom: ScanGeometry) -> RaypathTable:
    """Primary raypaths ``i = s * N_D + d`` and their secondary detectors.

    Each primary raypath gets every detector except its own primary detector,
    in ascending detector order.
    """
    n_s, n_d = geom.n_sources, geom.n_detectors
    src = np.repeat(np.arange(n_s), n_d)
    det = np.tile(np.arange(n_d), n_s)
    p_from = np.array([geom.sources[s].position for s in src])
    p_to = np.array([geom.detectors[d].center for d in det])
    trace = trace_rays(geom.grid, p_from, p_to)
    all_d = np.arange(n_d)
    secondary = np.array([np.delete(all_d, d) for d in det]).reshape(n_s * n_d, n_d - 1)
    return RaypathTable(src, det, trace, secondary)


def perimeter_detectors(grid: Grid2D, n_detectors: int, width_cm: float = 0.1, height_cm: float = 0.1) -> list[Detector]:
    """Detectors equally spaced along the top then right edge of the grid.

    Arc-length positions ``(k + 1) * 2L / (N + 1)`` exclude both far ends of
    the two-edge path; a detector landing exactly on the top-right corner
    faces the grid diagonally.
    """
    x0, y0 = grid.origin
    e = grid.extent_cm
    dets = []
    for k in range(n_detectors):
        s = (k + 1) * 2.0 * e / (n_detectors + 1)
        if np.isclose(s, e):
            center, normal = (x0 + e, y0 + e), (-1.0, -1.0)
        elif s < e:
            center, normal = (x0 + s, y0 + e), (0.0, -1.0)
        else:
            center, normal = (x0 + e, y0 + 2.0 * e - s), (-1.0, 0.0)
        dets.append(Detector(center, width_cm, height_cm, normal))
    return dets


def paper_sources(grid: Grid2D) -> list[Source]:
    """Left-edge midpoint, bottom-edge midpoint and bottom-left corner."""
    x0, y0 = grid.origin
    e = grid.extent_cm
    return [Source((x0, y0 + e / 2)), Source((x0 + e / 2, y0)), Source((x0, y0))]


def default_geometry(n: int = 50, n_detectors: int = 41, extent_cm: float = 20.0, atten_bin_kev: float = 1.0,
                     scatter_bin_kev: float = 5.0, spectrum: Spectrum | None = None) -> ScanGeometry:
    """The limited-view layout used throughout: 3 sources, detectors on top/right.

    Detector bins tile 20-120 keV; ``spectrum`` defaults to the Kramers
    shape sampled at 1 keV.
    """
    grid = Grid2D(n, extent_cm)
    return ScanGeometry(
        grid=grid,
        sources=paper_sources(grid),
        detectors=perimeter_detectors(grid, n_detectors),
        atten_bins=EnergyBinning.from_range(20.0, 120.0, atten_bin_kev),
        scatter_bins=EnergyBinning.from_range(20.0, 120.0, scatter_bin_kev),
        spectra={"default": spectrum if spectrum is not None else default_spectrum()},
    )
