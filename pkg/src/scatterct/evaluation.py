"""Phantoms, relative error, and per-material uncertainty ellipses."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .forward import MaterialMap
from .geometry import Grid2D

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Material:
    name: str
    rho: float  # g/cm^3
    p: float  # cm^-1 at the reference energy


MATERIALS = {
    "water": Material("water", 1.0, 0.5439),
    "delrin": Material("delrin", 1.4, 0.4134),
    "graphite": Material("graphite", 2.23, 0.2177),
    "plexiglass": Material("plexiglass", 1.18, 0.3263),
}

# disk phantom on the 20 cm field: (material, center_x, center_y, radius), cm
PHANTOM2_DISKS = (
    ("water", 6.0, 13.0, 3.0),
    ("delrin", 14.0, 13.5, 2.5),
    ("graphite", 11.0, 5.5, 3.0),
)


@dataclass
class Region:
    name: str
    mask: np.ndarray  # (n, n) bool, row 0 at the bottom
    material: Material


@dataclass
class Phantom:
    """Disjoint material regions in vacuum."""

    grid: Grid2D
    regions: list[Region]

    def __post_init__(self):
        n = self.grid.n
        taken = np.zeros((n, n), dtype=bool)
        for r in self.regions:
            if r.mask.shape != (n, n):
                raise ValueError(f"region {r.name!r} mask has shape {r.mask.shape}, expected {(n, n)}")
            if np.any(taken & r.mask):
                raise ValueError(f"region {r.name!r} overlaps another region")
            taken |= r.mask

    @property
    def material_map(self) -> MaterialMap:
        rho = np.zeros((self.grid.n, self.grid.n))
        p = np.zeros_like(rho)
        for r in self.regions:
            rho[r.mask] = r.material.rho
            p[r.mask] = r.material.p
        return MaterialMap(self.grid, rho.ravel(), p.ravel())


def _material(spec) -> Material:
    if isinstance(spec, Material):
        return spec
    if isinstance(spec, str):
        try:
            return MATERIALS[spec.lower()]
        except KeyError:
            raise ValueError(f"unknown material {spec!r}; known: {sorted(MATERIALS)}") from None
    return Material(str(spec.get("name", "custom")), float(spec["rho"]), float(spec["p"]))


def disk_mask(grid: Grid2D, center, radius: float) -> np.ndarray:
    """Pixels whose centers lie inside the closed disk."""
    c = grid.pixel_centers()
    inside = (c[:, 0] - center[0]) ** 2 + (c[:, 1] - center[1]) ** 2 <= radius**2
    return inside.reshape(grid.n, grid.n)


def load_mask(path=None) -> np.ndarray:
    """Read a text raster of 0/1 characters, first line = top row; returned
    with row 0 at the bottom."""
    if path is None:
        text = resources.files("scatterct").joinpath("data/elephant_50.txt").read_text()
    else:
        text = Path(path).read_text()
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    m = np.array([[ch == "1" for ch in row] for row in rows], dtype=bool)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("mask raster must be square")
    return m[::-1]


def resample_mask(mask: np.ndarray, n: int) -> np.ndarray:
    """Nearest-neighbour resampling of a square mask to ``n x n``."""
    src = np.floor((np.arange(n) + 0.5) * mask.shape[0] / n).astype(int)
    return mask[np.ix_(src, src)]


def make_phantom(spec, grid: Grid2D) -> Phantom:
    """Build a phantom on ``grid``.

    Parameters
    ----------
    spec : str or dict
        ``"phantom1"`` (plexiglass elephant silhouette), ``"phantom2"``
        (water, Delrin and graphite disks), or a dict with a ``regions``
        list.  Each region has a ``material`` (name or ``{name, rho, p}``)
        and either ``{"shape": "disk", "center": [x, y], "radius": r}`` in
        cm or ``{"shape": "mask", "path": ...}``.
    grid : Grid2D

    Returns
    -------
    Phantom
    """
    if isinstance(spec, str):
        name = spec.lower()
        if name == "phantom1":
            return Phantom(grid, [Region("plexiglass", resample_mask(load_mask(), grid.n), MATERIALS["plexiglass"])])
        if name == "phantom2":
            return Phantom(grid, [Region(m, disk_mask(grid, (x, y), r), MATERIALS[m]) for m, x, y, r in PHANTOM2_DISKS])
        raise ValueError(f"unknown phantom {spec!r}")
    regions = []
    for k, reg in enumerate(spec.get("regions", [])):
        mat = _material(reg["material"])
        shape = reg.get("shape", "disk")
        if shape == "disk":
            mask = disk_mask(grid, reg["center"], float(reg["radius"]))
        elif shape == "mask":
            mask = resample_mask(load_mask(reg.get("path")), grid.n)
        else:
            raise ValueError(f"region {k}: unknown shape {shape!r}")
        regions.append(Region(reg.get("name", mat.name), mask, mat))
    return Phantom(grid, regions)


def rmse(estimate, truth) -> float:
    """Relative squared error ``||est - truth||^2 / ||truth||^2``."""
    est = np.asarray(estimate, dtype=float).ravel()
    tru = np.asarray(truth, dtype=float).ravel()
    if est.shape != tru.shape:
        raise ValueError(f"length mismatch: {est.size} vs {tru.size}")
    denom = float(np.dot(tru, tru))
    if denom == 0.0:
        raise ValueError("truth has zero norm")
    d = est - tru
    return float(np.dot(d, d)) / denom


@dataclass
class EllipseRow:
    material: str
    mean_rho: float
    std_rho: float
    mean_p: float
    std_p: float
    true_rho: float
    true_p: float
    n_pixels: int


@dataclass
class EllipseReport:
    rows: list[EllipseRow]

    COLUMNS = ("material", "mean_rho", "std_rho", "mean_p", "std_p", "true_rho", "true_p")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.material] + [f"{getattr(r, c):.10g}" for c in self.COLUMNS[1:]])

    def to_svg(self, path, rho_range=(0.0, 2.4), p_range=(0.0, 0.6)):
        Path(path).write_text(ellipse_svg(self, rho_range, p_range))

    def contains_truth(self, k: float = 1.5) -> dict[str, bool]:
        """Per material: truth within ``k`` standard deviations of the mean
        in both coordinates (up to rounding when the spread is zero)."""
        out = {}
        for r in self.rows:
            ok_r = abs(r.mean_rho - r.true_rho) <= k * r.std_rho + 1e-12 * abs(r.true_rho)
            ok_p = abs(r.mean_p - r.true_p) <= k * r.std_p + 1e-12 * abs(r.true_p)
            out[r.material] = bool(ok_r and ok_p)
        return out


def material_ellipses(rho_hat, p_hat, phantom: Phantom, csv_path=None, svg_path=None) -> EllipseReport:
    """Mean and spread of the estimates over each region's mask eroded by
    one pixel (4-neighbourhood)."""
    n = phantom.grid.n
    rho = np.asarray(rho_hat, dtype=float).reshape(n, n)
    p = np.asarray(p_hat, dtype=float).reshape(n, n)
    rows = []
    for reg in phantom.regions:
        core = ndimage.binary_erosion(reg.mask)
        if not core.any():
            warnings.warn(f"region {reg.name!r} vanishes after erosion; skipped", RuntimeWarning, stacklevel=2)
            continue
        rows.append(EllipseRow(
            reg.name, float(rho[core].mean()), float(rho[core].std()), float(p[core].mean()),
            float(p[core].std()), reg.material.rho, reg.material.p, int(core.sum()),
        ))
    rep = EllipseReport(rows)
    if csv_path is not None:
        rep.to_csv(csv_path)
    if svg_path is not None:
        rep.to_svg(svg_path)
    return rep


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def ellipse_svg(report: EllipseReport, rho_range=(0.0, 2.4), p_range=(0.0, 0.6), size=(480, 360)) -> str:
    """Density-photoelectric plane with one 1-sigma ellipse and truth
    marker per material."""
    w, h = size
    m = 50
    sx = (w - 2 * m) / (rho_range[1] - rho_range[0])
    sy = (h - 2 * m) / (p_range[1] - p_range[0])

    def X(v):
        return m + (v - rho_range[0]) * sx

    def Y(v):
        return h - m - (v - p_range[0]) * sy

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">',
        f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" stroke="black"/>',
        f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle">density (g/cm3)</text>',
        f'<text x="14" y="{h / 2}" transform="rotate(-90 14 {h / 2})" text-anchor="middle">photoelectric (1/cm)</text>',
    ]
    for t in np.linspace(*rho_range, 7):
        out.append(f'<text x="{X(t):.1f}" y="{h - m + 14}" text-anchor="middle">{t:.1f}</text>')
    for t in np.linspace(*p_range, 7):
        out.append(f'<text x="{m - 6}" y="{Y(t) + 4:.1f}" text-anchor="end">{t:.2f}</text>')
    for k, r in enumerate(report.rows):
        c = _COLORS[k % len(_COLORS)]
        out.append(
            f'<ellipse cx="{X(r.mean_rho):.2f}" cy="{Y(r.mean_p):.2f}" rx="{max(r.std_rho * sx, 0.5):.2f}" '
            f'ry="{max(r.std_p * sy, 0.5):.2f}" fill="{c}" fill-opacity="0.25" stroke="{c}"/>'
        )
        tx, ty = X(r.true_rho), Y(r.true_p)
        out.append(f'<path d="M{tx - 4:.1f},{ty - 4:.1f} L{tx + 4:.1f},{ty + 4:.1f} M{tx - 4:.1f},{ty + 4:.1f} '
                   f'L{tx + 4:.1f},{ty - 4:.1f}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{w - m + 4}" y="{m + 14 * (k + 1)}" fill="{c}">{r.material}</text>')
    out.append("</svg>")
    return "\n".join(out)
