"""Photon interaction physics: Klein-Nishina factors, Compton kinematics,
source spectra and the two-parameter attenuation model.

Units: energies in keV, lengths in cm, density in g/cm^3, photoelectric
coefficient in cm^-1 referenced to ``E0_KEV``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

M_E_C2_KEV = 511.0
AVOGADRO = 6.02214076e23
R_E_CM = 2.8179403e-13
E0_KEV = 20.0

# Water incoherent mass attenuation at 60 keV (XCOM, cm^2/g); the Compton
# scale below is pinned to it.
WATER_COMPTON_60KEV_CM2_G = 0.1803

# Series of f_kn_total about gamma = 0, used below SERIES_GAMMA where the
# closed form cancels catastrophically.
_KN_SERIES = np.array(
    [
        4 / 3,
        -8 / 3,
        104 / 15,
        -266 / 15,
        4576 / 105,
        -2176 / 21,
        15136 / 63,
        -24592 / 45,
        606208 / 495,
        -447488 / 165,
    ]
)
SERIES_GAMMA = 0.02


def _gamma(energy_kev):
    e = np.asarray(energy_kev, dtype=float)
    if np.any(~(e > 0)):
        raise ValueError("photon energy must be positive")
    return e / M_E_C2_KEV


def _scalarize(x):
    return float(x) if np.ndim(x) == 0 else x


def f_kn_total(energy_kev):
    """Dimensionless Klein-Nishina total cross-section factor.

    Equals the total KN cross section divided by ``2 pi r_e^2``; tends to
    4/3 (Thomson) as the energy goes to zero.
    """
    g = _gamma(energy_kev)
    small = g < SERIES_GAMMA
    gs = np.where(small, 1.0, g)
    lg = np.log1p(2.0 * gs)
    closed = (
        (1.0 + gs) / gs**2 * (2.0 * (1.0 + gs) / (1.0 + 2.0 * gs) - lg / gs)
        + lg / (2.0 * gs)
        - (1.0 + 3.0 * gs) / (1.0 + 2.0 * gs) ** 2
    )
    series = np.polynomial.polynomial.polyval(np.where(small, g, 0.0), _KN_SERIES)
    return _scalarize(np.where(small, series, closed))


def kn_differential(energy_kev, theta):
    """Klein-Nishina differential cross section dsigma/dOmega in cm^2/sr."""
    g = _gamma(energy_kev)
    theta = np.asarray(theta, dtype=float)
    if np.any((theta < 0) | (theta > np.pi)):
        raise ValueError("scattering angle must lie in [0, pi]")
    one_m_cos = 1.0 - np.cos(theta)
    k = 1.0 + g * one_m_cos
    cos_t = np.cos(theta)
    val = R_E_CM**2 / (2.0 * k**2) * ((1.0 + cos_t**2) + g**2 * one_m_cos**2 / k)
    return _scalarize(val)


def compton_shift(energy_kev, theta):
    """Energy (keV) of a photon of ``energy_kev`` scattered through ``theta``."""
    g = _gamma(energy_kev)
    theta = np.asarray(theta, dtype=float)
    if np.any((theta < 0) | (theta > np.pi)):
        raise ValueError("scattering angle must lie in [0, pi]")
    return _scalarize(np.asarray(energy_kev, dtype=float) / (1.0 + g * (1.0 - np.cos(theta))))


def photoelectric_factor(energy_kev):
    """``(E0 / E)^3``: scales a reference-energy photoelectric coefficient."""
    e = np.asarray(energy_kev, dtype=float)
    if np.any(~(e > 0)):
        raise ValueError("photon energy must be positive")
    return _scalarize((E0_KEV / e) ** 3)


def compton_scale(kappa: float | None = None) -> float:
    """``C_KN`` in cm^2/g so that ``C_KN * f_kn_total(E) * rho`` is in cm^-1.

    ``C_KN = (N_A / 2) * 2 pi r_e^2 * kappa``; by default ``kappa`` is set so
    water at 60 keV reproduces its tabulated Compton attenuation.
    """
    if kappa is None:
        kappa = default_kappa()
    return 0.5 * AVOGADRO * 2.0 * np.pi * R_E_CM**2 * kappa


def default_kappa() -> float:
    bare = 0.5 * AVOGADRO * 2.0 * np.pi * R_E_CM**2 * f_kn_total(60.0)
    return WATER_COMPTON_60KEV_CM2_G / bare


def mu_at(rho, p, energy_kev, kappa: float | None = None):
    """Linear attenuation (cm^-1) of a material with density ``rho`` and
    reference photoelectric coefficient ``p``; linear in ``(rho, p)``."""
    rho = np.asarray(rho, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(rho < 0) or np.any(p < 0):
        raise ValueError("density and photoelectric coefficient must be nonnegative")
    val = compton_scale(kappa) * f_kn_total(energy_kev) * rho + photoelectric_factor(energy_kev) * p
    return _scalarize(val)


@dataclass(frozen=True)
class EnergyBinning:
    """Contiguous detector energy bins of equal width."""

    centers_kev: np.ndarray
    width_kev: float

    def __post_init__(self):
        c = np.asarray(self.centers_kev, dtype=float)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("energy binning needs at least one bin")
        if not self.width_kev > 0:
            raise ValueError("bin width must be positive")
        if c.size > 1 and not np.allclose(np.diff(c), self.width_kev, rtol=0, atol=1e-9 * self.width_kev):
            raise ValueError("bins must be contiguous with spacing equal to the width")
        object.__setattr__(self, "centers_kev", c)
        object.__setattr__(self, "width_kev", float(self.width_kev))

    @classmethod
    def from_range(cls, lo: float, hi: float, width: float) -> "EnergyBinning":
        n = int(round((hi - lo) / width))
        if n < 1 or not np.isclose(lo + n * width, hi):
            raise ValueError(f"[{lo}, {hi}] is not tiled by bins of width {width}")
        return cls(lo + (np.arange(n) + 0.5) * width, width)

    @property
    def n(self) -> int:
        return self.centers_kev.size

    @property
    def lo(self) -> float:
        return float(self.centers_kev[0] - self.width_kev / 2)

    @property
    def hi(self) -> float:
        return float(self.centers_kev[-1] + self.width_kev / 2)

    @property
    def edges(self) -> np.ndarray:
        return np.append(self.centers_kev - self.width_kev / 2, self.hi)

    def assign(self, energy_kev) -> np.ndarray:
        """Bin index per energy on half-open bins; -1 outside ``[lo, hi)``."""
        e = np.asarray(energy_kev, dtype=float)
        idx = np.floor((e - self.lo) / self.width_kev).astype(np.int64)
        idx[(e < self.lo) | (e >= self.hi) | (idx >= self.n)] = -1
        return idx

    def to_dict(self) -> dict:
        return {"lo_kev": self.lo, "hi_kev": self.hi, "width_kev": self.width_kev}


@dataclass(frozen=True)
class Spectrum:
    """Photon counts per energy bin of a pencil-beam source.

    ``intensities[k]`` is the number of photons in the bin centered at
    ``energies_kev[k]``, i.e. the spectral density times the bin width.
    """

    energies_kev: np.ndarray
    intensities: np.ndarray
    bin_width_kev: float

    def __post_init__(self):
        e = np.asarray(self.energies_kev, dtype=float)
        i = np.asarray(self.intensities, dtype=float)
        if e.shape != i.shape or e.ndim != 1 or e.size == 0:
            raise ValueError("spectrum energies and intensities must be equal-length 1-D arrays")
        if np.any(i < 0) or not np.all(np.isfinite(i)):
            raise ValueError("spectrum intensities must be finite and nonnegative")
        if e.size > 1 and not np.allclose(np.diff(e), self.bin_width_kev, rtol=0, atol=1e-9):
            raise ValueError("spectrum energies must ascend uniformly with the stated bin width")
        object.__setattr__(self, "energies_kev", e)
        object.__setattr__(self, "intensities", i)
        object.__setattr__(self, "bin_width_kev", float(self.bin_width_kev))

    @property
    def total(self) -> float:
        return float(self.intensities.sum())

    def scaled_to(self, total: float) -> "Spectrum":
        return Spectrum(self.energies_kev, self.intensities * (total / self.total), self.bin_width_kev)

    def to_dict(self) -> dict:
        return {
            "energies_kev": self.energies_kev.tolist(),
            "intensities": self.intensities.tolist(),
            "bin_width_kev": self.bin_width_kev,
        }

    @classmethod
    def from_csv(cls, path) -> "Spectrum":
        """Read an ``energy_keV,intensity`` CSV (header required)."""
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if header != ["energy_keV", "intensity"]:
                raise ValueError(f"{path}: expected header 'energy_keV,intensity', got {','.join(header)!r}")
            rows = [(float(a), float(b)) for a, b in reader if a.strip()]
        e, i = map(np.array, zip(*rows))
        if np.any(np.diff(e) <= 0):
            raise ValueError(f"{path}: energies must be strictly ascending")
        width = float(e[1] - e[0]) if e.size > 1 else 1.0
        return cls(e, i, width)


def kramers_spectrum(e_max_kev: float = 140.0, bin_width_kev: float = 1.0, total: float = 1e6) -> Spectrum:
    """Kramers-law bremsstrahlung shape ``I(E) ~ E_max / E - 1`` on
    ``[bin_width, e_max]``, normalized to ``total`` photons."""
    e = np.arange(bin_width_kev, e_max_kev + 0.5 * bin_width_kev, bin_width_kev)
    shape = np.clip(e_max_kev / e - 1.0, 0.0, None)
    return Spectrum(e, shape * (total / shape.sum()), bin_width_kev)


def default_spectrum() -> Spectrum:
    return kramers_spectrum()


def band_intensity(spec: Spectrum, lo_kev: float, hi_kev: float) -> float:
    """Photons of ``spec`` falling in ``[lo_kev, hi_kev]``.

    Each spectrum bin contributes in proportion to its overlap with the band,
    which makes the result additive over any partition of the band.
    """
    half = spec.bin_width_kev / 2
    left = np.maximum(spec.energies_kev - half, lo_kev)
    right = np.minimum(spec.energies_kev + half, hi_kev)
    frac = np.clip(right - left, 0.0, None) / spec.bin_width_kev
    return float(np.dot(frac, spec.intensities))
