"""Measurement models: the linear attenuation system, the quasi-linear
single-scatter Compton operator, and additive Gaussian noise.

Sparse operators are plain ``scipy.sparse`` CSR matrices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import physics
from .geometry import Grid2D, ScanGeometry, enumerate_raypaths, scattering_angle, solid_angle, trace_rays

logger = logging.getLogger(__name__)

# events per block when sweeping the (triple, source energy) table
EVENT_BLOCK = 1 << 21
# cache event tables when there are fewer events than this
EVENT_CACHE_LIMIT = 10**7


@dataclass
class MaterialMap:
    """Density (g/cm^3) and reference photoelectric (cm^-1) images on a grid."""

    grid: Grid2D
    rho: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        n = self.grid.n_pixels
        rho = np.asarray(self.rho, dtype=float).ravel()
        p = np.asarray(self.p, dtype=float).ravel()
        if rho.size != n or p.size != n:
            raise ValueError(f"material vectors must have {n} entries, got {rho.size} and {p.size}")
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(p))):
            raise ValueError("material vectors must be finite")
        self.rho = np.clip(rho, 0.0, None)
        self.p = np.clip(p, 0.0, None)

    @classmethod
    def zeros(cls, grid: Grid2D) -> "MaterialMap":
        return cls(grid, np.zeros(grid.n_pixels), np.zeros(grid.n_pixels))


@dataclass
class SinogramSet:
    """Attenuation (log domain) and scatter (count domain) measurements.

    ``g_A`` is ordered ``(primary raypath i, energy bin m)``; ``g_C`` is
    ordered ``(primary raypath i, secondary slot j, scatter bin m)``, slot
    ``j`` indexing the row ``secondary[i]`` of the raypath table.
    """

    g_A: np.ndarray
    g_C: np.ndarray
    n_primary: int
    n_atten_bins: int
    n_secondary_slots: int
    n_scatter_bins: int
    sigma_A: float = 0.0
    sigma_C: float = 0.0
    seed: int | None = None
    geometry_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.g_A = np.asarray(self.g_A, dtype=float).ravel()
        self.g_C = np.asarray(self.g_C, dtype=float).ravel()
        if self.g_A.size != self.n_primary * self.n_atten_bins:
            raise ValueError("g_A length does not match raypaths x energy bins")
        if self.g_C.size != self.n_primary * self.n_secondary_slots * self.n_scatter_bins:
            raise ValueError("g_C length does not match secondary raypaths x scatter bins")

    @classmethod
    def for_geometry(cls, geom: ScanGeometry, g_A, g_C, **kw) -> "SinogramSet":
        return cls(
            g_A, g_C, geom.n_primary, geom.atten_bins.n, geom.n_detectors - 1, geom.scatter_bins.n,
            geometry_hash=geom.hash(), **kw,
        )

    def atten_index(self, i, m):
        return np.asarray(i) * self.n_atten_bins + np.asarray(m)

    def scatter_index(self, i, j, m):
        return (np.asarray(i) * self.n_secondary_slots + np.asarray(j)) * self.n_scatter_bins + np.asarray(m)

    @property
    def atten_cube(self) -> np.ndarray:
        return self.g_A.reshape(self.n_primary, self.n_atten_bins)

    @property
    def scatter_cube(self) -> np.ndarray:
        return self.g_C.reshape(self.n_primary, self.n_secondary_slots, self.n_scatter_bins)


# ---------------------------------------------------------------------------
# attenuation


def system_matrix(geom: ScanGeometry) -> sp.csr_matrix:
    """Chord-length matrix: ``A[i, j]`` is the length of primary raypath ``i``
    inside pixel ``j``."""
    table = enumerate_raypaths(geom)
    tr = table.trace
    return sp.csr_matrix((tr.length, (tr.ray, tr.pixel)), shape=(geom.n_primary, geom.grid.n_pixels))


def build_attenuation_system(geom: ScanGeometry, kappa: float | None = None):
    """Return ``(A, K_rho, K_p)`` with rows of the stacked operators ordered
    ``i * N_E + m``."""
    A = system_matrix(geom)
    e = geom.atten_bins.centers_kev
    c_rho = physics.compton_scale(kappa) * physics.f_kn_total(e)
    c_p = physics.photoelectric_factor(e)
    K_rho = sp.kron(A, c_rho[:, None], format="csr")
    K_p = sp.kron(A, c_p[:, None], format="csr")
    return A, K_rho, K_p


def forward_attenuation(K_rho, K_p, material: MaterialMap) -> np.ndarray:
    if K_rho.shape[1] != material.rho.size or K_p.shape[1] != material.p.size:
        raise ValueError("operator width does not match the material grid")
    return K_rho @ material.rho + K_p @ material.p


def attenuation_counts(geom: ScanGeometry, material: MaterialMap, kappa: float | None = None) -> np.ndarray:
    """Detected counts per (raypath, bin) under the per-bin monochromatic
    approximation; ``-log(counts / band)`` recovers ``g_A``."""
    A = system_matrix(geom)
    table = enumerate_raypaths(geom)
    bins = geom.atten_bins
    band = np.array(
        [
            [physics.band_intensity(geom.spectra[geom.sources[s].spectrum_id], lo, lo + bins.width_kev) for lo in bins.edges[:-1]]
            for s in table.source
        ]
    )
    mu = np.stack([physics.mu_at(material.rho, material.p, e, kappa) for e in bins.centers_kev], axis=1)
    return band * np.exp(-(A @ mu))


# ---------------------------------------------------------------------------
# scatter


@dataclass
class _EventBlock:
    trip: np.ndarray  # triple index per event
    entry: np.ndarray  # K_C entry per event
    w0: np.ndarray  # I * Omega * S * delta (no attenuation, no rho)
    in_rho: np.ndarray  # C_KN * f_KN(E_S)
    in_p: np.ndarray  # (E0 / E_S)^3
    out_rho: np.ndarray  # C_KN * f_KN(E')
    out_p: np.ndarray  # (E0 / E')^3


class ScatterSystem:
    """Geometry-only part of the single-scatter model on one grid.

    Enumerates every scatter *triple* ``(primary segment l of raypath i,
    secondary detector j)`` together with the incoming path (source to chord
    midpoint) and outgoing path (chord midpoint to detector) as sparse
    path-length rows, and every *event* ``(triple, source energy k)`` whose
    scattered energy lands in a detector bin.  Events map onto nonzeros of
    ``K_C``; each nonzero is one ``(triple, bin)`` pair.
    """

    def __init__(self, geom: ScanGeometry, kappa: float | None = None, cache_events: bool | None = None):
        self.geom = geom
        self.grid = geom.grid
        self.kappa = physics.default_kappa() if kappa is None else float(kappa)
        self.c_kn = physics.compton_scale(self.kappa)
        n_p = geom.grid.n_pixels
        n_slots = geom.n_detectors - 1
        n_bins = geom.scatter_bins.n
        self.n_pixels = n_p
        self.n_rows = geom.n_scatter_rows
        self.n_slots = n_slots
        self.n_bins = n_bins

        table = enumerate_raypaths(geom)
        self.table = table
        tr = table.trace
        self.seg_ray = tr.ray
        self.seg_pixel = tr.pixel
        self.seg_len = tr.length
        self.seg_mid = tr.midpoint
        n_seg = tr.ray.size
        self.n_seg = n_seg

        src_pos = np.array([s.position for s in geom.sources])
        det_pos = np.array([d.center for d in geom.detectors])
        seg_src = table.source[tr.ray]
        inc = trace_rays(geom.grid, src_pos[seg_src], tr.midpoint)
        self.A_in = sp.csr_matrix((inc.length, (inc.ray, inc.pixel)), shape=(n_seg, n_p))

        # triples are segment-major: t = seg * n_slots + slot
        self.trip_seg = np.repeat(np.arange(n_seg), n_slots)
        self.trip_slot = np.tile(np.arange(n_slots), n_seg)
        self.trip_det = table.secondary[tr.ray][:, :].ravel()
        n_trip = self.trip_seg.size
        self.n_trip = n_trip
        mid = tr.midpoint[self.trip_seg]
        out = trace_rays(geom.grid, mid, det_pos[self.trip_det])
        self.A_out = sp.csr_matrix((out.length, (out.ray, out.pixel)), shape=(n_trip, n_p))

        prim_det = table.detector[tr.ray][self.trip_seg]
        self.cos_theta = np.cos(scattering_angle(mid, det_pos[prim_det], det_pos[self.trip_det]))
        omega = np.empty(n_trip)
        for d, det in enumerate(geom.detectors):
            sel = self.trip_det == d
            omega[sel] = solid_angle(mid[sel], det)
        self.omega = omega
        self.trip_row0 = (tr.ray[self.trip_seg] * n_slots + self.trip_slot) * n_bins

        # source energies: one spectrum per source
        self._spectra = {}
        for sid in {s.spectrum_id for s in geom.sources}:
            spec = geom.spectra[sid]
            keep = (spec.intensities > 0) & (spec.energies_kev >= geom.scatter_bins.lo)
            e = spec.energies_kev[keep]
            self._spectra[sid] = (e, spec.intensities[keep])
        self.trip_spec = np.array([geom.sources[s].spectrum_id for s in table.source])[tr.ray][self.trip_seg]

        n_events = sum(self._spectra[sid][0].size * int(np.sum(self.trip_spec == sid)) for sid in self._spectra)
        self.cache_events = n_events <= EVENT_CACHE_LIMIT if cache_events is None else cache_events
        self._blocks: list[_EventBlock] | None = None

        # nonzero structure of K_C: one entry per (triple, bin)
        keys = np.unique(np.concatenate([self._raw_keys(sl) for sl in self._slices()]))
        self.entry_key = keys
        self.entry_row = keys // (n_trip * n_bins)
        rem = keys % (n_trip * n_bins)
        self.entry_trip = rem // n_bins
        self.entry_bin = rem % n_bins
        self.entry_seg = self.trip_seg[self.entry_trip]
        self.entry_pixel = self.seg_pixel[self.entry_seg]
        self.indptr = np.searchsorted(self.entry_row, np.arange(self.n_rows + 1)).astype(np.int64)
        if self.cache_events:
            self._blocks = [self._build_block(sl) for sl in self._slices()]
        logger.debug("scatter system: %d triples, %d events, %d nonzeros", n_trip, n_events, keys.size)

    # -- event enumeration -------------------------------------------------

    def _slices(self):
        k_max = max(e.size for e, _ in self._spectra.values()) or 1
        step = max(1, EVENT_BLOCK // k_max)
        for start in range(0, self.n_trip, step):
            yield slice(start, min(start + step, self.n_trip))

    def _block_events(self, sl: slice):
        """Valid (triple, energy) pairs of a triple slice with their bins."""
        trips, ks, e_s, e_out, bins, intens = [], [], [], [], [], []
        for sid, (energies, inten) in self._spectra.items():
            t = np.arange(sl.start, sl.stop)[self.trip_spec[sl] == sid]
            if t.size == 0 or energies.size == 0:
                continue
            g = energies / physics.M_E_C2_KEV
            one_m_cos = 1.0 - self.cos_theta[t]
            e_prime = energies[None, :] / (1.0 + g[None, :] * one_m_cos[:, None])
            m = self.geom.scatter_bins.assign(e_prime)
            ok = m >= 0
            ti, ki = np.nonzero(ok)
            trips.append(t[ti])
            ks.append(ki)
            e_s.append(energies[ki])
            e_out.append(e_prime[ok])
            bins.append(m[ok])
            intens.append(inten[ki])
        if not trips:
            empty = np.empty(0)
            return (empty.astype(np.int64),) * 2 + (empty,) * 2 + (empty.astype(np.int64), empty)
        return tuple(np.concatenate(x) for x in (trips, ks, e_s, e_out, bins, intens))

    def _raw_keys(self, sl: slice) -> np.ndarray:
        trip, _, _, _, m, _ = self._block_events(sl)
        return np.unique(self._key(trip, m))

    def _key(self, trip, m):
        return (self.trip_row0[trip] + m) * (self.n_trip * self.n_bins) + trip * self.n_bins + m

    def _build_block(self, sl: slice) -> _EventBlock:
        trip, k, e_s, e_out, m, inten = self._block_events(sl)
        entry = np.searchsorted(self.entry_key, self._key(trip, m))
        theta = np.arccos(np.clip(self.cos_theta[trip], -1.0, 1.0))
        s_factor = 0.5 * physics.AVOGADRO * physics.kn_differential(e_s, theta)
        w0 = inten * self.omega[trip] * s_factor * self.seg_len[self.trip_seg[trip]]
        return _EventBlock(
            trip=trip.astype(np.int32),
            entry=entry.astype(np.int32),
            w0=w0,
            in_rho=self.c_kn * physics.f_kn_total(e_s),
            in_p=physics.photoelectric_factor(e_s),
            out_rho=self.c_kn * physics.f_kn_total(e_out),
            out_p=physics.photoelectric_factor(e_out),
        )

    def blocks(self):
        if self._blocks is not None:
            yield from self._blocks
        else:
            for sl in self._slices():
                yield self._build_block(sl)

    @property
    def n_entries(self) -> int:
        return self.entry_key.size

    # -- evaluation --------------------------------------------------------

    def _event_weights(self, blk: _EventBlock, in_rho, in_p, out_rho, out_p):
        seg = self.trip_seg[blk.trip]
        att = (
            blk.in_rho * in_rho[seg]
            + blk.in_p * in_p[seg]
            + blk.out_rho * out_rho[blk.trip]
            + blk.out_p * out_p[blk.trip]
        )
        return blk.w0 * np.exp(-att)

    def _path_integrals(self, rho, p):
        return self.A_in @ rho, self.A_in @ p, self.A_out @ rho, self.A_out @ p

    def entry_weights(self, rho, p) -> np.ndarray:
        """Nonzeros of ``K_C(rho, p)``: per (triple, bin), the sum over source
        energies of the attenuated event weights."""
        rho, p = _check_pair(rho, p, self.n_pixels)
        ints = self._path_integrals(rho, p)
        data = np.zeros(self.n_entries)
        for blk in self.blocks():
            data += np.bincount(blk.entry, weights=self._event_weights(blk, *ints), minlength=self.n_entries)
        return data

    def operator(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.entry_pixel.copy(), self.indptr.copy()), shape=(self.n_rows, self.n_pixels))

    def forward(self, rho, p) -> np.ndarray:
        """Fully nonlinear scatter data ``K_C(rho, p) rho``."""
        rho, p = _check_pair(rho, p, self.n_pixels)
        return self.operator(self.entry_weights(rho, p)) @ rho

    def jacobian_p(self, rho, p) -> sp.csr_matrix:
        """``d/dp [K_C(rho, p) rho]`` as a sparse (n_rows, n_pixels) matrix."""
        rho, p = _check_pair(rho, p, self.n_pixels)
        ints = self._path_integrals(rho, p)
        c_in = np.zeros(self.n_entries)
        c_out = np.zeros(self.n_entries)
        for blk in self.blocks():
            w = self._event_weights(blk, *ints)
            c_in += np.bincount(blk.entry, weights=w * blk.in_p, minlength=self.n_entries)
            c_out += np.bincount(blk.entry, weights=w * blk.out_p, minlength=self.n_entries)
        rho_l = rho[self.entry_pixel]
        R_in = sp.csr_matrix((c_in * rho_l, (self.entry_row, self.entry_seg)), shape=(self.n_rows, self.n_seg))
        R_out = sp.csr_matrix((c_out * rho_l, (self.entry_row, self.entry_trip)), shape=(self.n_rows, self.n_trip))
        return -(R_in @ self.A_in + R_out @ self.A_out).tocsr()


def _check_pair(rho, p, n):
    rho = np.asarray(rho, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    if rho.size != n or p.size != n:
        raise ValueError(f"expected vectors of length {n}, got {rho.size} and {p.size}")
    return rho, p


_SYSTEM_CACHE: dict[tuple[str, float], ScatterSystem] = {}
_SYSTEM_CACHE_SIZE = 4


def scatter_system(geom: ScanGeometry, kappa: float | None = None) -> ScatterSystem:
    """Memoized :class:`ScatterSystem` for ``geom``."""
    kap = physics.default_kappa() if kappa is None else float(kappa)
    key = (geom.hash(), kap)
    sys_ = _SYSTEM_CACHE.get(key)
    if sys_ is None:
        sys_ = ScatterSystem(geom, kap)
        if len(_SYSTEM_CACHE) >= _SYSTEM_CACHE_SIZE:
            _SYSTEM_CACHE.pop(next(iter(_SYSTEM_CACHE)))
        _SYSTEM_CACHE[key] = sys_
    return sys_


@dataclass
class ScatterAssembly:
    """``K_C`` frozen at a linearization point ``(rho_lin, p_lin)``."""

    system: ScatterSystem
    rho_lin: np.ndarray
    p_lin: np.ndarray
    operator: sp.csr_matrix


def assemble_scatter(geom_or_system, material: MaterialMap | tuple, kappa: float | None = None):
    """Freeze the scatter operator at ``material``.

    Returns ``(assembly, K_C)``; ``K_C @ rho`` gives scatter data for any
    density while the attenuation factors stay those of ``material``.
    """
    system = geom_or_system if isinstance(geom_or_system, ScatterSystem) else scatter_system(geom_or_system, kappa)
    if isinstance(material, MaterialMap):
        rho, p = material.rho, material.p
    else:
        rho, p = material
    rho, p = _check_pair(rho, p, system.n_pixels)
    K = system.operator(system.entry_weights(rho, p))
    return ScatterAssembly(system, rho.copy(), p.copy(), K), K


def forward_scatter(assembly: ScatterAssembly, rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=float).ravel()
    if rho.size != assembly.operator.shape[1]:
        raise ValueError("density length does not match the assembly grid")
    return assembly.operator @ rho


# ---------------------------------------------------------------------------
# noise


def add_noise(g, snr_db: float | None, rng_seed=None):
    """White Gaussian noise at a given SNR.

    ``sigma^2 = ||g||^2 / (len(g) * 10^(snr_db / 10))``.  Returns
    ``(g_noisy, sigma)``; ``snr_db`` of ``None`` or ``inf`` leaves ``g``
    untouched with ``sigma = 0``.
    """
    g = np.asarray(g, dtype=float)
    power = float(np.dot(g.ravel(), g.ravel()))
    if power == 0.0:
        raise ValueError("SNR is undefined for an all-zero signal")
    if snr_db is None or np.isposinf(snr_db):
        return g.copy(), 0.0
    if not np.isfinite(snr_db):
        raise ValueError(f"invalid SNR {snr_db!r}")
    sigma = np.sqrt(power / (g.size * 10.0 ** (snr_db / 10.0)))
    rng = np.random.default_rng(rng_seed)
    return g + sigma * rng.standard_normal(g.shape), float(sigma)


def simulate(geom: ScanGeometry, material: MaterialMap, snr_db: float | None = None, seed: int | None = 0,
             kappa: float | None = None) -> SinogramSet:
    """Noiseless models plus independent noise on each dataset.

    Noise enters ``g_A`` in its log domain and ``g_C`` in its count domain.
    """
    if material.grid != geom.grid:
        raise ValueError("material grid differs from the scan grid")
    _, K_rho, K_p = build_attenuation_system(geom, kappa)
    g_A = forward_attenuation(K_rho, K_p, material)
    g_C = scatter_system(geom, kappa).forward(material.rho, material.p)
    sig_A = sig_C = 0.0
    if snr_db is not None and np.isfinite(snr_db):
        seed_a, seed_c = np.random.SeedSequence(seed).spawn(2)
        g_A, sig_A = add_noise(g_A, snr_db, seed_a)
        g_C, sig_C = add_noise(g_C, snr_db, seed_c)
    return SinogramSet.for_geometry(geom, g_A, g_C, sigma_A=sig_A, sigma_C=sig_C, seed=seed,
                                    meta={"snr_db": snr_db})
