"""Density solver: the edge-preserving outer loop around a quasi-linear
fixed-point inner loop, and its coarse-to-fine driver."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..forward import ScatterSystem, build_attenuation_system, scatter_system
from ..geometry import ScanGeometry
from .config import ReconConfig
from .lsqr import SolverError, lsqr_solve
from .regularization import EdgeWeights, gradient_operator, update_edge_weights

logger = logging.getLogger(__name__)

# consecutive growths of the fixed-point step treated as divergence
DIVERGENCE_ROUNDS = 5


class DensityDivergenceError(SolverError):
    """The fixed-point iteration stopped contracting; ``rho`` is the last iterate."""

    def __init__(self, message, rho):
        super().__init__(message)
        self.rho = rho


def data_weights(g_A, g_C, mode: str = "both"):
    """Normalizing weights ``(w1, w2)`` for the scatter and attenuation terms.

    Parameters
    ----------
    g_A, g_C : array_like
        Attenuation and scatter data.
    mode : {"both", "atten", "scatter"}
        ``"atten"`` returns ``(0, 1)`` and ``"scatter"`` returns ``(1, 0)``
        regardless of the data.

    Returns
    -------
    (w1, w2) : tuple of float
        ``1 / ||g_C||`` and ``1 / ||g_A||``; a zero-norm dataset gets weight 0.
    """
    if mode == "atten":
        return 0.0, 1.0
    if mode == "scatter":
        return 1.0, 0.0
    if mode != "both":
        raise ValueError(f"unknown mode {mode!r}")
    nc = float(np.linalg.norm(np.asarray(g_C, dtype=float)))
    na = float(np.linalg.norm(np.asarray(g_A, dtype=float)))
    if nc == 0.0 and na == 0.0:
        raise ValueError("both datasets are identically zero")
    if nc == 0.0 or na == 0.0:
        warnings.warn("one dataset is identically zero; its weight is set to 0", RuntimeWarning, stacklevel=2)
    return (1.0 / nc if nc else 0.0), (1.0 / na if na else 0.0)


@dataclass
class ScaleOperators:
    """Everything the solvers need on one grid: attenuation operators, the
    scatter system, and the gradient matrix."""

    geom: ScanGeometry
    K_rho: sp.csr_matrix
    K_p: sp.csr_matrix
    L: sp.csr_matrix
    kappa: float | None = None
    _scatter: ScatterSystem | None = field(default=None, repr=False)

    @classmethod
    def build(cls, geom: ScanGeometry, kappa: float | None = None) -> "ScaleOperators":
        _, K_rho, K_p = build_attenuation_system(geom, kappa)
        return cls(geom, K_rho, K_p, gradient_operator(geom.grid.n), kappa)

    @property
    def scatter(self) -> ScatterSystem:
        if self._scatter is None:
            self._scatter = scatter_system(self.geom, self.kappa)
        return self._scatter

    @property
    def n_pixels(self) -> int:
        return self.geom.grid.n_pixels


def upscale_nearest(img, n_to: int) -> np.ndarray:
    """Nearest-neighbour resampling of a square row-major image to ``n_to``."""
    img = np.asarray(img, dtype=float)
    n_from = int(round(np.sqrt(img.size)))
    src = np.floor((np.arange(n_to) + 0.5) * n_from / n_to).astype(int)
    return img.reshape(n_from, n_from)[np.ix_(src, src)].ravel()


def stacked_system(ops: ScaleOperators, g_A, g_C, p_hat, rho_lin, M, lam, w1, w2):
    """``(K~, g~)`` of the regularized quasi-linear density problem with the
    scatter operator frozen at ``(rho_lin, p_hat)``."""
    blocks, rhs = [], []
    if w1 > 0:
        K_C = ops.scatter.operator(ops.scatter.entry_weights(np.clip(rho_lin, 0.0, None), p_hat))
        blocks.append(np.sqrt(w1) * K_C)
        rhs.append(np.sqrt(w1) * g_C)
    if w2 > 0:
        blocks.append(np.sqrt(w2) * ops.K_rho)
        rhs.append(np.sqrt(w2) * (g_A - ops.K_p @ p_hat))
    blocks.append(np.sqrt(lam) * M)
    rhs.append(np.zeros(M.shape[0]))
    return sp.vstack(blocks, format="csr"), np.concatenate(rhs)


def density_objective(ops, g_A, g_C, p_hat, rho_lin, rho, M, lam, w1, w2) -> float:
    """Weighted data misfit plus ``lam ||M rho||^2`` with the scatter operator
    frozen at ``rho_lin``; the squared norm of the stacked residual."""
    total = lam * float(np.sum((M @ rho) ** 2))
    if w1 > 0:
        K_C = ops.scatter.operator(ops.scatter.entry_weights(np.clip(rho_lin, 0.0, None), p_hat))
        total += w1 * float(np.sum((g_C - K_C @ rho) ** 2))
    if w2 > 0:
        total += w2 * float(np.sum((g_A - ops.K_rho @ rho - ops.K_p @ p_hat) ** 2))
    return total


@dataclass
class DensityResult:
    """Outcome of one Table-1 style solve.

    ``residual`` is the stacked regularized residual at the final iterate
    and ``fp_iterations`` lists inner-loop counts per outer step.
    """

    rho: np.ndarray
    residual: np.ndarray
    edge_weights: EdgeWeights
    fp_iterations: list[int]
    fp_converged: list[bool]
    outer_iterations: int
    lsqr_iterations: int


def solve_density_scale(ops: ScaleOperators, g_A, g_C, p_hat, rho_init, lam: float, w1: float, w2: float,
                        cfg: ReconConfig) -> DensityResult:
    """Minimize the edge-weighted, quasi-linear density functional on one grid.

    The outer loop updates the edge weights ``d`` until the weighted
    gradient stops changing (or ``l_max`` is exceeded); each outer step runs
    a fixed-point loop that refreezes the scatter operator at the previous
    iterate and solves the stacked linear problem with LSQR.

    Parameters
    ----------
    ops : ScaleOperators
    g_A, g_C : ndarray
        Attenuation and scatter data.
    p_hat : ndarray
        Photoelectric image held fixed, on this grid.
    rho_init : ndarray
        Starting density and first linearization point.
    lam : float
        Smoothness weight.
    w1, w2 : float
        Data weights for scatter and attenuation.
    cfg : ReconConfig

    Returns
    -------
    DensityResult
    """
    g_A = np.asarray(g_A, dtype=float)
    g_C = np.asarray(g_C, dtype=float)
    n = ops.n_pixels
    p_hat = np.asarray(p_hat, dtype=float).ravel()
    r_old = np.asarray(rho_init, dtype=float).ravel().copy()
    if p_hat.size != n or r_old.size != n:
        raise ValueError(f"p_hat and rho_init must have {n} entries")
    L = ops.L
    edges = EdgeWeights.ones(L.shape[0])
    fp_counts, fp_ok = [], []
    n_lsqr = 0
    prev_grad = None  # forces at least one edge-preserving step
    linear = w1 == 0.0
    rho_l = r_old
    l = 1
    while True:
        M = edges.weighted(L)
        increases, last_step = 0, np.inf
        converged = False
        for it in range(1, cfg.fpi_max + 1):
            K, rhs = stacked_system(ops, g_A, g_C, p_hat, r_old, M, lam, w1, w2)
            r_new, info = lsqr_solve(K, rhs, cfg.lsqr_tol, cfg.lsqr_max_iter, x0=r_old, scale_columns=True)
            n_lsqr += info["iterations"]
            step = float(np.sum((r_new - r_old) ** 2))
            increases = increases + 1 if step > last_step else 0
            last_step = step
            if increases >= DIVERGENCE_ROUNDS:
                raise DensityDivergenceError("density fixed point diverged", np.clip(r_new, 0.0, None))
            r_old = r_new
            if linear or step < cfg.eps_fpi:
                converged = True
                break
        fp_counts.append(it)
        fp_ok.append(converged)
        if not converged:
            raise DensityDivergenceError(f"fixed point not reached in {cfg.fpi_max} rounds", np.clip(r_old, 0.0, None))
        rho_l = r_old
        grad = M @ rho_l
        settled = prev_grad is not None and float(np.sum((grad - prev_grad) ** 2)) < cfg.eps_epi
        if settled or l > cfg.l_max:
            break
        prev_grad = grad
        edges = EdgeWeights(update_edge_weights(edges.d, L, rho_l), l + 1)
        l += 1
    rho = np.clip(rho_l, 0.0, None)
    K, rhs = stacked_system(ops, g_A, g_C, p_hat, rho, edges.weighted(L), lam, w1, w2)
    return DensityResult(rho, rhs - K @ rho, edges, fp_counts, fp_ok, l, n_lsqr)


def weighted_noise(w1, w2, n_C, n_A, sigma_C, sigma_A):
    """``(tau, sigma2)`` for the discrepancy function of the stacked problem.

    Only datasets with a nonzero weight count towards ``tau``; ``sigma2`` is
    the per-element variance of the weighted data noise.
    """
    tau = (n_C if w1 > 0 else 0) + (n_A if w2 > 0 else 0)
    if tau == 0:
        raise ValueError("no weighted data")
    return tau, (w1 * n_C * sigma_C**2 + w2 * n_A * sigma_A**2) / tau


@dataclass
class ScaleRecord:
    n: int
    lam: float
    rho: np.ndarray
    result: DensityResult
    F: list | None = None
    candidates: list | None = None


def multiscale_density(geom: ScanGeometry, g_A, g_C, w1, w2, cfg: ReconConfig, sigma_A: float = 0.0,
                       sigma_C: float = 0.0, operators: dict | None = None, start=None, on_scale=None):
    """Coarse-to-fine density estimate with ``p = 0``.

    Starts from the constant ``cfg.rho_init`` on the coarsest grid; each
    scale's answer is upscaled by nearest neighbour to seed the next.  When
    ``cfg.lambda_rho`` is ``None`` every scale picks its weight from
    ``cfg.lambda_grid`` by the discrepancy principle.

    Parameters
    ----------
    operators : dict, optional
        ``{n: ScaleOperators}`` cache, filled as needed.
    start : (int, ndarray), optional
        Resume after the scale at this index with its density estimate.
    on_scale : callable, optional
        Called with each :class:`ScaleRecord` once its scale is finished.

    Returns
    -------
    list of ScaleRecord
    """
    from .selection import select_lambda

    operators = {} if operators is None else operators
    g_A = np.asarray(g_A, dtype=float)
    g_C = np.asarray(g_C, dtype=float)
    tau, sigma2 = weighted_noise(w1, w2, g_C.size, g_A.size, sigma_C, sigma_A)
    records = []
    first = 0
    rho = np.full(cfg.scales[0] ** 2, cfg.rho_init)
    if start is not None:
        first = start[0] + 1
        rho = upscale_nearest(start[1], cfg.scales[first]) if first < len(cfg.scales) else start[1]
    for k in range(first, len(cfg.scales)):
        n = cfg.scales[k]
        if n not in operators:
            operators[n] = ScaleOperators.build(geom.with_grid(geom.grid.with_size(n)), cfg.kappa)
        ops = operators[n]
        rho0 = upscale_nearest(rho, n)
        p0 = np.zeros(n * n)
        if cfg.lambda_rho is not None:
            res = solve_density_scale(ops, g_A, g_C, p0, rho0, cfg.lambda_rho, w1, w2, cfg)
            rec = ScaleRecord(n, cfg.lambda_rho, res.rho, res)
        else:
            def fn(lam):
                res = solve_density_scale(ops, g_A, g_C, p0, rho0, lam, w1, w2, cfg)
                return res.residual, res

            sel = select_lambda(cfg.lambda_grid, fn, tau, sigma2, cfg.lambda_search)
            rec = ScaleRecord(n, sel.lam, sel.payload.rho, sel.payload, sel.F.tolist(), sel.candidates.tolist())
        logger.info("scale %d: lambda_rho=%g, outer=%d, fp=%s", n, rec.lam, rec.result.outer_iterations,
                    rec.result.fp_iterations)
        records.append(rec)
        rho = rec.rho
        if on_scale is not None:
            on_scale(k, rec)
    return records
