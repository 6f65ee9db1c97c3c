"""Photoelectric solver: NLM-regularized nonlinear least squares by
Levenberg-Marquardt with the analytic scatter Jacobian."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from ..forward import ScatterAssembly, ScatterSystem
from .config import ReconConfig
from .density import ScaleOperators
from .lsqr import SolverError
from .regularization import NlmWeights

logger = logging.getLogger(__name__)


def scatter_jacobian_p(assembly: ScatterAssembly | ScatterSystem, rho_hat, p) -> sp.csr_matrix:
    """Derivative of the scatter data ``K_C(rho_hat, p) rho_hat`` in ``p``.

    Every event contributes its attenuated weight times
    ``-(E0/E')^3 a_out - (E0/E_S)^3 a_in``, with ``a_in`` and ``a_out`` the
    path-length rows of the incoming and outgoing legs.
    """
    system = assembly.system if isinstance(assembly, ScatterAssembly) else assembly
    return system.jacobian_p(rho_hat, p)


class PhotoelectricProblem:
    """Stacked residual ``f(p)`` and Jacobian for fixed density.

    ``f = [sqrt(w1)(g_C - K_C(rho, p) rho); sqrt(w2)(g_A - K_rho rho - K_p p);
    sqrt(lam)(I - W) p]``.
    """

    def __init__(self, ops: ScaleOperators, g_A, g_C, rho_hat, nlm: NlmWeights, lam: float, w1: float, w2: float):
        self.ops = ops
        self.rho = np.asarray(rho_hat, dtype=float).ravel()
        self.g_C = np.asarray(g_C, dtype=float)
        self.w1, self.w2, self.lam = float(w1), float(w2), float(lam)
        self.R = nlm.residual_operator
        self.b_A = np.asarray(g_A, dtype=float) - ops.K_rho @ self.rho

    def residual(self, p) -> np.ndarray:
        parts = []
        if self.w1 > 0:
            parts.append(np.sqrt(self.w1) * (self.g_C - self.ops.scatter.forward(self.rho, p)))
        if self.w2 > 0:
            parts.append(np.sqrt(self.w2) * (self.b_A - self.ops.K_p @ p))
        parts.append(np.sqrt(self.lam) * (self.R @ p))
        return np.concatenate(parts)

    def jacobian(self, p) -> sp.csr_matrix:
        blocks = []
        if self.w1 > 0:
            blocks.append(-np.sqrt(self.w1) * scatter_jacobian_p(self.ops.scatter, self.rho, p))
        if self.w2 > 0:
            blocks.append(-np.sqrt(self.w2) * self.ops.K_p)
        blocks.append(np.sqrt(self.lam) * self.R)
        return sp.vstack(blocks, format="csr")


@dataclass
class LMResult:
    """``status`` is ``"converged"``, ``"max_iter"`` or ``"stalled"``."""

    p: np.ndarray
    residual: np.ndarray
    status: str
    iterations: int
    costs: list = field(default_factory=list)


def levenberg_marquardt(fun, jac, x0, tau: float = 1e-3, max_iter: int = 50, step_tol: float = 1e-8,
                        max_rejects: int = 20) -> LMResult:
    """Minimize ``||fun(x)||^2``.

    Damping starts at ``tau * mean(diag(J^T J))`` and is multiplied by 10
    after a rejected step and divided by 10 after an accepted one.  Stops on
    a relative step below ``step_tol``, after ``max_iter`` accepted steps,
    or after ``max_rejects`` consecutive rejections (returning the best
    point with status ``"stalled"``).
    """
    x = np.asarray(x0, dtype=float).copy()
    f = fun(x)
    cost = float(f @ f)
    if not np.isfinite(cost):
        raise SolverError("non-finite residual at the starting point")
    costs = [cost]
    J = jac(x)
    A = (J.T @ J).toarray() if sp.issparse(J) else J.T @ J
    g = J.T @ f
    mu = tau * float(np.mean(np.diag(A))) if A.size else tau
    mu = mu if mu > 0 else tau
    status, rejects, it = "max_iter", 0, 0
    while it < max_iter:
        if not np.any(g):
            status = "converged"
            break
        try:
            h = scipy.linalg.solve(A + mu * np.eye(x.size), -g, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            h = np.linalg.lstsq(A + mu * np.eye(x.size), -g, rcond=None)[0]
        if np.linalg.norm(h) <= step_tol * (np.linalg.norm(x) + step_tol):
            status = "converged"
            break
        x_new = x + h
        f_new = fun(x_new)
        cost_new = float(f_new @ f_new)
        if np.isfinite(cost_new) and cost_new < cost:
            x, f, cost = x_new, f_new, cost_new
            costs.append(cost)
            J = jac(x)
            A = (J.T @ J).toarray() if sp.issparse(J) else J.T @ J
            g = J.T @ f
            mu /= 10.0
            rejects = 0
            it += 1
        else:
            mu *= 10.0
            rejects += 1
            if rejects >= max_rejects:
                status = "stalled"
                warnings.warn("Levenberg-Marquardt could not reduce the residual", RuntimeWarning, stacklevel=2)
                break
    return LMResult(x, f, status, it, costs)


def solve_photoelectric(ops: ScaleOperators, g_A, g_C, rho_hat, nlm: NlmWeights, p_init, lam: float, w1: float,
                        w2: float, cfg: ReconConfig) -> LMResult:
    """Photoelectric image for fixed density.

    Parameters
    ----------
    ops : ScaleOperators
        Operators on the density grid.
    g_A, g_C : ndarray
    rho_hat : ndarray
        Density held fixed.
    nlm : NlmWeights
        Weights built from the reference density image.
    p_init : ndarray
    lam : float
        NLM penalty weight.
    w1, w2 : float
    cfg : ReconConfig

    Returns
    -------
    LMResult
        ``p`` is projected onto ``p >= 0`` and ``residual`` re-evaluated there.
    """
    prob = PhotoelectricProblem(ops, g_A, g_C, rho_hat, nlm, lam, w1, w2)
    p0 = np.asarray(p_init, dtype=float).ravel()
    if p0.size != ops.n_pixels:
        raise ValueError(f"p_init must have {ops.n_pixels} entries")
    res = levenberg_marquardt(prob.residual, prob.jacobian, p0, cfg.lm_tau, cfg.lm_max_iter, cfg.lm_step_tol,
                              cfg.lm_max_rejects)
    p = np.clip(res.p, 0.0, None)
    res.residual = prob.residual(p) if np.any(p != res.p) else res.residual
    res.p = p
    logger.info("photoelectric LM: %s after %d steps, cost %.4g", res.status, res.iterations, res.costs[-1])
    return res
