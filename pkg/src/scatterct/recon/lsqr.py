"""Thin, validated wrapper around the sparse LSQR iteration."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr


class SolverError(RuntimeError):
    """A linear or nonlinear solve could not produce a finite answer."""


def lsqr_solve(K, rhs, tol: float = 1e-10, max_iter: int = 2000, x0=None, scale_columns: bool = False):
    """Least-squares solution of ``K x ~ rhs``.

    Parameters
    ----------
    K : sparse matrix or LinearOperator
        Must support ``@`` and the transposed product.
    rhs : array_like
    tol : float
        Relative residual-reduction tolerance (LSQR ``atol`` and ``btol``).
    max_iter : int
    x0 : array_like, optional
        Warm start.  Without it (and without column scaling) the
        minimum-norm minimizer is returned.  A zero ``rhs`` returns zeros.
    scale_columns : bool
        Run LSQR on ``K diag(1/c)`` with ``c`` the column norms of a sparse
        ``K``; same minimizers, usually fewer iterations.

    Returns
    -------
    x : ndarray
    info : dict
        ``iterations``, ``residual_norm`` and the LSQR stop code ``istop``.
    """
    rhs = np.asarray(rhs, dtype=float).ravel()
    if rhs.size != K.shape[0]:
        raise ValueError(f"rhs has {rhs.size} entries, operator has {K.shape[0]} rows")
    if not np.all(np.isfinite(rhs)):
        raise SolverError("non-finite right-hand side")
    data = getattr(K, "data", None)
    if data is not None and not np.all(np.isfinite(data)):
        raise SolverError("non-finite operator entries")
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float).ravel()
        if not np.all(np.isfinite(x0)):
            x0 = None
    if not np.any(rhs):
        return np.zeros(K.shape[1]), {"iterations": 0, "residual_norm": 0.0, "istop": 0}
    scale = None
    if scale_columns and sp.issparse(K):
        scale = np.sqrt(np.asarray(K.multiply(K).sum(axis=0)).ravel())
        scale[scale == 0] = 1.0
        K = K @ sp.diags(1.0 / scale)
        x0 = None if x0 is None else x0 * scale
    out = lsqr(K, rhs, atol=tol, btol=tol, conlim=0, iter_lim=max_iter, x0=x0)
    x = out[0] if scale is None else out[0] / scale
    if not np.all(np.isfinite(x)):
        raise SolverError("LSQR produced non-finite values")
    return x, {"iterations": int(out[2]), "residual_norm": float(out[3]), "istop": int(out[1])}
