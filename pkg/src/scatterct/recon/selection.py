"""Discrepancy-principle choice of a regularization weight."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .lsqr import SolverError

logger = logging.getLogger(__name__)


@dataclass
class Selection:
    """Winning weight, its payload, and ``F`` for every candidate
    (``nan`` where the solve failed)."""

    lam: float
    payload: object
    candidates: np.ndarray
    F: np.ndarray
    index: int
    extra: dict = field(default_factory=dict)


def discrepancy(residual, tau: int, sigma2: float) -> float:
    """``||r||^2 / tau - sigma^2``."""
    r = np.asarray(residual, dtype=float)
    return float(np.dot(r, r)) / tau - sigma2


def select_lambda(candidates, residual_fn, tau: int, sigma2: float, search: str = "full") -> Selection:
    """Return the candidate whose discrepancy is closest to zero.

    Parameters
    ----------
    candidates : sequence of float
    residual_fn : callable
        ``residual_fn(lam)`` returns the stacked regularized residual, or a
        ``(residual, payload)`` pair; the payload of the winner is kept.
        Raising :class:`SolverError` disqualifies that candidate.
    tau : int
        Number of data elements.
    sigma2 : float
        Noise variance.
    search : {"full", "descending"}
        ``"full"`` evaluates every candidate.  ``"descending"`` walks from
        the largest weight down and stops at the first failed solve, or once
        ``F`` is negative and ``|F|`` exceeds the best so far.  Both give the
        same winner when failures only occur below some weight and ``|F|``
        has a single minimum along the grid; skipped candidates get
        ``F = nan``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if search not in ("full", "descending"):
        raise ValueError(f"unknown search {search!r}")
    cands = np.asarray(list(candidates), dtype=float)
    if cands.size == 0:
        raise ValueError("no candidates")
    F = np.full(cands.size, np.nan)
    order = np.argsort(-cands, kind="stable") if search == "descending" else range(cands.size)
    best, best_payload = None, None
    for k in order:
        lam = cands[k]
        try:
            out = residual_fn(lam)
        except SolverError as exc:
            logger.warning("lambda=%g rejected: %s", lam, exc)
            if search == "descending" and best is not None:
                break
            continue
        r, payload = out if isinstance(out, tuple) else (out, None)
        F[k] = discrepancy(r, tau, sigma2)
        if not np.isfinite(F[k]):
            continue
        # ties go to the smaller weight in either search order
        if best is None or abs(F[k]) < abs(F[best]) or (abs(F[k]) == abs(F[best]) and lam < cands[best]):
            best, best_payload = k, payload
        elif search == "descending" and F[k] < 0:
            break
    if best is None:
        raise SolverError("every regularization candidate failed")
    return Selection(float(cands[best]), best_payload, cands, F, int(best))
