"""Smoothness and non-local penalties: the gradient operator, the
multiplicative edge-weight update, and patch-similarity (NLM) weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage


def first_difference(n: int) -> sp.csr_matrix:
    """(n-1, n) matrix with -1 on the diagonal and +1 above it."""
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


def gradient_operator(n: int) -> sp.csr_matrix:
    """Stacked horizontal and vertical first differences of an ``n x n`` image
    in row-major pixel order, shape ``(2 n (n-1), n^2)``."""
    D = first_difference(n)
    I = sp.identity(n, format="csr")
    return sp.vstack([sp.kron(I, D), sp.kron(D, I)], format="csr")


@dataclass
class EdgeWeights:
    """Diagonal of the smoothness weighting; 1 smooths, 0 marks an edge."""

    d: np.ndarray
    l: int = 1

    @classmethod
    def ones(cls, size: int) -> "EdgeWeights":
        return cls(np.ones(size), 1)

    def weighted(self, L: sp.spmatrix) -> sp.csr_matrix:
        return sp.diags(self.d) @ L


def edge_profile(t):
    """``f(t) = 1 - t^2``: decreasing on [0, 1] with ``f(0) = 1, f(1) = 0``."""
    return 1.0 - np.square(t)


def update_edge_weights(d, L, rho) -> np.ndarray:
    """One multiplicative edge-weight step.

    ``d_i <- d_i f([D L rho]_i / ||D L rho||_inf)``; unchanged when the
    weighted gradient vanishes identically.
    """
    d = np.asarray(d, dtype=float)
    v = d * (L @ np.asarray(rho, dtype=float))
    vmax = np.max(np.abs(v)) if v.size else 0.0
    if vmax == 0.0:
        return d.copy()
    return np.clip(d * edge_profile(v / vmax), 0.0, 1.0)


def _gaussian_patch(size: int) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1)
    sigma = max(r / 2.0, 0.5)
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


@dataclass
class NlmWeights:
    """Row-stochastic patch-similarity matrix built from a reference image."""

    W: sp.csr_matrix

    @property
    def residual_operator(self) -> sp.csr_matrix:
        """``I - W``, which annihilates constant images."""
        return (sp.identity(self.W.shape[0], format="csr") - self.W).tocsr()


def nlm_weights(I_ref, patch: int = 5, search: int = 11, bandwidth: float | None = None,
                bandwidth_frac: float = 0.1) -> NlmWeights:
    """Non-local means weights over a square search window.

    The distance between pixels is the Gaussian-weighted mean squared
    difference of the (reflect-padded) patches around them; the weight is
    ``exp(-dist / h^2)``.  ``h`` defaults to ``bandwidth_frac`` times the
    dynamic range of ``I_ref``; a flat reference gives uniform rows.
    """
    img = np.asarray(I_ref, dtype=float)
    if img.ndim == 1:
        n = int(round(np.sqrt(img.size)))
        if n * n != img.size:
            raise ValueError("reference vector is not a square image")
        img = img.reshape(n, n)
    ny, nx = img.shape
    if bandwidth is None:
        bandwidth = bandwidth_frac * float(img.max() - img.min())
    kernel = _gaussian_patch(patch)
    pad = patch // 2
    r = search // 2
    big = np.pad(img, pad + r, mode="reflect")
    base = big[r: r + ny + 2 * pad, r: r + nx + 2 * pad]
    iy, ix = np.mgrid[0:ny, 0:nx]
    rows, cols, vals = [], [], []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ty, tx = iy + dy, ix + dx
            valid = (ty >= 0) & (ty < ny) & (tx >= 0) & (tx < nx)
            if bandwidth > 0:
                moved = big[r + dy: r + dy + ny + 2 * pad, r + dx: r + dx + nx + 2 * pad]
                dist = ndimage.correlate((base - moved) ** 2, kernel, mode="constant")
                dist = dist[pad: pad + ny, pad: pad + nx]
                w = np.exp(-dist / bandwidth**2)
            else:
                w = np.ones((ny, nx))
            rows.append((iy * nx + ix)[valid])
            cols.append((ty * nx + tx)[valid])
            vals.append(w[valid])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    W = sp.csr_matrix((vals, (rows, cols)), shape=(ny * nx, ny * nx))
    W = sp.diags(1.0 / np.asarray(W.sum(axis=1)).ravel()) @ W
    return NlmWeights(W.tocsr())
