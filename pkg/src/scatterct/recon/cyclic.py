"""Alternating density / photoelectric reconstruction with checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..forward import MaterialMap, SinogramSet
from ..geometry import ScanGeometry
from .config import ReconConfig
from .density import (
    ScaleOperators, data_weights, multiscale_density, solve_density_scale, upscale_nearest, weighted_noise,
)
from .photoelectric import solve_photoelectric
from .regularization import nlm_weights
from .selection import select_lambda

logger = logging.getLogger(__name__)


def _rmse(est, truth) -> float | None:
    if truth is None:
        return None
    from ..evaluation import rmse

    est = np.asarray(est, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if est.size != truth.size:
        est = upscale_nearest(est, int(round(np.sqrt(truth.size))))
    return rmse(est, truth)


@dataclass
class CyclicResult:
    """Final images on the finest recon grid plus a JSON-ready trace."""

    rho: np.ndarray
    p: np.ndarray
    trace: dict
    scale_images: list = field(default_factory=list)
    cycle_images: list = field(default_factory=list)


class _Checkpoints:
    """Per-scale and per-cycle ``.npz`` snapshots tagged with a run key."""

    def __init__(self, directory, key: str):
        self.dir = Path(directory) if directory is not None else None
        self.key = key
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            stamp = self.dir / "run_key.txt"
            if stamp.exists() and stamp.read_text().strip() != key:
                logger.warning("checkpoints in %s belong to another run; starting over", self.dir)
                for f in self.dir.glob("*.npz"):
                    f.unlink()
            stamp.write_text(key)

    def save(self, name: str, meta: dict, **arrays):
        if self.dir is None:
            return
        tmp = self.dir / f"{name}.tmp.npz"
        np.savez(tmp, meta=json.dumps(meta), **arrays)
        tmp.replace(self.dir / f"{name}.npz")

    def load(self, name: str):
        if self.dir is None or not (self.dir / f"{name}.npz").exists():
            return None
        with np.load(self.dir / f"{name}.npz") as z:
            out = {k: z[k] for k in z.files if k != "meta"}
            out["meta"] = json.loads(str(z["meta"]))
        return out


def _run_key(data: SinogramSet, cfg: ReconConfig, w1, w2) -> str:
    h = hashlib.sha256()
    h.update(data.geometry_hash.encode())
    h.update(np.ascontiguousarray(data.g_A).tobytes())
    h.update(np.ascontiguousarray(data.g_C).tobytes())
    h.update(json.dumps(cfg.to_dict(), sort_keys=True, default=str).encode())
    h.update(repr((w1, w2)).encode())
    return h.hexdigest()


def cyclic_descent(geom: ScanGeometry, data: SinogramSet, cfg: ReconConfig, truth: MaterialMap | None = None,
                   checkpoint_dir=None) -> CyclicResult:
    """Cyclic coordinate descent over density and photoelectric images.

    Cycle 1 builds the density coarse-to-fine with ``p = 0``, takes it as
    the NLM reference image and solves for ``p`` from zero.  Later cycles
    re-solve density on the finest grid (warm start) and then ``p``
    (warm start), stopping once
    ``||rho_n - rho_{n-1}||^2 < eps (1 + ||rho_{n-1}||^2)``.

    Parameters
    ----------
    geom : ScanGeometry
        Acquisition geometry; its grid only fixes the extent, the recon
        grids come from ``cfg.scales``.
    data : SinogramSet
    cfg : ReconConfig
    truth : MaterialMap, optional
        Enables RMSE entries in the trace.
    checkpoint_dir : path, optional
        Completed scales and cycles are saved here and reused on rerun.

    Returns
    -------
    CyclicResult
    """
    if data.geometry_hash and data.geometry_hash != geom.hash():
        raise ValueError("data were simulated with a different geometry")
    g_A, g_C = data.g_A, data.g_C
    n_fine = cfg.scales[-1]
    t_rho = None if truth is None else truth.rho
    t_p = None if truth is None else truth.p
    trace = {"mode": cfg.mode, "scales": [], "cycles": [], "converged_at": None}

    if not np.any(g_A) and not np.any(g_C):
        zero = np.zeros(n_fine * n_fine)
        trace.update(w1=0.0, w2=0.0, lambda_rho=None, lambda_p=None, converged_at=1, status="zero_data")
        trace["cycles"].append({"n": 1, "rmse_rho": _rmse(zero, t_rho), "rmse_p": _rmse(zero, t_p)})
        return CyclicResult(zero, zero.copy(), trace)

    if cfg.w1 is not None and cfg.w2 is not None:
        w1, w2 = cfg.w1, cfg.w2
    else:
        w1, w2 = data_weights(g_A, g_C, cfg.mode)
    tau, sigma2 = weighted_noise(w1, w2, g_C.size, g_A.size, data.sigma_C, data.sigma_A)
    trace.update(w1=w1, w2=w2, tau=tau, sigma2=sigma2)
    ckpt = _Checkpoints(checkpoint_dir, _run_key(data, cfg, w1, w2))
    operators: dict[int, ScaleOperators] = {}
    result = CyclicResult(None, None, trace)

    # -- cycle 1, density: coarse to fine ---------------------------------
    done = []
    for k in range(len(cfg.scales)):
        c = ckpt.load(f"scale_{k}")
        if c is None:
            break
        done.append(c)
    for c in done:
        trace["scales"].append(c["meta"])
        result.scale_images.append(c["rho"])

    def on_scale(k, rec):
        entry = {
            "n": rec.n, "lambda_rho": rec.lam, "candidates": rec.candidates, "F": rec.F,
            "fp_iterations": rec.result.fp_iterations, "outer_iterations": rec.result.outer_iterations,
            "lsqr_iterations": rec.result.lsqr_iterations, "rmse_rho": _rmse(rec.rho, t_rho),
        }
        trace["scales"].append(entry)
        result.scale_images.append(rec.rho)
        ckpt.save(f"scale_{k}", entry, rho=rec.rho)

    if len(done) < len(cfg.scales):
        start = (len(done) - 1, done[-1]["rho"]) if done else None
        multiscale_density(geom, g_A, g_C, w1, w2, cfg, data.sigma_A, data.sigma_C, operators, start, on_scale)
    lam_rho = trace["scales"][-1]["lambda_rho"]
    rho_1 = result.scale_images[-1]
    trace["lambda_rho"] = lam_rho

    if n_fine not in operators:
        operators[n_fine] = ScaleOperators.build(geom.with_grid(geom.grid.with_size(n_fine)), cfg.kappa)
    ops = operators[n_fine]
    nlm = nlm_weights(rho_1, cfg.nlm_patch, cfg.nlm_search, bandwidth_frac=cfg.nlm_bandwidth_frac)

    def photo(rho, p_init, lam):
        return solve_photoelectric(ops, g_A, g_C, rho, nlm, p_init, lam, w1, w2, cfg)

    # -- resume from the latest finished cycle ---------------------------
    cycles = []
    n = 1
    while (c := ckpt.load(f"cycle_{n}")) is not None:
        cycles.append(c)
        n += 1
    if cycles:
        for c in cycles:
            trace["cycles"].append(c["meta"])
            result.cycle_images.append((c["rho"], c["p"]))
        trace["lambda_p"] = cycles[0]["meta"]["lambda_p"]
        trace["lambda_p_F"] = cycles[0]["meta"].get("lambda_p_F")
        rho, p = cycles[-1]["rho"], cycles[-1]["p"]
        if cycles[-1]["meta"].get("converged"):
            trace["converged_at"] = cycles[-1]["meta"]["n"]
            trace["status"] = "converged"
            result.rho, result.p = rho, p
            return result
    else:
        # -- cycle 1, photoelectric -----------------------------------------
        p0 = np.zeros(n_fine * n_fine)
        if cfg.lambda_p is not None:
            lam_p, lm = cfg.lambda_p, photo(rho_1, p0, cfg.lambda_p)
            F_p = None
        else:
            def fn(lam):
                res = photo(rho_1, p0, lam)
                return res.residual, res

            sel = select_lambda(cfg.lambda_grid, fn, tau, sigma2, cfg.lambda_search)
            lam_p, F_p, lm = sel.lam, sel.F.tolist(), sel.payload
        trace["lambda_p"] = lam_p
        trace["lambda_p_F"] = F_p
        rho, p = rho_1, lm.p
        entry = _cycle_entry(1, rho, p, lm, None, t_rho, t_p, lam_rho, lam_p, False)
        entry["lambda_p_F"] = F_p
        trace["cycles"].append(entry)
        result.cycle_images.append((rho, p))
        ckpt.save("cycle_1", entry, rho=rho, p=p)
    lam_p = trace["lambda_p"]

    # -- later cycles ----------------------------------------------------
    status = "max_cycles"
    for n in range(len(trace["cycles"]) + 1, cfg.max_cycles + 1):
        dres = solve_density_scale(ops, g_A, g_C, p, rho, lam_rho, w1, w2, cfg)
        change = float(np.sum((dres.rho - rho) ** 2))
        converged = change < cfg.eps_cyclic * (1.0 + float(np.sum(rho**2)))
        lm = photo(dres.rho, p, lam_p)
        rho, p = dres.rho, lm.p
        entry = _cycle_entry(n, rho, p, lm, dres, t_rho, t_p, lam_rho, lam_p, converged)
        entry["density_change"] = change
        trace["cycles"].append(entry)
        result.cycle_images.append((rho, p))
        ckpt.save(f"cycle_{n}", entry, rho=rho, p=p)
        if converged:
            status = "converged"
            trace["converged_at"] = n
            break
    trace["status"] = status
    result.rho, result.p = rho, p
    return result


def _cycle_entry(n, rho, p, lm, dres, t_rho, t_p, lam_rho, lam_p, converged) -> dict:
    entry = {
        "n": n,
        "lambda_rho": lam_rho,
        "lambda_p": lam_p,
        "objective": float(np.dot(lm.residual, lm.residual)),
        "lm_status": lm.status,
        "lm_iterations": lm.iterations,
        "rmse_rho": _rmse(rho, t_rho),
        "rmse_p": _rmse(p, t_p),
        "converged": bool(converged),
    }
    if dres is not None:
        entry.update(fp_iterations=dres.fp_iterations, outer_iterations=dres.outer_iterations,
                     lsqr_iterations=dres.lsqr_iterations)
    return entry
