"""``scatterct`` command line: simulate, reconstruct, evaluate.

Exit codes: 0 success, 2 configuration error, 3 data mismatch, 4 solver
failure.  ``SCATTERCT_THREADS`` caps BLAS/OpenMP threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .config import ConfigError, load_scene, parse_scene
from .evaluation import make_phantom, material_ellipses, rmse
from .forward import MaterialMap, simulate
from .recon import SolverError, cyclic_descent

logger = logging.getLogger("scatterct")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _threads() -> int | None:
    raw = os.environ.get("SCATTERCT_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"SCATTERCT_THREADS must be a positive integer, got {raw!r}", EXIT_CONFIG) from None
    if n < 1:
        raise CliError(f"SCATTERCT_THREADS must be a positive integer, got {raw!r}", EXIT_CONFIG)
    return n


def _write_image_pair(out: Path, stem: str, rho, p):
    files = []
    for name, img, win in ((f"{stem}rho", rho, io.DENSITY_WINDOW), (f"{stem}p", p, io.PHOTO_WINDOW)):
        io.write_csv_raster(out / f"{name}.csv", img)
        io.write_pgm(out / f"{name}.pgm", img, win)
        files += [out / f"{name}.csv", out / f"{name}.pgm"]
    return files


def _load_data_dir(data_dir: Path):
    """Scene, sinograms, manifest and (if present) truth of a simulate run."""
    if not data_dir.is_dir():
        raise CliError(f"{data_dir}: not a directory", EXIT_DATA)
    try:
        manifest = io.read_manifest(data_dir)
        scene = parse_scene((data_dir / "scene.json").read_text(), data_dir / "scene.json")
        sino = io.read_sinograms(data_dir / "sinograms.bin")
    except io.DataError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    except FileNotFoundError as exc:
        raise CliError(f"{exc.filename}: missing", EXIT_DATA) from None
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    if sino.geometry_hash != scene.geometry.hash():
        raise CliError(f"{data_dir}: sinogram geometry hash does not match its scene", EXIT_DATA)
    truth = None
    if (data_dir / "truth_rho.csv").exists():
        rho = io.read_csv_raster(data_dir / "truth_rho.csv").ravel()
        p = io.read_csv_raster(data_dir / "truth_p.csv").ravel()
        truth = MaterialMap(scene.geometry.grid, rho, p)
    return scene, sino, manifest, truth


# -- commands ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    try:
        scene = load_scene(args.config)
        phantom = make_phantom(scene.phantom, scene.geometry.grid)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except ValueError as exc:
        raise CliError(f"{args.config}: phantom: {exc}", EXIT_CONFIG) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = phantom.material_map
    t0 = time.perf_counter()
    data = simulate(scene.geometry, truth, scene.snr_db, scene.seed, kappa=scene.recon.kappa)
    logger.info("simulated %d attenuation and %d scatter values in %.1fs", data.g_A.size, data.g_C.size,
                time.perf_counter() - t0)
    io.write_json(out / "scene.json", scene.raw)
    io.write_sinograms(out / "sinograms.bin", data)
    files = [out / "scene.json", out / "sinograms.bin"]
    files += _write_image_pair(out, "truth_", truth.rho, truth.p)
    io.write_manifest(out, "simulate", files, extra={
        "config_hash": scene.hash, "geometry_hash": data.geometry_hash, "sigma_A": data.sigma_A,
        "sigma_C": data.sigma_C, "seed": data.seed, "snr_db": scene.snr_db,
        "len_g_A": int(data.g_A.size), "len_g_C": int(data.g_C.size),
    })
    print(f"wrote {out} (g_A: {data.g_A.size}, g_C: {data.g_C.size}, sigma_A={data.sigma_A:.4g}, "
          f"sigma_C={data.sigma_C:.4g})")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    data_dir, out = Path(args.data), Path(args.out)
    scene, sino, manifest, truth = _load_data_dir(data_dir)
    if args.config:
        try:
            other = load_scene(args.config)
        except ConfigError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
        if other.geometry.hash() != scene.geometry.hash():
            raise CliError(f"{args.config}: geometry differs from the one that produced {data_dir}", EXIT_DATA)
        scene = other
    cfg = dataclasses.replace(scene.recon, mode=args.mode)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = None if args.no_checkpoint else out / "checkpoints"
    t0 = time.perf_counter()
    try:
        res = cyclic_descent(scene.geometry, sino, cfg, truth, checkpoint_dir=ckpt)
    except SolverError as exc:
        raise CliError(f"solver failure: {exc}", EXIT_SOLVER) from None
    elapsed = time.perf_counter() - t0
    files = _write_image_pair(out, "", res.rho, res.p)
    for k, img in enumerate(res.scale_images):
        n = cfg.scales[k]
        io.write_csv_raster(out / f"scale{n}_rho.csv", img)
        io.write_pgm(out / f"scale{n}_rho.pgm", img, io.DENSITY_WINDOW)
        files += [out / f"scale{n}_rho.csv", out / f"scale{n}_rho.pgm"]
    for k, (rho, p) in enumerate(res.cycle_images, start=1):
        files += _write_image_pair(out, f"cycle{k}_", rho, p)
    trace = dict(res.trace, elapsed_s=elapsed, config=cfg.to_dict())
    io.write_json(out / "trace.json", trace)
    io.write_json(out / "lambdas.json", {"lambda_rho": trace.get("lambda_rho"), "lambda_p": trace.get("lambda_p")})
    files += [out / "trace.json", out / "lambdas.json"]
    io.write_manifest(out, "reconstruct", files, parents=[manifest], extra={
        "mode": args.mode, "data_chain": manifest["chain"], "grid_n": cfg.scales[-1],
    })
    print(f"wrote {out} (mode={args.mode}, cycles={len(res.cycle_images)}, {elapsed:.1f}s)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth_dir, out = Path(args.truth), Path(args.out)
    scene, _, data_manifest, truth = _load_data_dir(truth_dir)
    if truth is None:
        raise CliError(f"{truth_dir}: no ground-truth rasters", EXIT_DATA)
    phantom = make_phantom(scene.phantom, scene.geometry.grid)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {"truth": str(truth_dir), "runs": {}}
    rows = []
    for rdir in map(Path, args.recon):
        try:
            m = io.read_manifest(rdir)
            rho = io.read_csv_raster(rdir / "rho.csv").ravel()
            p = io.read_csv_raster(rdir / "p.csv").ravel()
            trace = io.read_json(rdir / "trace.json")
        except io.DataError as exc:
            raise CliError(str(exc), EXIT_DATA) from None
        if data_manifest["chain"] not in m.get("parents", []):
            raise CliError(f"{rdir}: reconstruction was not made from {truth_dir}", EXIT_DATA)
        if rho.size != truth.rho.size:
            raise CliError(f"{rdir}: grid of {rho.size} pixels, truth has {truth.rho.size}", EXIT_DATA)
        mode = m.get("mode", rdir.name)
        entry = {
            "mode": mode,
            "rmse_rho": rmse(rho, truth.rho),
            "rmse_p": rmse(p, truth.p),
            "scales": [{"n": s["n"], "rmse_rho": s.get("rmse_rho")} for s in trace.get("scales", [])],
            "cycles": [],
        }
        k = 1
        while (rdir / f"cycle{k}_rho.csv").exists():
            cr = io.read_csv_raster(rdir / f"cycle{k}_rho.csv").ravel()
            cp = io.read_csv_raster(rdir / f"cycle{k}_p.csv").ravel()
            entry["cycles"].append({"n": k, "rmse_rho": rmse(cr, truth.rho), "rmse_p": rmse(cp, truth.p)})
            k += 1
        tag = mode if mode not in metrics["runs"] else f"{mode}_{len(metrics['runs'])}"
        rep = material_ellipses(rho, p, phantom, out / f"ellipses_{tag}.csv", out / f"ellipses_{tag}.svg")
        entry["ellipses"] = [dataclasses.asdict(r) for r in rep.rows]
        _write_image_pair(out, f"{tag}_", rho, p)
        metrics["runs"][tag] = entry
        rows.append((tag, entry["rmse_rho"], entry["rmse_p"]))
    _write_image_pair(out, "truth_", truth.rho, truth.p)
    modes = {r[0] for r in rows}
    if {"atten", "scatter", "both"} <= modes:
        lines = ["| mode | rmse_rho | rmse_p |", "|---|---|---|"]
        lines += [f"| {t} | {a:.4g} | {b:.4g} |" for t, a, b in rows]
        (out / "comparison.md").write_text("\n".join(lines) + "\n")
        with open(out / "comparison.csv", "w") as fh:
            fh.write("mode,rmse_rho,rmse_p\n")
            for t, a, b in rows:
                fh.write(f"{t},{a:.10g},{b:.10g}\n")
        metrics["comparison"] = [{"mode": t, "rmse_rho": a, "rmse_p": b} for t, a, b in rows]
        print("\n".join(lines))
    io.write_json(out / "metrics.json", metrics)
    for t, a, b in rows:
        print(f"{t}: rmse_rho={a:.4g} rmse_p={b:.4g}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scatterct", description="Joint attenuation/scatter X-ray reconstruction.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="simulate sinograms from a scene config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)
    r = sub.add_parser("reconstruct", help="reconstruct density and photoelectric images")
    r.add_argument("--data", required=True)
    r.add_argument("--mode", choices=("atten", "scatter", "both"), default="both")
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="override the recon settings stored with the data")
    r.add_argument("--no-checkpoint", action="store_true", help="do not write or reuse checkpoints")
    r.set_defaults(func=cmd_reconstruct)
    e = sub.add_parser("evaluate", help="score reconstructions against ground truth")
    e.add_argument("--recon", required=True, nargs="+")
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    c = sub.add_parser("scene", help="copy a shipped scene config (paper or desk)")
    c.add_argument("name", choices=("paper", "desk"))
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_scene)
    return ap


def cmd_scene(args) -> int:
    from .config import builtin_scene_path

    shutil.copyfile(builtin_scene_path(args.name), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        n = _threads()
        with threadpool_limits(limits=n):
            return args.func(args)
    except CliError as exc:
        print(f"scatterct: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
