"""On-disk formats: the sinogram container, grayscale/CSV rasters and
hash-chained manifests."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .forward import SinogramSet

MAGIC = b"SCTSINO1"
DENSITY_WINDOW = (0.0, 2.4)
PHOTO_WINDOW = (0.0, 0.6)


class DataError(ValueError):
    """Inputs on disk are missing, corrupt or inconsistent with each other."""


def _clean(obj):
    """Replace non-finite floats by ``None`` so the result is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: missing") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- sinograms ---------------------------------------------------------------


def write_sinograms(path, sino: SinogramSet):
    """Magic, little-endian uint32 header length, JSON header, then ``g_A``
    and ``g_C`` as little-endian float64."""
    header = {
        "geometry_hash": sino.geometry_hash,
        "n_primary": sino.n_primary,
        "n_atten_bins": sino.n_atten_bins,
        "n_secondary_slots": sino.n_secondary_slots,
        "n_scatter_bins": sino.n_scatter_bins,
        "sigma_A": sino.sigma_A,
        "sigma_C": sino.sigma_C,
        "seed": sino.seed,
        "meta": sino.meta,
        "index": {
            "g_A": "i * n_atten_bins + m",
            "g_C": "(i * n_secondary_slots + j) * n_scatter_bins + m",
        },
        "len_g_A": int(sino.g_A.size),
        "len_g_C": int(sino.g_C.size),
    }
    blob = json.dumps(_clean(header), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(sino.g_A.astype("<f8").tobytes())
        fh.write(sino.g_C.astype("<f8").tobytes())


def read_sinograms(path) -> SinogramSet:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path}: missing") from None
    if raw[:8] != MAGIC or len(raw) < 12:
        raise DataError(f"{path}: not a sinogram container")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt header ({exc.msg})") from None
    na, nc = header["len_g_A"], header["len_g_C"]
    body = raw[12 + hlen:]
    if len(body) != 8 * (na + nc):
        raise DataError(f"{path}: payload has {len(body)} bytes, header implies {8 * (na + nc)}")
    arr = np.frombuffer(body, dtype="<f8").astype(float)
    try:
        return SinogramSet(
            arr[:na], arr[na:], header["n_primary"], header["n_atten_bins"], header["n_secondary_slots"],
            header["n_scatter_bins"], header["sigma_A"] or 0.0, header["sigma_C"] or 0.0, header["seed"],
            header["geometry_hash"], header.get("meta") or {},
        )
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


# -- rasters -----------------------------------------------------------------


def to_display(img, window) -> np.ndarray:
    """Clamp to ``window`` and map linearly onto 0..65535."""
    lo, hi = window
    x = (np.clip(np.asarray(img, dtype=float), lo, hi) - lo) / (hi - lo)
    return np.round(x * 65535).astype(np.uint16)


def write_pgm(path, img, window):
    """16-bit binary PGM of a row-major image whose row 0 is the bottom."""
    a = np.asarray(img, dtype=float)
    if a.ndim == 1:
        n = int(round(math.sqrt(a.size)))
        a = a.reshape(n, n)
    pix = to_display(a[::-1], window)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(pix.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    """Raw 16-bit values, row 0 at the bottom."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    pix = np.frombuffer(parts[4][: w * h * np.dtype(dtype).itemsize], dtype=dtype).reshape(h, w)
    return pix[::-1].astype(np.int64)


def write_csv_raster(path, img):
    a = np.asarray(img, dtype=float)
    if a.ndim == 1:
        n = int(round(math.sqrt(a.size)))
        a = a.reshape(n, n)
    np.savetxt(path, a, delimiter=",", fmt="%.17g")


def read_csv_raster(path) -> np.ndarray:
    try:
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))
    except OSError:
        raise DataError(f"{path}: missing") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


# -- manifests ---------------------------------------------------------------


def write_manifest(directory, kind: str, files, parents=(), extra=None) -> dict:
    """Record file hashes and a chain hash over the parents' chains.

    ``chain = sha256(kind, sorted parent chains, sorted (name, hash))`` so a
    downstream step can tell whether its inputs came from one lineage.
    """
    directory = Path(directory)
    hashes = {str(Path(f).relative_to(directory)): file_sha256(f) for f in files}
    parent_chains = sorted(p["chain"] for p in parents)
    h = hashlib.sha256(kind.encode())
    for c in parent_chains:
        h.update(c.encode())
    for name in sorted(hashes):
        h.update(name.encode())
        h.update(hashes[name].encode())
    manifest = {"kind": kind, "files": hashes, "parents": parent_chains, "chain": h.hexdigest()}
    if extra:
        manifest.update(extra)
    write_json(directory / "manifest.json", manifest)
    return _clean(manifest)


def read_manifest(directory, verify: bool = True) -> dict:
    directory = Path(directory)
    m = read_json(directory / "manifest.json")
    if verify:
        for name, digest in m.get("files", {}).items():
            f = directory / name
            if not f.exists():
                raise DataError(f"{f}: listed in manifest but missing")
            if file_sha256(f) != digest:
                raise DataError(f"{f}: content differs from its manifest hash")
    return m
