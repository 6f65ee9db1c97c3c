"""Scene configuration: a versioned JSON document describing geometry,
phantom, noise and reconstruction settings."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from .geometry import Detector, Grid2D, ScanGeometry, Source, paper_sources, perimeter_detectors
from .physics import EnergyBinning, Spectrum, kramers_spectrum
from .recon.config import MODES, ReconConfig

SPEC_VERSION = 1


class ConfigError(ValueError):
    """Invalid scene configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if path is not None and line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_point = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_binning = {
    "type": "object",
    "additionalProperties": False,
    "required": ["lo_kev", "hi_kev", "width_kev"],
    "properties": {"lo_kev": _num, "hi_kev": _num, "width_kev": _pos},
}
_spectrum = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kramers": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"e_max_kev": _pos, "bin_width_kev": _pos, "total": _pos},
        },
        "csv": {"type": "string"},
        "energies_kev": {"type": "array", "items": _pos, "minItems": 1},
        "intensities": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "bin_width_kev": _pos,
    },
}
_region = {
    "type": "object",
    "additionalProperties": False,
    "required": ["material"],
    "properties": {
        "name": {"type": "string"},
        "material": {
            "oneOf": [
                {"type": "string"},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["rho", "p"],
                    "properties": {"name": {"type": "string"}, "rho": {"type": "number", "minimum": 0},
                                   "p": {"type": "number", "minimum": 0}},
                },
            ]
        },
        "shape": {"enum": ["disk", "mask"]},
        "center": _point,
        "radius": _pos,
        "path": {"type": "string"},
    },
}
_recon_props = {
    "mode": {"enum": list(MODES)},
    "lambda_rho": {"type": ["number", "null"], "minimum": 0},
    "lambda_p": {"type": ["number", "null"], "minimum": 0},
    "w1": {"type": ["number", "null"], "minimum": 0},
    "w2": {"type": ["number", "null"], "minimum": 0},
    "eps_fpi": _pos, "eps_epi": _pos, "eps_cyclic": _pos, "lsqr_tol": _pos, "lm_tau": _pos, "lm_step_tol": _pos,
    "rho_init": _pos, "nlm_bandwidth_frac": _pos,
    "l_max": {"type": "integer", "minimum": 1},
    "fpi_max": {"type": "integer", "minimum": 1},
    "max_cycles": {"type": "integer", "minimum": 1},
    "lsqr_max_iter": {"type": "integer", "minimum": 1},
    "lm_max_iter": {"type": "integer", "minimum": 1},
    "lm_max_rejects": {"type": "integer", "minimum": 1},
    "nlm_patch": {"type": "integer", "minimum": 1},
    "nlm_search": {"type": "integer", "minimum": 1},
    "scales": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
    "lambda_grid": {
        "oneOf": [
            {"type": "array", "items": _pos, "minItems": 1},
            {
                "type": "object",
                "additionalProperties": False,
                "required": ["n", "lo", "hi"],
                "properties": {"n": {"type": "integer", "minimum": 1}, "lo": _pos, "hi": _pos},
            },
        ]
    },
    "kappa": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "lambda_search": {"enum": ["full", "descending"]},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["spec_version", "geometry", "phantom"],
    "properties": {
        "spec_version": {"const": SPEC_VERSION},
        "description": {"type": "string"},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "required": ["grid"],
            "properties": {
                "grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["n", "extent_cm"],
                    "properties": {"n": {"type": "integer", "minimum": 1}, "extent_cm": _pos, "origin": _point},
                },
                "sources": {
                    "oneOf": [
                        {"const": "paper"},
                        {
                            "type": "array",
                            "minItems": 1,
                            "items": {
                                "type": "object",
                                "additionalProperties": False,
                                "required": ["position"],
                                "properties": {"position": _point, "spectrum": {"type": "string"}},
                            },
                        },
                    ]
                },
                "detectors": {
                    "oneOf": [
                        {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["count"],
                            "properties": {"count": {"type": "integer", "minimum": 2}, "width_cm": _pos,
                                           "height_cm": _pos},
                        },
                        {
                            "type": "array",
                            "minItems": 2,
                            "items": {
                                "type": "object",
                                "additionalProperties": False,
                                "required": ["center", "normal"],
                                "properties": {"center": _point, "normal": _point, "width_cm": _pos,
                                               "height_cm": _pos},
                            },
                        },
                    ]
                },
                "atten_bins": _binning,
                "scatter_bins": _binning,
                "spectra": {"type": "object", "additionalProperties": _spectrum},
            },
        },
        "phantom": {
            "oneOf": [
                {"enum": ["phantom1", "phantom2"]},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["regions"],
                    "properties": {"regions": {"type": "array", "items": _region}},
                },
            ]
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"snr_db": {"type": ["number", "null"]}, "seed": {"type": "integer", "minimum": 0}},
        },
        "recon": {"type": "object", "additionalProperties": False, "properties": _recon_props},
    },
}


@dataclass
class SceneConfig:
    geometry: ScanGeometry
    phantom: object
    snr_db: float | None
    seed: int
    recon: ReconConfig
    raw: dict
    source_path: str | None = None

    @property
    def hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _locate(text: str, path) -> int | None:
    """Best-effort line of the JSON member at ``path`` (keys and indices)."""
    pos, found = 0, False
    for part in path:
        if isinstance(part, str):
            m = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
            if m is None:
                break
            pos, found = m.start(), True
    return text.count("\n", 0, pos) + 1 if found else None


def _schema_error(text, err, path):
    loc = list(err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        if extra:
            loc = loc + [extra[0]]
    where = "/".join(str(p) for p in loc) or "<root>"
    return ConfigError(f"{where}: {err.message}", path, _locate(text, loc))


def _spectrum_from(spec: dict, base: Path | None) -> Spectrum:
    if "kramers" in spec:
        k = spec["kramers"]
        return kramers_spectrum(k.get("e_max_kev", 140.0), k.get("bin_width_kev", 1.0), k.get("total", 1e6))
    if "csv" in spec:
        p = Path(spec["csv"])
        if base is not None and not p.is_absolute():
            p = base / p
        return Spectrum.from_csv(p)
    if "energies_kev" in spec:
        return Spectrum(spec["energies_kev"], spec["intensities"], spec.get("bin_width_kev", 1.0))
    raise ValueError("spectrum needs one of 'kramers', 'csv' or 'energies_kev'")


def _build(doc: dict, base: Path | None):
    g = doc["geometry"]
    grid = Grid2D(g["grid"]["n"], g["grid"]["extent_cm"], tuple(g["grid"].get("origin", (0.0, 0.0))))
    spectra = {"default": kramers_spectrum()}
    for sid, s in g.get("spectra", {}).items():
        spectra[sid] = _spectrum_from(s, base)
    src = g.get("sources", "paper")
    sources = paper_sources(grid) if src == "paper" else [
        Source(tuple(s["position"]), s.get("spectrum", "default")) for s in src
    ]
    det = g.get("detectors", {"count": 41})
    if isinstance(det, dict):
        detectors = perimeter_detectors(grid, det["count"], det.get("width_cm", 0.1), det.get("height_cm", 0.1))
    else:
        detectors = [Detector(tuple(d["center"]), d.get("width_cm", 0.1), d.get("height_cm", 0.1), tuple(d["normal"]))
                     for d in det]

    def binning(key, width):
        b = g.get(key, {"lo_kev": 20.0, "hi_kev": 120.0, "width_kev": width})
        return EnergyBinning.from_range(b["lo_kev"], b["hi_kev"], b["width_kev"])

    geom = ScanGeometry(grid, sources, detectors, binning("atten_bins", 1.0), binning("scatter_bins", 5.0), spectra)
    rc = dict(doc.get("recon", {}))
    if isinstance(rc.get("lambda_grid"), dict):
        from .recon.config import lambda_grid

        lg = rc["lambda_grid"]
        rc["lambda_grid"] = tuple(lambda_grid(lg["n"], lg["lo"], lg["hi"]))
    recon = ReconConfig(**rc)
    noise = doc.get("noise", {})
    return geom, recon, noise.get("snr_db"), int(noise.get("seed", 0))


def parse_scene(text: str, path=None) -> SceneConfig:
    """Validate and build a scene from JSON text.

    Raises
    ------
    ConfigError
        With ``path:line:`` prefix for syntax, schema and semantic errors.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", path, exc.lineno) from None
    validator = jsonschema.Draft202012Validator(SCHEMA)
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise _schema_error(text, err, path)
    base = Path(path).parent if path is not None else None
    try:
        geom, recon, snr, seed = _build(doc, base)
    except (ValueError, KeyError, OSError) as exc:
        key = None
        for k in ("recon", "geometry", "phantom", "noise"):
            if k in str(exc):
                key = k
        raise ConfigError(str(exc), path, _locate(text, [key]) if key else None) from None
    return SceneConfig(geom, doc["phantom"], snr, seed, recon, doc, None if path is None else str(path))


def load_scene(path) -> SceneConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_scene(text, path)


def builtin_scene_path(name: str) -> Path:
    """Path of a shipped scene (``"paper"`` or ``"desk"``)."""
    return Path(str(resources.files("scatterct").joinpath(f"data/scene_{name}.json")))
