"""Result persistence: run manifest, residual CSV and JSON summaries.

Files are written by a single writer with fixed key order and no
timestamps, so identical runs produce identical bytes.
"""

from __future__ import annotations

import json
import platform
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .config import RunConfig

MANIFEST = "manifest.yaml"
RESIDUALS = "residuals.csv"
SUMMARY = "summary.json"
GAP_REPORT = "oracle_gap.json"


def versions() -> dict:
    return {
        "mfcsolve": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pyyaml": yaml.__version__,
    }


def output_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, cfg: RunConfig, subcommand: str) -> Path:
    """Echo every effective option together with the seed and library versions."""
    doc = {"subcommand": subcommand, "seed": cfg.seed, "versions": versions(), "config": cfg.to_dict()}
    path = Path(out) / MANIFEST
    path.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2) + "\n", encoding="utf-8")
    return path
