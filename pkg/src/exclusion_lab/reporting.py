"""CSV tables and run manifests."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def output_dir(path: str | os.PathLike | None) -> Path:
    """Explicit path, else ``$EXCLUSION_LAB_OUT``, else ``./out``."""
    p = Path(path or os.environ.get("EXCLUSION_LAB_OUT") or "out")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def write_csv(path: str | os.PathLike, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else _plain(v) for v in row])
    return path


def read_csv(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, list(r)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_plain)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def write_manifest(path: str | os.PathLike, config: dict, seeds: Sequence[str] = (), **extra) -> Path:
    """JSON record of the full configuration, its content hash, seeds and outputs."""
    path = Path(path)
    body = {"config": config, "config_sha256": config_hash(config), "seeds": list(seeds)}
    body.update({k: _plain(v) for k, v in extra.items()})
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_plain) + "\n")
    return path
