"""Dataset manifests: one JSON record per sample.

Required fields are ``id``, ``image``, ``split`` (train | val | test) and
``origin`` (real | synthetic); ``mask`` and ``label`` are optional.  Paths
are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from pathlib import Path

SPLITS = ("train", "val", "test")
ORIGINS = ("real", "synthetic")


class ManifestError(ValueError):
    pass


def validate_record(rec: dict, where: str = "") -> dict:
    for key in ("id", "image", "split", "origin"):
        if key not in rec:
            raise ManifestError(f"{where}missing field {key!r}")
    if rec["split"] not in SPLITS:
        raise ManifestError(f"{where}split must be one of {SPLITS}, got {rec['split']!r}")
    if rec["origin"] not in ORIGINS:
        raise ManifestError(f"{where}origin must be one of {ORIGINS}, got {rec['origin']!r}")
    if rec.get("label") not in (None, "void", "non_void"):
        raise ManifestError(f"{where}label must be void or non_void")
    return rec


def read_manifest(path, check_files: bool = False) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    recs, seen = [], set()
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path.name}:{n}: {exc}") from None
            validate_record(rec, f"{path.name}:{n}: ")
            if rec["id"] in seen:
                raise ManifestError(f"{path.name}:{n}: duplicate id {rec['id']!r}")
            seen.add(rec["id"])
            if check_files:
                for key in ("image", "mask"):
                    if rec.get(key) and not (path.parent / rec[key]).is_file():
                        raise ManifestError(f"{path.name}:{n}: {key} file missing: {rec[key]}")
            recs.append(rec)
    return recs


def write_manifest(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seen = set()
    with open(path, "w") as fh:
        for rec in records:
            validate_record(rec)
            if rec["id"] in seen:
                raise ManifestError(f"duplicate id {rec['id']!r}")
            seen.add(rec["id"])
            fh.write(json.dumps(rec) + "\n")
    return path


def merge_manifests(paths, out) -> Path:
    """Concatenate manifests into ``out``, rewriting paths relative to it."""
    out = Path(out)
    merged = []
    for p in paths:
        p = Path(p)
        for rec in read_manifest(p):
            rec = dict(rec)
            for key in ("image", "mask"):
                if rec.get(key):
                    rec[key] = str(Path(_relpath(p.parent / rec[key], out.parent)))
            merged.append(rec)
    return write_manifest(merged, out)


def _relpath(target: Path, base: Path) -> str:
    import os

    return os.path.relpath(target.resolve(), base.resolve())
