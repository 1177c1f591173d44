"""On-disk cache of offline set bundles, keyed by the synthesis hash.

Each file is JSON holding the key, a SHA-256 of the canonical payload and
the payload itself; a load re-hashes the payload and refuses mismatches.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .synthesis import SetBundle

CACHE_SCHEMA = "biaxcontour-rci/1"


class CacheError(RuntimeError):
    """Missing, stale or corrupt cache file."""


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def cache_path(root, key: str) -> Path:
    return Path(root) / f"rci-{key}.json"


def save_bundle(bundle: SetBundle, root, key: str) -> Path:
    """Write ``bundle`` atomically and return the file path."""
    payload = bundle.to_record()
    text = _canonical(payload)
    doc = {
        "schema": CACHE_SCHEMA,
        "key": key,
        "sha256": hashlib.sha256(text.encode()).hexdigest(),
        "payload": payload,
    }
    path = cache_path(root, key)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
    os.replace(tmp, path)
    return path


def load_bundle(root, key: str) -> SetBundle:
    """Load and verify the bundle stored under ``key``."""
    path = cache_path(root, key)
    if not path.exists():
        raise CacheError(f"no RCI cache for configuration {key} in {root}; run `rci-build` first")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CacheError(f"cannot read cache {path}: {err}") from err
    if doc.get("schema") != CACHE_SCHEMA or doc.get("key") != key:
        raise CacheError(f"cache {path} is stale (schema or key mismatch); run `rci-build` again")
    digest = hashlib.sha256(_canonical(doc["payload"]).encode()).hexdigest()
    if digest != doc.get("sha256"):
        raise CacheError(f"cache {path} failed its hash check; run `rci-build` again")
    return SetBundle.from_record(doc["payload"])


__all__ = ["CACHE_SCHEMA", "CacheError", "cache_path", "load_bundle", "save_bundle"]
