"""Content-addressed on-disk cache for tool evidence and model replies.

Entries are keyed by the digest of a canonicalized :class:`CacheKey` and
stored as JSON files carrying their own value digest, so tampering is
detected on read. Writes go through a temp file + rename, making the store
safe for concurrent workers within one process.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import StoreCorrupt
from .hashing import sha256_json

# Tool kinds whose queries are about an image; their keys must carry one.
_IMAGE_BOUND_KINDS = frozenset({"object-detect", "scene-text", "attribute"})


@dataclass(frozen=True)
class CacheKey:
    """Identity of one backend call: what was asked, of which backend.

    ``canonical_query`` must already be canonicalized by the caller (trimmed
    text, sorted lowercased label lists); ``image_digest`` is empty only for
    text-only tools (fact search, and model requests whose prompt already
    folds attachment digests into the query).
    """

    tool_kind: str
    canonical_query: str
    image_digest: str
    backend_id: str

    def __post_init__(self) -> None:
        if not self.tool_kind or not self.canonical_query or not self.backend_id:
            raise ValueError("tool_kind, canonical_query, backend_id must be non-empty")
        if self.tool_kind in _IMAGE_BOUND_KINDS and not self.image_digest:
            raise ValueError(f"{self.tool_kind} keys require an image digest")

    def digest(self) -> str:
        return sha256_json({
            "tool_kind": self.tool_kind,
            "canonical_query": self.canonical_query,
            "image_digest": self.image_digest,
            "backend_id": self.backend_id,
        })


class DiskCache:
    """Digest-addressed JSON store with integrity-checked reads."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self._objects = self.directory / "objects"
        self._objects.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, key: CacheKey) -> Path:
        digest = key.digest()
        return self._objects / digest[:2] / f"{digest}.json"

    def get(self, key: CacheKey) -> tuple[bool, Any]:
        """Look up a key; returns (hit, value). Tampered entries raise."""
        path = self._path(key)
        if not path.exists():
            with self._lock:
                self.misses += 1
            return False, None
        try:
            record = json.loads(path.read_text("utf-8"))
            value = record["value"]
            stored_digest = record["value_sha256"]
        except (ValueError, KeyError) as exc:
            raise StoreCorrupt(f"unreadable cache entry {path.name}: {exc}") from exc
        if sha256_json(value) != stored_digest:
            raise StoreCorrupt(f"cache entry {path.name} failed its integrity check")
        with self._lock:
            self.hits += 1
        return True, value

    def put(self, key: CacheKey, value: Any) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {
            "key": {
                "tool_kind": key.tool_kind,
                "canonical_query": key.canonical_query,
                "image_digest": key.image_digest,
                "backend_id": key.backend_id,
            },
            "value_sha256": sha256_json(value),
            "value": value,
        }
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, ensure_ascii=False, indent=2) + "\n", "utf-8")
        os.replace(tmp, path)

    # --- maintenance and reporting ---------------------------------------

    def entry_count(self) -> int:
        return sum(1 for _ in self._objects.glob("*/*.json"))

    def total_bytes(self) -> int:
        return sum(p.stat().st_size for p in self._objects.glob("*/*.json"))

    def clear(self) -> int:
        """Remove every entry; returns how many were removed."""
        removed = 0
        for path in self._objects.glob("*/*.json"):
            path.unlink()
            removed += 1
        stats = self.directory / "stats.json"
        if stats.exists():
            stats.unlink()
        with self._lock:
            self.hits = 0
            self.misses = 0
        return removed

    def flush_stats(self) -> None:
        """Fold this instance's hit/miss counters into the persisted totals."""
        stats_path = self.directory / "stats.json"
        with self._lock:
            hits, misses = self.hits, self.misses
            self.hits = 0
            self.misses = 0
        totals = {"hits": 0, "misses": 0}
        if stats_path.exists():
            try:
                totals.update(json.loads(stats_path.read_text("utf-8")))
            except ValueError:
                pass
        totals["hits"] += hits
        totals["misses"] += misses
        tmp = stats_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(totals) + "\n", "utf-8")
        os.replace(tmp, stats_path)

    def persisted_stats(self) -> dict[str, int]:
        stats_path = self.directory / "stats.json"
        if not stats_path.exists():
            return {"hits": 0, "misses": 0}
        try:
            data = json.loads(stats_path.read_text("utf-8"))
            return {"hits": int(data.get("hits", 0)), "misses": int(data.get("misses", 0))}
        except ValueError:
            return {"hits": 0, "misses": 0}
