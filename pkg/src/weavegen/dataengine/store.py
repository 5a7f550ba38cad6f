"""Persistent record store for the webpage pipeline.

One JSON file per page record in a key-value directory; writes are atomic
(temp file + rename) and stage status only moves forward, so a rerun over a
partially processed store resumes instead of repeating work.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from ..core import InputError

PENDING = "pending"
DONE = "done"
FAILED = "failed"

_STATUS_RANK = {PENDING: 0, FAILED: 1, DONE: 2}

STAGES = ("filter", "rewrite", "caption", "dedup", "dialogize")


@dataclass
class PageImage:
    hash: str
    width: int
    height: int
    caption: str | None = None
    category: str | None = None
    valid: bool = True
    invalid_reason: str | None = None

    def as_obj(self) -> dict[str, Any]:
        return {
            "hash": self.hash,
            "width": self.width,
            "height": self.height,
            "caption": self.caption,
            "category": self.category,
            "valid": self.valid,
            "invalid_reason": self.invalid_reason,
        }

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "PageImage":
        return cls(
            hash=obj["hash"],
            width=int(obj.get("width", 0) or 0),
            height=int(obj.get("height", 0) or 0),
            caption=obj.get("caption"),
            category=obj.get("category"),
            valid=bool(obj.get("valid", True)),
            invalid_reason=obj.get("invalid_reason"),
        )


@dataclass
class PageRecord:
    key: str
    url: str
    markdown: str
    images: list[PageImage] = field(default_factory=list)
    stage_status: dict[str, str] = field(default_factory=lambda: {s: PENDING for s in STAGES})
    failure_reasons: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, Any] = field(default_factory=dict)
    transcripts: dict[str, list] = field(default_factory=dict)

    def status(self, stage: str) -> str:
        return self.stage_status.get(stage, PENDING)

    def mark(self, stage: str, status: str, reason: str | None = None) -> None:
        if status not in _STATUS_RANK:
            raise InputError(f"unknown stage status {status!r}")
        self.stage_status[stage] = status
        if reason is not None:
            self.failure_reasons[stage] = reason

    def valid_images(self) -> list[PageImage]:
        return [im for im in self.images if im.valid]

    def image_by_hash(self, h: str) -> PageImage | None:
        return next((im for im in self.images if im.hash == h), None)

    def as_obj(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "url": self.url,
            "markdown": self.markdown,
            "images": [im.as_obj() for im in self.images],
            "stage_status": dict(self.stage_status),
            "failure_reasons": dict(self.failure_reasons),
            "artifacts": self.artifacts,
            "transcripts": self.transcripts,
        }

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "PageRecord":
        return cls(
            key=obj["key"],
            url=obj.get("url", ""),
            markdown=obj.get("markdown", ""),
            images=[PageImage.from_obj(o) for o in obj.get("images", [])],
            stage_status={s: obj.get("stage_status", {}).get(s, PENDING) for s in STAGES},
            failure_reasons=dict(obj.get("failure_reasons", {})),
            artifacts=dict(obj.get("artifacts", {})),
            transcripts=dict(obj.get("transcripts", {})),
        )


def page_key(url: str) -> str:
    return hashlib.sha256(url.encode("utf-8")).hexdigest()[:16]


class RecordStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.records_dir = self.root / "records"
        self.records_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.records_dir / f"{key}.json"

    def keys(self) -> list[str]:
        return sorted(p.stem for p in self.records_dir.glob("*.json"))

    def has(self, key: str) -> bool:
        return self._path(key).exists()

    def get(self, key: str) -> PageRecord:
        path = self._path(key)
        if not path.exists():
            raise InputError(f"no record {key!r} in store {self.root}")
        with open(path, "r", encoding="utf-8") as f:
            return PageRecord.from_obj(json.load(f))

    def put(self, record: PageRecord, allow_retry: bool = False) -> None:
        """Atomic write; refuses stage-status regressions unless the caller is
        explicitly retrying a failed stage."""
        path = self._path(record.key)
        if path.exists():
            old = self.get(record.key)
            for stage in STAGES:
                before = _STATUS_RANK[old.status(stage)]
                after = _STATUS_RANK[record.status(stage)]
                if after < before and not (allow_retry and old.status(stage) == FAILED):
                    raise InputError(
                        f"record {record.key}: stage {stage} would regress "
                        f"{old.status(stage)} -> {record.status(stage)}"
                    )
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(record.as_obj(), f, ensure_ascii=False)
        tmp.replace(path)

    def iter_records(self) -> Iterator[PageRecord]:
        for key in self.keys():
            yield self.get(key)


def load_corpus(store: RecordStore, corpus_dir: str | Path) -> int:
    """Import corpus page files (one JSON per page: url, markdown, images with
    sizes) as pending records; already-imported pages are left untouched."""
    corpus_dir = Path(corpus_dir)
    added = 0
    for path in sorted(corpus_dir.glob("*.json")):
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
        url = obj.get("url") or path.stem
        key = page_key(url)
        if store.has(key):
            continue
        images = [
            PageImage(hash=im["hash"], width=int(im.get("width", 0) or 0), height=int(im.get("height", 0) or 0))
            for im in obj.get("images", [])
        ]
        store.put(PageRecord(key=key, url=url, markdown=obj.get("markdown", ""), images=images))
        added += 1
    return added
