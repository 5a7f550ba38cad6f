"""Video-transition alignment pairs.

Each manifest row names a clip's first and last frame; a VLM annotates the
transition, and the pair becomes a 2-image interleaved record (caption, frame
A, frame B) tagged ``no_dialogue`` so instruction tuning rejects it; only
the context-alignment stage consumes these.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..core import (
    ASSISTANT,
    USER,
    ImageStore,
    InputError,
    InterleavedSequence,
    ShardRecord,
    image_chunk,
    text_chunk,
)
from .client import ChatMessage, ChatRequest, ClientError, extract_json, user_text
from .prompts import template


@dataclass(frozen=True)
class ClipRow:
    clip_id: str
    frame_a: Path
    frame_b: Path


def load_manifest(path: str | Path) -> list[ClipRow]:
    rows: list[ClipRow] = []
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "clip_id" not in obj or "frame_a" not in obj or "frame_b" not in obj:
                raise InputError(f"manifest row {i}: needs clip_id, frame_a, frame_b")
            rows.append(
                ClipRow(
                    clip_id=str(obj["clip_id"]),
                    frame_a=base / obj["frame_a"],
                    frame_b=base / obj["frame_b"],
                )
            )
    return rows


def _load_frame(path: Path) -> np.ndarray | None:
    if not path.exists():
        return None
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).astype(np.float32) / 255.0
    except OSError:
        return None


@dataclass
class VideoPairResult:
    records: list[ShardRecord]
    skipped: int = 0


def assemble_video_pairs(
    rows: list[ClipRow],
    client,
    store: ImageStore,
    model_name: str = "engine",
) -> VideoPairResult:
    """Annotate each clip's frame pair; rows with missing/unreadable frames
    are skipped with a counter, never fatal."""
    records: list[ShardRecord] = []
    skipped = 0
    for row in rows:
        a = _load_frame(row.frame_a)
        b = _load_frame(row.frame_b)
        if a is None or b is None:
            skipped += 1
            continue
        ref_a = store.put(a)
        ref_b = store.put(b)
        request = ChatRequest(
            model=model_name,
            messages=(
                ChatMessage(role="system", content=template("video_transition_v1")),
                ChatMessage(
                    role="user",
                    content=(
                        {"type": "image_ref", "hash": ref_a},
                        {"type": "image_ref", "hash": ref_b},
                        {"type": "text", "text": user_text({"clip_id": row.clip_id})},
                    ),
                ),
            ),
            template_id="video_transition_v1",
            metadata={"stage": "video", "clip_id": row.clip_id},
        )
        try:
            response = client.complete(request)
        except ClientError:
            skipped += 1
            continue
        obj = extract_json(response.content)
        caption = obj.get("caption") if obj else None
        if not isinstance(caption, str) or not caption.strip():
            skipped += 1
            continue
        seq = InterleavedSequence(
            id=f"clip-{row.clip_id}",
            chunks=(
                text_chunk(USER, caption.strip()),
                image_chunk(USER, ref_a),
                image_chunk(ASSISTANT, ref_b),
            ),
        )
        records.append(ShardRecord(sequence=seq, meta={"no_dialogue": True, "clip_id": row.clip_id}))
    return VideoPairResult(records=records, skipped=skipped)
