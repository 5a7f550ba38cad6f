"""The five-stage webpage-to-conversation pipeline.

filter      drop text-only pages and heuristically invalid images (no client)
rewrite     LLM rewrites passages, splits into introduction + main content
caption     VLM captions and categorizes every surviving image
dedup       exact consecutive duplicates removed locally, LLM reorders chunks
dialogize   VLM turns the cleaned sequence into a user/assistant conversation

Each LLM reply is schema-validated and retried with the violation quoted
back; persistent violations fail the stage with the transcript stored.
"""

from __future__ import annotations

import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from ..core import (
    ASSISTANT,
    USER,
    Chunk,
    InputError,
    InterleavedSequence,
    ShardRecord,
    record_to_obj,
    record_from_obj,
    validate_sequence,
)
from .client import ChatMessage, ChatRequest, ClientError, extract_json, user_text
from .prompts import template
from .store import DONE, FAILED, PENDING, STAGES, PageRecord, RecordStore

IMAGE_CATEGORIES = (
    "natural_photo",
    "gui_screenshot",
    "document",
    "icon",
    "qr_code",
    "advertisement",
    "other",
)
INVALID_CATEGORIES = ("icon", "qr_code", "advertisement")

_IMAGE_BLOCK_RE = re.compile(r"^!\[[^\]]*\]\(image:([A-Za-z0-9_\-]+)\)\s*$")


@dataclass(frozen=True)
class EngineConfig:
    min_image_side: int = 32
    max_aspect_ratio: float = 4.0
    max_validation_retries: int = 2
    model_name: str = "engine"
    temperature: float = 0.0


def parse_blocks(markdown: str) -> list[dict[str, Any]]:
    """Paragraph blocks: standalone ``![alt](image:HASH)`` lines are image
    blocks, everything else is text."""
    blocks: list[dict[str, Any]] = []
    for para in re.split(r"\n\s*\n", markdown):
        para = para.strip()
        if not para:
            continue
        m = _IMAGE_BLOCK_RE.match(para)
        if m:
            blocks.append({"type": "image", "hash": m.group(1)})
        else:
            blocks.append({"type": "text", "text": para})
    return blocks


# ---------------------------------------------------------------------------
# Validated client calls


def _call_validated(
    client,
    cfg: EngineConfig,
    template_id: str,
    payload: dict,
    parts: Sequence[dict] | None,
    validate: Callable[[str], tuple[Any, str | None]],
    metadata: dict,
) -> tuple[Any, list[dict]]:
    """Call, validate, retry with the violation quoted back; returns
    (value, transcript) with value None after exhaustion."""
    system = ChatMessage(role="system", content=template(template_id))
    body = user_text(payload)
    if parts:
        content: str | tuple = tuple(list(parts) + [{"type": "text", "text": body}])
    else:
        content = body
    messages: list[ChatMessage] = [system, ChatMessage(role="user", content=content)]
    transcript: list[dict] = []
    for attempt in range(cfg.max_validation_retries + 1):
        request = ChatRequest(
            model=cfg.model_name,
            messages=tuple(messages),
            temperature=cfg.temperature,
            template_id=template_id,
            metadata=dict(metadata, attempt=attempt),
        )
        try:
            response = client.complete(request)
        except ClientError as e:
            transcript.append({"attempt": attempt, "error": str(e)})
            return None, transcript
        transcript.append({"attempt": attempt, "response": response.content})
        value, violation = validate(response.content)
        if violation is None:
            return value, transcript
        transcript[-1]["violation"] = violation
        messages.append(ChatMessage(role="assistant", content=response.content))
        messages.append(
            ChatMessage(role="user", content=f"Invalid reply: {violation}. Answer again with valid JSON only.")
        )
    return None, transcript


# ---------------------------------------------------------------------------
# Stage 1: filter


def stage_filter(record: PageRecord, cfg: EngineConfig = EngineConfig()) -> PageRecord:
    """Heuristic page/image filtering; never calls the client and never throws
    on bad images, which are marked invalid instead."""
    if not record.markdown.strip():
        record.mark("filter", FAILED, "no-text")
        return record
    blocks = parse_blocks(record.markdown)
    known = {im.hash for im in record.images}
    blocks = [b for b in blocks if b["type"] == "text" or b["hash"] in known]
    n_text = sum(1 for b in blocks if b["type"] == "text")
    n_image = sum(1 for b in blocks if b["type"] == "image")
    if n_image == 0:
        record.mark("filter", FAILED, "text-only")
        return record
    if n_text == 0:
        record.mark("filter", FAILED, "no-text")
        return record
    referenced = {b["hash"] for b in blocks if b["type"] == "image"}
    for im in record.images:
        if im.hash not in referenced:
            continue
        if im.width <= 0 or im.height <= 0:
            im.valid, im.invalid_reason = False, "unreadable"
        elif min(im.width, im.height) < cfg.min_image_side:
            im.valid, im.invalid_reason = False, "too-small"
        elif max(im.width, im.height) / min(im.width, im.height) > cfg.max_aspect_ratio:
            im.valid, im.invalid_reason = False, "extreme-aspect"
    if not any(im.valid for im in record.images if im.hash in referenced):
        record.mark("filter", FAILED, "no-valid-images")
        return record
    record.artifacts["blocks"] = blocks
    record.mark("filter", DONE)
    return record


# ---------------------------------------------------------------------------
# Stage 2: rewrite + split


def _placeholder_map(record: PageRecord) -> dict[str, str]:
    """img_k -> hash over the currently valid images, in block order."""
    seen: list[str] = []
    for b in record.artifacts.get("blocks", []):
        if b["type"] != "image":
            continue
        im = record.image_by_hash(b["hash"])
        if im is not None and im.valid and b["hash"] not in seen:
            seen.append(b["hash"])
    return {f"img_{k}": h for k, h in enumerate(seen)}


def _validate_chunk_list(items: Any, placeholders: set[str]) -> tuple[list[dict], str | None]:
    if not isinstance(items, list):
        return [], "section is not a list"
    out: list[dict] = []
    for ch in items:
        if not isinstance(ch, dict):
            return [], "chunk is not an object"
        if ch.get("type") == "text":
            if not isinstance(ch.get("text"), str) or not ch["text"].strip():
                return [], "text chunk without text"
            out.append({"type": "text", "text": ch["text"].strip()})
        elif ch.get("type") == "image":
            pid = ch.get("placeholder")
            if pid not in placeholders:
                return [], f"unknown placeholder {pid!r}"
            out.append({"type": "image", "placeholder": pid})
        else:
            return [], f"unknown chunk type {ch.get('type')!r}"
    return out, None


def stage_rewrite_split(record: PageRecord, client, cfg: EngineConfig = EngineConfig()) -> PageRecord:
    if record.status("filter") != DONE:
        raise InputError(f"record {record.key}: rewrite requires a passed filter stage")
    pmap = _placeholder_map(record)
    inverse = {h: p for p, h in pmap.items()}
    payload_blocks = []
    for b in record.artifacts["blocks"]:
        if b["type"] == "text":
            payload_blocks.append({"type": "text", "text": b["text"]})
        elif b["hash"] in inverse:
            payload_blocks.append({"type": "image", "placeholder": inverse[b["hash"]]})
    payload = {"text_blocks": payload_blocks, "placeholders": sorted(pmap)}

    def validate(content: str) -> tuple[Any, str | None]:
        obj = extract_json(content)
        if obj is None:
            return None, "reply is not JSON"
        intro, err = _validate_chunk_list(obj.get("introduction"), set(pmap))
        if err:
            return None, f"introduction: {err}"
        main, err = _validate_chunk_list(obj.get("main_content"), set(pmap))
        if err:
            return None, f"main_content: {err}"
        if not any(c["type"] == "text" for c in intro + main):
            return None, "rewrite contains no text"
        return {"introduction": intro, "main_content": main}, None

    value, transcript = _call_validated(
        client, cfg, "rewrite_split_v1", payload, None, validate, {"stage": "rewrite", "record": record.key}
    )
    if value is None:
        record.transcripts["rewrite"] = transcript
        record.mark("rewrite", FAILED, "schema-violation")
        return record
    record.artifacts["placeholder_map"] = pmap
    record.artifacts["rewrite"] = value
    record.mark("rewrite", DONE)
    return record


# ---------------------------------------------------------------------------
# Stage 3: caption + classify


def stage_caption_classify(record: PageRecord, client, cfg: EngineConfig = EngineConfig()) -> PageRecord:
    if record.status("rewrite") != DONE:
        raise InputError(f"record {record.key}: caption requires a completed rewrite stage")
    pmap = record.artifacts["placeholder_map"]

    def validate(content: str) -> tuple[Any, str | None]:
        obj = extract_json(content)
        if obj is None:
            return None, "reply is not JSON"
        caption = obj.get("caption")
        category = obj.get("category")
        if not isinstance(caption, str) or not caption.strip():
            return None, "missing caption"
        if category not in IMAGE_CATEGORIES:
            return None, f"category {category!r} not in {IMAGE_CATEGORIES}"
        return {"caption": caption.strip(), "category": category}, None

    for pid in sorted(pmap):
        im = record.image_by_hash(pmap[pid])
        if im is None or not im.valid:
            continue
        value, transcript = _call_validated(
            client,
            cfg,
            "caption_classify_v1",
            {"hash": im.hash, "width": im.width, "height": im.height},
            [{"type": "image_ref", "hash": im.hash}],
            validate,
            {"stage": "caption", "record": record.key, "image": im.hash},
        )
        if value is None:
            record.transcripts["caption"] = transcript
            record.mark("caption", FAILED, "schema-violation")
            return record
        im.caption, im.category = value["caption"], value["category"]
        if value["category"] in INVALID_CATEGORIES:
            im.valid, im.invalid_reason = False, f"category:{value['category']}"
    if not any(record.image_by_hash(h) and record.image_by_hash(h).valid for h in pmap.values()):
        record.mark("caption", FAILED, "no-valid-images")
        return record
    record.mark("caption", DONE)
    return record


# ---------------------------------------------------------------------------
# Stage 4: dedup + reorder


def _surviving_chunks(record: PageRecord) -> list[dict]:
    """Rewrite output flattened with ids and section tags; image chunks whose
    image was invalidated later never reach this point, and exact consecutive
    duplicates are collapsed by hash before any client call."""
    pmap = record.artifacts["placeholder_map"]
    flat: list[dict] = []
    for section in ("introduction", "main_content"):
        for ch in record.artifacts["rewrite"][section]:
            if ch["type"] == "image":
                im = record.image_by_hash(pmap[ch["placeholder"]])
                if im is None or not im.valid:
                    continue
                flat.append(
                    {
                        "type": "image",
                        "placeholder": ch["placeholder"],
                        "hash": im.hash,
                        "caption": im.caption or "",
                        "section": "intro" if section == "introduction" else "main",
                    }
                )
            else:
                flat.append({"type": "text", "text": ch["text"], "section": "intro" if section == "introduction" else "main"})
    deduped: list[dict] = []
    for ch in flat:
        if (
            ch["type"] == "image"
            and deduped
            and deduped[-1]["type"] == "image"
            and deduped[-1]["hash"] == ch["hash"]
        ):
            continue
        deduped.append(ch)
    for i, ch in enumerate(deduped):
        ch["id"] = f"c{i}"
    return deduped


def stage_dedup_reorder(record: PageRecord, client, cfg: EngineConfig = EngineConfig()) -> PageRecord:
    if record.status("caption") != DONE:
        raise InputError(f"record {record.key}: dedup requires captions")
    chunks = _surviving_chunks(record)
    text_ids = {c["id"] for c in chunks if c["type"] == "text"}
    image_ids = {c["id"] for c in chunks if c["type"] == "image"}
    by_id = {c["id"]: c for c in chunks}
    payload = {
        "chunks": [
            {"id": c["id"], "type": c["type"], **({"text": c["text"]} if c["type"] == "text" else {"caption": c["caption"]})}
            for c in chunks
        ]
    }

    def validate(content: str) -> tuple[Any, str | None]:
        obj = extract_json(content)
        if obj is None:
            return None, "reply is not JSON"
        order = obj.get("order")
        if not isinstance(order, list) or len(set(order)) != len(order):
            return None, "order must be a list of unique chunk ids"
        if not set(order) <= set(by_id):
            return None, f"unknown chunk ids {sorted(set(order) - set(by_id))}"
        if not text_ids <= set(order):
            return None, "order drops a text chunk"
        seen_text = False
        for cid in order:
            if cid in text_ids:
                seen_text = True
            elif not seen_text:
                return None, f"image {cid} placed before any text chunk"
        return [by_id[cid] for cid in order], None

    value, transcript = _call_validated(
        client, cfg, "dedup_reorder_v1", payload, None, validate, {"stage": "dedup", "record": record.key}
    )
    if value is None:
        record.transcripts["dedup"] = transcript
        record.mark("dedup", FAILED, "schema-violation")
        return record
    if not any(c["type"] == "image" for c in value):
        record.mark("dedup", FAILED, "no-images-left")
        return record
    record.artifacts["ordered"] = value
    record.mark("dedup", DONE)
    return record


# ---------------------------------------------------------------------------
# Stage 5: dialogize


def stage_dialogize(record: PageRecord, client, cfg: EngineConfig = EngineConfig()) -> PageRecord:
    if record.status("dedup") != DONE:
        raise InputError(f"record {record.key}: dialogize requires a deduplicated ordering")
    pmap = record.artifacts["placeholder_map"]
    ordered = record.artifacts["ordered"]
    intro_placeholders = [c["placeholder"] for c in ordered if c["type"] == "image" and c["section"] == "intro"]
    surviving = {c["placeholder"] for c in ordered if c["type"] == "image"}
    parts = [{"type": "image_ref", "hash": pmap[p]} for p in intro_placeholders]
    payload = {
        "chunks": [
            {"type": c["type"], **({"text": c["text"]} if c["type"] == "text" else {"placeholder": c["placeholder"], "caption": c["caption"]})}
            for c in ordered
        ],
        "intro_placeholders": intro_placeholders,
    }

    def validate(content: str) -> tuple[Any, str | None]:
        obj = extract_json(content)
        if obj is None:
            return None, "reply is not JSON"
        turns = obj.get("turns")
        if not isinstance(turns, list) or not turns:
            return None, "turns missing"
        chunks: list[Chunk] = []
        used: set[str] = set()
        user_images = 0
        for t in turns:
            if not isinstance(t, dict) or t.get("role") not in (USER, ASSISTANT):
                return None, "turn with bad role"
            if t.get("type") == "text":
                if not isinstance(t.get("text"), str) or not t["text"].strip():
                    return None, "empty text turn"
                chunks.append(Chunk(kind="text", role=t["role"], text=t["text"].strip()))
            elif t.get("type") == "image":
                pid = t.get("placeholder")
                if pid not in surviving:
                    return None, f"unknown placeholder {pid!r}"
                if pid in used:
                    return None, f"placeholder {pid!r} used twice"
                used.add(pid)
                if t["role"] == USER:
                    user_images += 1
                    if user_images > 1:
                        return None, "more than one user image"
                    if pid not in intro_placeholders:
                        return None, f"user image {pid!r} is not an introduction image"
                chunks.append(Chunk(kind="image", role=t["role"], image_ref=pmap[pid]))
            else:
                return None, f"unknown turn type {t.get('type')!r}"
        if chunks[0].role != USER:
            return None, "conversation must start with the user"
        if not any(c.role == ASSISTANT for c in chunks):
            return None, "no assistant turns"
        seq = InterleavedSequence(id=f"web-{record.key}", chunks=tuple(chunks))
        violations = validate_sequence(seq)
        if violations:
            return None, "; ".join(violations)
        return seq, None

    value, transcript = _call_validated(
        client, cfg, "dialogize_v1", payload, parts, validate, {"stage": "dialogize", "record": record.key}
    )
    if value is None:
        record.transcripts["dialogize"] = transcript
        record.mark("dialogize", FAILED, "schema-violation")
        return record
    meta = {
        "source_url": record.url,
        "no_dialogue": False,
        "provenance": {stage: record.status(stage) for stage in STAGES[:4]} | {"dialogize": DONE},
    }
    record.artifacts["conversation"] = record_to_obj(ShardRecord(sequence=value, meta=meta))
    record.mark("dialogize", DONE)
    return record


# ---------------------------------------------------------------------------
# Orchestration


STAGE_FUNCS: dict[str, Callable[..., PageRecord]] = {
    "filter": lambda rec, client, cfg: stage_filter(rec, cfg),
    "rewrite": stage_rewrite_split,
    "caption": stage_caption_classify,
    "dedup": stage_dedup_reorder,
    "dialogize": stage_dialogize,
}


@dataclass
class EngineStats:
    processed: int = 0
    stage_done: dict[str, int] = field(default_factory=dict)
    stage_failed: dict[str, int] = field(default_factory=dict)
    stages_skipped: int = 0  # stages already done/failed on entry (no client calls)

    def bump(self, bucket: dict[str, int], stage: str) -> None:
        bucket[stage] = bucket.get(stage, 0) + 1


def run_engine(
    store: RecordStore,
    client,
    stages: Sequence[str] = STAGES,
    cfg: EngineConfig = EngineConfig(),
    max_workers: int = 4,
    retry_failed: bool = False,
) -> EngineStats:
    """Process every record through the requested stages in order; done stages
    are skipped (idempotent resume), failed stages stay failed unless
    ``retry_failed``. Records are independent and handled concurrently."""
    unknown = [s for s in stages if s not in STAGE_FUNCS]
    if unknown:
        raise InputError(f"unknown stages {unknown}; valid: {list(STAGE_FUNCS)}")
    ordered_stages = [s for s in STAGES if s in stages]
    stats = EngineStats()
    stats_lock = threading.Lock()

    def process(key: str) -> None:
        record = store.get(key)
        for stage in ordered_stages:
            status = record.status(stage)
            if status == DONE:
                with stats_lock:
                    stats.stages_skipped += 1
                continue
            if status == FAILED:
                if not retry_failed:
                    with stats_lock:
                        stats.stages_skipped += 1
                    break
                record.mark(stage, PENDING)
            record = STAGE_FUNCS[stage](record, client, cfg)
            store.put(record, allow_retry=retry_failed)
            with stats_lock:
                if record.status(stage) == FAILED:
                    stats.bump(stats.stage_failed, stage)
                else:
                    stats.bump(stats.stage_done, stage)
            if record.status(stage) == FAILED:
                break
        with stats_lock:
            stats.processed += 1

    if max_workers <= 1:
        for key in store.keys():
            process(key)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            list(pool.map(process, store.keys()))
    return stats


def export_conversations(store: RecordStore) -> list[ShardRecord]:
    """All fully dialogized records as shard records, in key order."""
    out = []
    for record in store.iter_records():
        if record.status("dialogize") == DONE and "conversation" in record.artifacts:
            out.append(record_from_obj(record.artifacts["conversation"]))
    return out
