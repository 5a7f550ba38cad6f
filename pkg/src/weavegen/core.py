"""Domain types, run configuration, and shard serialization shared by every module.

An interleaved sequence is an ordered alternation of text chunks and images
inside one conversation. Images are content-addressed (hash of the stored
pixel bytes) so deduplication and provenance checks are cheap; pixels live
beside their shard under ``images/<hash>.png``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np
from PIL import Image

TEXT = "text"
IMAGE = "image"
USER = "user"
ASSISTANT = "assistant"

_KINDS = (TEXT, IMAGE)
_ROLES = (USER, ASSISTANT)


class InputError(ValueError):
    """An operation was handed inputs that violate its preconditions."""


class ParseError(ValueError):
    """Shard bytes could not be parsed. ``offset`` is the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# Sequence types


@dataclass(frozen=True)
class Chunk:
    """One conversation element: either a text passage or an image reference."""

    kind: str
    role: str
    text: str | None = None
    image_ref: str | None = None


def text_chunk(role: str, text: str) -> Chunk:
    return Chunk(kind=TEXT, role=role, text=text)


def image_chunk(role: str, image_ref: str) -> Chunk:
    return Chunk(kind=IMAGE, role=role, image_ref=image_ref)


@dataclass(frozen=True)
class InterleavedSequence:
    """Ordered chunks of one conversation; image chunks index 0..K-1 by appearance."""

    id: str
    chunks: tuple[Chunk, ...]

    def __post_init__(self):
        if not isinstance(self.chunks, tuple):
            object.__setattr__(self, "chunks", tuple(self.chunks))

    def image_refs(self) -> list[str]:
        return [c.image_ref for c in self.chunks if c.kind == IMAGE]

    def with_chunks(self, chunks: Iterable[Chunk]) -> "InterleavedSequence":
        return replace(self, chunks=tuple(chunks))


def validate_sequence(seq: InterleavedSequence) -> list[str]:
    """Return all invariant violations; empty list iff the sequence is well formed.

    Never raises: validation is total so callers can report every problem at once.
    """
    violations: list[str] = []
    if not seq.id:
        violations.append("sequence id empty")
    if not seq.chunks:
        violations.append("sequence empty")
        return violations
    seen_text = False
    for i, c in enumerate(seq.chunks):
        if c.kind not in _KINDS:
            violations.append(f"chunk {i}: unknown kind {c.kind!r}")
            continue
        if c.role not in _ROLES:
            violations.append(f"chunk {i}: unknown role {c.role!r}")
        has_text = c.text is not None
        has_image = c.image_ref is not None
        if has_text == has_image or (c.kind == TEXT and not has_text) or (c.kind == IMAGE and not has_image):
            violations.append(f"chunk {i}: exclusive-field violation")
        if c.kind == TEXT:
            seen_text = True
        elif c.role == ASSISTANT and not seen_text:
            violations.append(f"chunk {i}: assistant image without preceding text")
    return violations


# ---------------------------------------------------------------------------
# Vocabulary and run configuration


@dataclass(frozen=True)
class VocabSpec:
    """Token-id layout: byte ids 0..255 plus the four control ids."""

    vocab_size: int = 260
    bov_id: int = 256
    eos_id: int = 257
    pad_id: int = 258
    image_placeholder_id: int = 259

    def __post_init__(self):
        ids = (self.bov_id, self.eos_id, self.pad_id, self.image_placeholder_id)
        if len(set(ids)) != 4:
            raise InputError(f"special token ids must be distinct, got {ids}")
        if any(i >= self.vocab_size or i < 0 for i in ids):
            raise InputError(f"special token ids must lie in [0, {self.vocab_size})")

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.bov_id, self.eos_id, self.pad_id, self.image_placeholder_id))


@dataclass(frozen=True)
class TransformerDims:
    layers: int
    width: int
    heads: int

    def __post_init__(self):
        if min(self.layers, self.width, self.heads) <= 0:
            raise InputError(f"transformer dims must be positive, got {self}")
        if self.width % self.heads != 0:
            raise InputError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs to be reproducible from one seed.

    ``mllm_max_side_px`` caps the side length of images fed to the LM
    (64 at desk scale; production systems use several hundred pixels).
    ``cfg_scale`` is the guidance strength s in v_neg + s*(v_pos - v_neg).
    """

    seed: int = 0
    latent_patch: int = 8
    lm_dims: TransformerDims = TransformerDims(layers=2, width=32, heads=4)
    # keep the head width comfortably above 3*latent_patch^2: the velocity
    # target needs near-full-rank access to the noisy latent channels
    dit_dims: TransformerDims = TransformerDims(layers=2, width=256, heads=4)
    cfg_scale: float = 1.0
    sampler_steps: int = 16
    mllm_max_side_px: int = 64
    stage1_lr: float = 8e-3
    stage2_lr: float = 2e-3
    stage1_steps: int = 1200
    stage2_steps: int = 3000

    def __post_init__(self):
        if self.latent_patch <= 0:
            raise InputError("latent_patch must be positive")
        if self.cfg_scale < 0:
            raise InputError("cfg_scale must be >= 0")
        if self.sampler_steps < 1:
            raise InputError("sampler_steps must be >= 1")
        if self.mllm_max_side_px <= 0 or self.mllm_max_side_px % self.latent_patch != 0:
            raise InputError("mllm_max_side_px must be a positive multiple of latent_patch")

    @property
    def latent_channels(self) -> int:
        return 3 * self.latent_patch * self.latent_patch


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    d: dict[str, Any] = {
        "seed": cfg.seed,
        "latent_patch": cfg.latent_patch,
        "cfg_scale": cfg.cfg_scale,
        "sampler_steps": cfg.sampler_steps,
        "mllm_max_side_px": cfg.mllm_max_side_px,
        "stage1_lr": cfg.stage1_lr,
        "stage2_lr": cfg.stage2_lr,
        "stage1_steps": cfg.stage1_steps,
        "stage2_steps": cfg.stage2_steps,
        "lm": {"layers": cfg.lm_dims.layers, "width": cfg.lm_dims.width, "heads": cfg.lm_dims.heads},
        "dit": {"layers": cfg.dit_dims.layers, "width": cfg.dit_dims.width, "heads": cfg.dit_dims.heads},
    }
    return d


def config_from_dict(d: Mapping[str, Any]) -> RunConfig:
    base = RunConfig()
    lm = d.get("lm", {})
    dit = d.get("dit", {})
    return RunConfig(
        seed=int(d.get("seed", base.seed)),
        latent_patch=int(d.get("latent_patch", base.latent_patch)),
        lm_dims=TransformerDims(
            layers=int(lm.get("layers", base.lm_dims.layers)),
            width=int(lm.get("width", base.lm_dims.width)),
            heads=int(lm.get("heads", base.lm_dims.heads)),
        ),
        dit_dims=TransformerDims(
            layers=int(dit.get("layers", base.dit_dims.layers)),
            width=int(dit.get("width", base.dit_dims.width)),
            heads=int(dit.get("heads", base.dit_dims.heads)),
        ),
        cfg_scale=float(d.get("cfg_scale", base.cfg_scale)),
        sampler_steps=int(d.get("sampler_steps", base.sampler_steps)),
        mllm_max_side_px=int(d.get("mllm_max_side_px", base.mllm_max_side_px)),
        stage1_lr=float(d.get("stage1_lr", base.stage1_lr)),
        stage2_lr=float(d.get("stage2_lr", base.stage2_lr)),
        stage1_steps=int(d.get("stage1_steps", base.stage1_steps)),
        stage2_steps=int(d.get("stage2_steps", base.stage2_steps)),
    )


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Image helpers


def pixels_to_uint8(pixels: np.ndarray) -> np.ndarray:
    if pixels.dtype == np.uint8:
        return pixels
    return np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)


def pixels_from_uint8(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / 255.0).astype(np.float32)


def pixel_hash(pixels: np.ndarray) -> str:
    """Content address of an image: sha256 over the quantized pixel bytes and shape."""
    u8 = pixels_to_uint8(pixels)
    h = hashlib.sha256()
    h.update(str(u8.shape).encode("ascii"))
    h.update(u8.tobytes())
    return h.hexdigest()


class ImageStore:
    """Content-addressed PNG store living next to a shard (``<root>/images/``)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.dir = self.root / "images"

    def path_for(self, ref: str) -> Path:
        return self.dir / f"{ref}.png"

    def put(self, pixels: np.ndarray) -> str:
        ref = pixel_hash(pixels)
        path = self.path_for(ref)
        if not path.exists():
            self.dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray(pixels_to_uint8(pixels), mode="RGB").save(path)
        return ref

    def get(self, ref: str) -> np.ndarray:
        path = self.path_for(ref)
        if not path.exists():
            raise InputError(f"image {ref} not in store {self.dir}")
        with Image.open(path) as im:
            return pixels_from_uint8(np.asarray(im.convert("RGB")))

    def has(self, ref: str) -> bool:
        return self.path_for(ref).exists()

    def refs(self) -> list[str]:
        if not self.dir.exists():
            return []
        return sorted(p.stem for p in self.dir.glob("*.png"))


# ---------------------------------------------------------------------------
# Shard serialization (line-delimited records)


@dataclass(frozen=True)
class ShardRecord:
    """One persisted conversation: the sequence plus free-form metadata
    (provenance, ``no_dialogue`` flags, engine stage notes)."""

    sequence: InterleavedSequence
    meta: Mapping[str, Any] = field(default_factory=dict)


def _chunk_to_obj(c: Chunk) -> dict[str, Any]:
    obj: dict[str, Any] = {"kind": c.kind, "role": c.role}
    if c.kind == TEXT:
        obj["text"] = c.text
    else:
        obj["image_ref"] = c.image_ref
    return obj


def _chunk_from_obj(obj: Any, where: str) -> Chunk:
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: chunk is not an object")
    kind = obj.get("kind")
    role = obj.get("role")
    if kind == TEXT:
        if not isinstance(obj.get("text"), str):
            raise ValueError(f"{where}: text chunk without text")
        return Chunk(kind=TEXT, role=role, text=obj["text"])
    if kind == IMAGE:
        if not isinstance(obj.get("image_ref"), str):
            raise ValueError(f"{where}: image chunk without image_ref")
        return Chunk(kind=IMAGE, role=role, image_ref=obj["image_ref"])
    raise ValueError(f"{where}: unknown chunk kind {kind!r}")


def record_to_obj(rec: ShardRecord) -> dict[str, Any]:
    return {
        "id": rec.sequence.id,
        "chunks": [_chunk_to_obj(c) for c in rec.sequence.chunks],
        "meta": dict(rec.meta),
    }


def record_from_obj(obj: Any) -> ShardRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    seq_id = obj.get("id")
    chunks = obj.get("chunks")
    if not isinstance(seq_id, str) or not isinstance(chunks, list):
        raise ValueError("record missing id or chunks")
    parsed = tuple(_chunk_from_obj(c, f"chunk {i}") for i, c in enumerate(chunks))
    meta = obj.get("meta") or {}
    if not isinstance(meta, dict):
        raise ValueError("record meta is not an object")
    return ShardRecord(sequence=InterleavedSequence(id=seq_id, chunks=parsed), meta=meta)


def serialize_record(rec: ShardRecord) -> bytes:
    line = json.dumps(record_to_obj(rec), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return line.encode("utf-8") + b"\n"


def serialize(seq: InterleavedSequence, meta: Mapping[str, Any] | None = None) -> bytes:
    return serialize_record(ShardRecord(sequence=seq, meta=meta or {}))


def deserialize_record(data: bytes, base_offset: int = 0) -> ShardRecord:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError("record is not valid utf-8", base_offset + e.start) from e
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        pos = base_offset + len(text[: e.pos].encode("utf-8"))
        raise ParseError(f"malformed record: {e.msg}", pos) from e
    try:
        return record_from_obj(obj)
    except ValueError as e:
        raise ParseError(str(e), base_offset) from e


def deserialize(data: bytes) -> InterleavedSequence:
    return deserialize_record(data).sequence


def write_shard(path: str | Path, records: Iterable[ShardRecord]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "wb") as f:
        for rec in records:
            f.write(serialize_record(rec))
            n += 1
    return n


def iter_shard(path: str | Path) -> Iterator[ShardRecord]:
    offset = 0
    with open(path, "rb") as f:
        for raw in f:
            line = raw.rstrip(b"\n")
            if line:
                yield deserialize_record(line, base_offset=offset)
            offset += len(raw)


def read_shard(path: str | Path) -> list[ShardRecord]:
    return list(iter_shard(path))
