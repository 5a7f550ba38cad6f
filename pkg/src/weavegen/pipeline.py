"""Inference orchestration: the autoregressive interleaved generation loop.

The LM produces text until it emits the vision trigger or EOS. On the
trigger, every prior image (user-provided and generated alike) becomes a
clean condition frame, the hidden states before the trigger are projected to
the text condition, the head samples a latent, and the decoded image is
appended to the context before decoding resumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import codec
from .bundle import ModelBundle
from .connector import ProjectedCondition
from .core import (
    ASSISTANT,
    IMAGE,
    TEXT,
    USER,
    Chunk,
    InputError,
    InterleavedSequence,
    pixel_hash,
    validate_sequence,
)
from .genhead import ConditionBundle
from .mllm import HiddenStates, StreamBuilder, TokenStream


@dataclass(frozen=True)
class GenerationBudget:
    max_text_tokens: int
    max_images: int
    image_shape: tuple[int, int]  # (h_px, w_px) of generated images
    cfg_scale: float
    steps: int
    seed: int

    def __post_init__(self):
        if self.max_text_tokens <= 0:
            raise InputError("max_text_tokens must be positive")
        if self.max_images < 0:
            raise InputError("max_images must be >= 0")
        if self.image_shape[0] <= 0 or self.image_shape[1] <= 0:
            raise InputError("image_shape must be positive")
        if self.steps < 1:
            raise InputError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise InputError("cfg_scale must be >= 0")


@dataclass
class GenerationResult:
    sequence: InterleavedSequence
    images: dict[str, np.ndarray]  # every image the sequence references, new ones included
    truncated: bool
    stats: dict = field(default_factory=dict)


def condition_from_context(
    bundle: ModelBundle,
    stream: TokenStream,
    span_pixels: Sequence[np.ndarray],
    hidden: HiddenStates,
    bov_pos: int,
) -> ConditionBundle:
    """Conditioning for the image whose trigger token sits at ``bov_pos``:
    clean latents of every image before the trigger (seq_index by appearance)
    and the projected hidden states of all tokens before it."""
    if bov_pos < 0 or bov_pos >= hidden.valid_prefix_len + 1:
        raise InputError(f"bov_pos {bov_pos} outside the stream")
    patch = bundle.config.latent_patch
    cond_latents: list[codec.LatentImage] = []
    for order, (span, px) in enumerate(zip(stream.image_token_spans, span_pixels)):
        if span.end <= bov_pos:
            cond_latents.append(codec.encode(px, patch, seq_index=order))
    text_cond: ProjectedCondition = bundle.connector.project(hidden, bov_pos, stream.chunk_spans)
    return ConditionBundle(cond_latents=cond_latents, text_cond=text_cond)


def _require_prompt(prompt: InterleavedSequence) -> None:
    violations = validate_sequence(prompt)
    if violations:
        raise InputError("invalid prompt: " + "; ".join(violations))
    if prompt.chunks[-1].role != USER:
        raise InputError("prompt must end with a user turn")


def generate_interleaved(
    bundle: ModelBundle,
    prompt: InterleavedSequence,
    images: Mapping[str, np.ndarray],
    budget: GenerationBudget,
    temperature: float = 0.0,
) -> GenerationResult:
    """Run the full loop; deterministic given budget.seed. The output sequence
    is the prompt followed by the generated assistant chunks."""
    _require_prompt(prompt)
    vocab = bundle.vocab
    cfg = bundle.config
    builder = StreamBuilder(vocab, cfg.latent_patch, cfg.mllm_max_side_px)
    pixel_list: list[np.ndarray] = []  # one per image span, in order
    all_images: dict[str, np.ndarray] = {}
    for i, chunk in enumerate(prompt.chunks):
        if chunk.kind == TEXT:
            builder.add_text_bytes(i, chunk.role, chunk.text.encode("utf-8"))
        else:
            if chunk.image_ref not in images:
                raise InputError(f"prompt chunk {i}: image {chunk.image_ref} not provided")
            px = images[chunk.image_ref]
            builder.add_image(i, chunk.role, px.shape[0], px.shape[1])
            pixel_list.append(px)
            all_images[chunk.image_ref] = px

    decode_gen = torch.Generator().manual_seed(budget.seed)
    sampler_gen = torch.Generator().manual_seed(budget.seed + 1)

    new_chunks: list[Chunk] = []
    text_buf = bytearray()
    next_chunk = len(prompt.chunks)
    text_tokens = 0
    images_generated = 0
    truncated = False
    cond_counts: list[int] = []

    def flush_text() -> None:
        nonlocal next_chunk
        if text_buf:
            builder.close_text()
            new_chunks.append(Chunk(kind=TEXT, role=ASSISTANT, text=text_buf.decode("utf-8", errors="replace")))
            text_buf.clear()
            next_chunk += 1

    while True:
        stream = builder.build(append_eos=False)
        token = bundle.lm.decode_step(stream, pixel_list, temperature=temperature, generator=decode_gen)
        if token == vocab.eos_id:
            flush_text()
            break
        if token == vocab.bov_id:
            if images_generated >= budget.max_images:
                truncated = True
                flush_text()
                break
            flush_text()
            # hidden states for everything decoded so far condition the new image
            stream = builder.build(append_eos=False)
            with torch.no_grad():
                _, hidden = bundle.lm(stream, pixel_list)
            bov_pos = len(stream)  # the trigger lands at the next position
            cond = condition_from_context(bundle, stream, pixel_list, hidden, bov_pos)
            cond_counts.append(len(cond.cond_latents))
            h_lat = budget.image_shape[0] // cfg.latent_patch
            w_lat = budget.image_shape[1] // cfg.latent_patch
            if h_lat * cfg.latent_patch != budget.image_shape[0] or w_lat * cfg.latent_patch != budget.image_shape[1]:
                raise InputError("budget.image_shape must be divisible by latent_patch")
            latent = bundle.head.sample(cond, (h_lat, w_lat), budget.steps, budget.cfg_scale, sampler_gen)
            pixels = codec.decode(latent).astype(np.float32)
            ref = pixel_hash(pixels)
            builder.add_image(next_chunk, ASSISTANT, pixels.shape[0], pixels.shape[1])
            pixel_list.append(pixels)
            all_images[ref] = pixels
            new_chunks.append(Chunk(kind=IMAGE, role=ASSISTANT, image_ref=ref))
            next_chunk += 1
            images_generated += 1
            continue
        if token == vocab.pad_id or token == vocab.image_placeholder_id:
            # control ids with no textual surface; count them against the budget
            text_tokens += 1
        else:
            if not text_buf:
                builder.open_text(next_chunk, ASSISTANT)
            builder.push_text_byte(token)
            text_buf.append(token)
            text_tokens += 1
        if text_tokens >= budget.max_text_tokens:
            truncated = True
            flush_text()
            break

    out = InterleavedSequence(id=f"{prompt.id}::gen{budget.seed}", chunks=prompt.chunks + tuple(new_chunks))
    return GenerationResult(
        sequence=out,
        images=all_images,
        truncated=truncated,
        stats={
            "text_tokens": text_tokens,
            "images_generated": images_generated,
            "condition_frame_counts": cond_counts,
        },
    )
