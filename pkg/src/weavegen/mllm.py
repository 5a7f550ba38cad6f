"""Toy multimodal autoregressive LM.

Tokenization is byte-level (ids 0..255) with four control ids above, so there
is no external vocab asset and every stream is reproducible. Image chunks are
downscaled (aspect preserved, longest side capped) and become one placeholder
token per latent-size patch; an assistant image is announced by a single
vision-trigger (BOV) token that carries loss, the placeholders do not.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    ASSISTANT,
    IMAGE,
    TEXT,
    InputError,
    InterleavedSequence,
    TransformerDims,
    VocabSpec,
    validate_sequence,
)

EOS_KIND = "eos"


class MaskWarning(UserWarning):
    """Loss requested on a stream with no supervised positions."""


# ---------------------------------------------------------------------------
# Token stream


@dataclass(frozen=True)
class ChunkSpan:
    """Token range [start, end) owned by one chunk.

    The trigger token of an assistant image belongs to that image chunk's
    span. The terminal EOS is a sentinel span with chunk_index ==
    len(sequence.chunks) and kind "eos".
    """

    chunk_index: int
    start: int
    end: int
    kind: str
    role: str


@dataclass(frozen=True)
class ImageSpan:
    """Placeholder-token range of one image (trigger token excluded) plus the
    downscaled size the LM actually consumes."""

    chunk_index: int
    start: int
    end: int
    grid_h: int
    grid_w: int
    height_px: int
    width_px: int


@dataclass
class TokenStream:
    ids: np.ndarray  # [T] int64
    loss_mask: np.ndarray  # [T] uint8; 1 = supervised
    chunk_spans: list[ChunkSpan]
    image_token_spans: list[ImageSpan]

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def bov_positions(self, vocab: VocabSpec) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.ids == vocab.bov_id)]


@dataclass
class HiddenStates:
    """Per-layer activations; ``values`` is [layers, T, width]."""

    values: torch.Tensor
    valid_prefix_len: int

    def __post_init__(self):
        if self.valid_prefix_len > self.values.shape[1]:
            raise InputError("valid_prefix_len exceeds sequence length")


# ---------------------------------------------------------------------------
# Image geometry helpers


def scaled_size(height: int, width: int, max_side: int) -> tuple[int, int]:
    """Aspect-preserving downscale so max(h', w') <= max_side; never upscales."""
    long_side = max(height, width)
    if long_side <= max_side:
        return height, width
    scale = max_side / long_side
    return max(1, round(height * scale)), max(1, round(width * scale))


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic float bilinear resize (half-pixel centers, edges clamped)."""
    h, w = pixels.shape[0], pixels.shape[1]
    if (h, w) == (out_h, out_w):
        return pixels.astype(np.float32, copy=False)
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    p = pixels.astype(np.float64)
    top = p[y0][:, x0] * (1 - wx) + p[y0][:, x1] * wx
    bot = p[y1][:, x0] * (1 - wx) + p[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def patchify_for_lm(pixels: np.ndarray, span: ImageSpan, patch: int) -> np.ndarray:
    """Resize to the span's LM-input size, zero-pad to whole patches, and
    flatten row-major into [grid_h*grid_w, 3*patch^2]."""
    resized = resize_bilinear(pixels, span.height_px, span.width_px)
    ph, pw = span.grid_h * patch, span.grid_w * patch
    if resized.shape[0] != ph or resized.shape[1] != pw:
        padded = np.zeros((ph, pw, 3), dtype=np.float32)
        padded[: resized.shape[0], : resized.shape[1]] = resized
        resized = padded
    patches = resized.reshape(span.grid_h, patch, span.grid_w, patch, 3)
    patches = patches.transpose(0, 2, 1, 3, 4).reshape(span.grid_h * span.grid_w, 3 * patch * patch)
    return patches


# ---------------------------------------------------------------------------
# Stream construction


class StreamBuilder:
    """Incremental token-stream assembly.

    ``tokenize`` replays a whole sequence through it; the generation loop
    drives it token by token, so inference and training share one layout.
    """

    def __init__(self, vocab: VocabSpec, patch: int, max_side_px: int):
        if any(i < 256 for i in vocab.special_ids):
            raise InputError("byte-level vocab reserves ids 0..255; special ids must be >= 256")
        if max_side_px <= 0:
            raise InputError("max_side_px must be positive")
        self.vocab = vocab
        self.patch = patch
        self.max_side_px = max_side_px
        self._ids: list[int] = []
        self._mask: list[int] = []
        self._spans: list[ChunkSpan] = []
        self._image_spans: list[ImageSpan] = []
        self._open_text: tuple[int, str, int] | None = None  # (chunk_index, role, start)

    def __len__(self) -> int:
        return len(self._ids)

    def open_text(self, chunk_index: int, role: str) -> None:
        if self._open_text is not None:
            raise InputError("previous text chunk still open")
        self._open_text = (chunk_index, role, len(self._ids))

    def push_text_byte(self, byte_id: int) -> None:
        if self._open_text is None:
            raise InputError("no open text chunk")
        if not 0 <= byte_id < 256:
            raise InputError(f"text byte out of range: {byte_id}")
        _, role, _ = self._open_text
        self._ids.append(byte_id)
        self._mask.append(1 if role == ASSISTANT else 0)

    def close_text(self) -> None:
        if self._open_text is None:
            raise InputError("no open text chunk")
        chunk_index, role, start = self._open_text
        self._open_text = None
        if len(self._ids) > start:
            self._spans.append(ChunkSpan(chunk_index, start, len(self._ids), TEXT, role))

    def add_text_bytes(self, chunk_index: int, role: str, data: bytes) -> None:
        self.open_text(chunk_index, role)
        for b in data:
            self.push_text_byte(b)
        self.close_text()

    def add_image(self, chunk_index: int, role: str, height_px: int, width_px: int) -> ImageSpan:
        if self._open_text is not None:
            raise InputError("text chunk still open")
        h, w = scaled_size(height_px, width_px, self.max_side_px)
        gh, gw = math.ceil(h / self.patch), math.ceil(w / self.patch)
        span_start = len(self._ids)
        if role == ASSISTANT:
            self._ids.append(self.vocab.bov_id)
            self._mask.append(1)  # the trigger decision is supervised
        ph_start = len(self._ids)
        n = gh * gw
        self._ids.extend([self.vocab.image_placeholder_id] * n)
        self._mask.extend([0] * n)  # placeholders never carry text loss
        span = ImageSpan(chunk_index, ph_start, ph_start + n, gh, gw, h, w)
        self._image_spans.append(span)
        self._spans.append(ChunkSpan(chunk_index, span_start, len(self._ids), IMAGE, role))
        return span

    def build(self, append_eos: bool = True, eos_chunk_index: int | None = None) -> TokenStream:
        if self._open_text is not None:
            # snapshot mid-generation: close the working text span without mutating state
            chunk_index, role, start = self._open_text
            spans = list(self._spans)
            if len(self._ids) > start:
                spans.append(ChunkSpan(chunk_index, start, len(self._ids), TEXT, role))
        else:
            spans = list(self._spans)
        ids = list(self._ids)
        mask = list(self._mask)
        if append_eos:
            idx = eos_chunk_index if eos_chunk_index is not None else (spans[-1].chunk_index + 1 if spans else 0)
            spans = spans + [ChunkSpan(idx, len(ids), len(ids) + 1, EOS_KIND, ASSISTANT)]
            ids.append(self.vocab.eos_id)
            mask.append(1)  # stopping is a supervised decision
        return TokenStream(
            ids=np.asarray(ids, dtype=np.int64),
            loss_mask=np.asarray(mask, dtype=np.uint8),
            chunk_spans=spans,
            image_token_spans=list(self._image_spans),
        )


def tokenize(
    seq: InterleavedSequence,
    vocab: VocabSpec,
    patch: int,
    max_side_px: int,
    images: Mapping[str, np.ndarray],
) -> TokenStream:
    """Turn a valid sequence into ids + loss mask + span maps.

    ``images`` maps image_ref -> [H, W, 3] pixels; only shapes are read here.
    The terminal EOS is always appended and supervised.
    """
    violations = validate_sequence(seq)
    if violations:
        raise InputError("invalid sequence: " + "; ".join(violations))
    builder = StreamBuilder(vocab, patch, max_side_px)
    for i, chunk in enumerate(seq.chunks):
        if chunk.kind == TEXT:
            try:
                data = chunk.text.encode("utf-8")
            except UnicodeEncodeError as e:
                raise InputError(f"chunk {i}: unencodable text ({e.reason})") from e
            builder.add_text_bytes(i, chunk.role, data)
        else:
            if chunk.image_ref not in images:
                raise InputError(f"chunk {i}: image {chunk.image_ref} not provided")
            px = images[chunk.image_ref]
            builder.add_image(i, chunk.role, px.shape[0], px.shape[1])
    return builder.build(append_eos=True, eos_chunk_index=len(seq.chunks))


# ---------------------------------------------------------------------------
# Rotary helpers (1D; the generation head has its own 3D variant)


def rope_table(positions: torch.Tensor, dim: int, base: float = 10000.0) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables [T, dim/2] for rotary pairs; ``dim`` must be even."""
    half = dim // 2
    freqs = base ** (-torch.arange(half, dtype=torch.float64) / half)
    angles = positions.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cos(angles), torch.sin(angles)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate adjacent feature pairs of x [T, heads, head_dim] by the tables."""
    t, h, d = x.shape
    pairs = x.reshape(t, h, d // 2, 2)
    c = cos.to(x.dtype)[:, None, :]
    s = sin.to(x.dtype)[:, None, :]
    a, b = pairs[..., 0], pairs[..., 1]
    rotated = torch.stack((a * c - b * s, a * s + b * c), dim=-1)
    return rotated.reshape(t, h, d)


# ---------------------------------------------------------------------------
# Model


class _CausalSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, dtype: torch.dtype):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        if self.head_dim % 2 != 0:
            raise InputError("head_dim must be even for rotary pairs")
        self.qkv = nn.Linear(width, 3 * width, dtype=dtype)
        self.out = nn.Linear(width, width, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[0]
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.reshape(t, self.heads, self.head_dim)
        k = k.reshape(t, self.heads, self.head_dim)
        v = v.reshape(t, self.heads, self.head_dim)
        cos, sin = rope_table(torch.arange(t), self.head_dim)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        scores = torch.einsum("qhd,khd->hqk", q, k) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = torch.einsum("hqk,khd->qhd", attn, v).reshape(t, -1)
        return self.out(y)


class _LMBlock(nn.Module):
    def __init__(self, width: int, heads: int, dtype: torch.dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(width, dtype=dtype)
        self.attn = _CausalSelfAttention(width, heads, dtype)
        self.ln2 = nn.LayerNorm(width, dtype=dtype)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width, dtype=dtype),
            nn.GELU(),
            nn.Linear(4 * width, width, dtype=dtype),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class MultimodalLM(nn.Module):
    """Decoder-only byte LM whose image placeholders receive additive
    patch-pixel embeddings from a linear patch encoder."""

    def __init__(self, vocab: VocabSpec, dims: TransformerDims, patch: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.vocab = vocab
        self.dims = dims
        self.patch = patch
        self.embed = nn.Embedding(vocab.vocab_size, dims.width, dtype=dtype)
        self.patch_proj = nn.Linear(3 * patch * patch, dims.width, dtype=dtype)
        self.blocks = nn.ModuleList(_LMBlock(dims.width, dims.heads, dtype) for _ in range(dims.layers))
        self.norm = nn.LayerNorm(dims.width, dtype=dtype)
        self.lm_head = nn.Linear(dims.width, vocab.vocab_size, dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def embed_stream(self, stream: TokenStream, pixels: Sequence[np.ndarray]) -> torch.Tensor:
        if len(pixels) != len(stream.image_token_spans):
            raise InputError(
                f"{len(stream.image_token_spans)} image spans but {len(pixels)} pixel arrays"
            )
        ids = torch.from_numpy(stream.ids)
        x = self.embed(ids)
        if stream.image_token_spans:
            pos, emb = [], []
            for span, px in zip(stream.image_token_spans, pixels):
                patches = patchify_for_lm(px, span, self.patch)
                pos.append(torch.arange(span.start, span.end))
                emb.append(self.patch_proj(torch.from_numpy(patches).to(self.dtype)))
            x = x.index_add(0, torch.cat(pos), torch.cat(emb))
        return x

    def forward(self, stream: TokenStream, pixels: Sequence[np.ndarray]) -> tuple[torch.Tensor, HiddenStates]:
        x = self.embed_stream(stream, pixels)
        layer_outputs = []
        for block in self.blocks:
            x = block(x)
            layer_outputs.append(x)
        logits = self.lm_head(self.norm(x))
        hidden = HiddenStates(values=torch.stack(layer_outputs, dim=0), valid_prefix_len=len(stream))
        return logits, hidden

    @torch.no_grad()
    def decode_step(
        self,
        stream: TokenStream,
        pixels: Sequence[np.ndarray],
        temperature: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> int:
        """Next token id from the last position: greedy at temperature<=0,
        else a categorical sample (deterministic given the generator)."""
        logits, _ = self.forward(stream, pixels)
        last = logits[-1]
        if temperature <= 0.0:
            return int(torch.argmax(last).item())
        probs = torch.softmax(last.to(torch.float64) / temperature, dim=-1)
        return int(torch.multinomial(probs, 1, generator=generator).item())


def ntp_loss(logits: torch.Tensor, stream: TokenStream) -> torch.Tensor:
    """Mean cross-entropy predicting ids[t] from logits[t-1] over supervised
    positions; masked positions contribute nothing. An all-masked stream
    yields 0 with a MaskWarning."""
    if logits.shape[0] != len(stream):
        raise InputError(f"logits length {logits.shape[0]} != stream length {len(stream)}")
    mask = torch.from_numpy(stream.loss_mask.astype(bool)).clone()
    mask[0] = False  # nothing precedes position 0
    positions = torch.nonzero(mask, as_tuple=False).squeeze(-1)
    if positions.numel() == 0:
        warnings.warn("no supervised positions; loss defined as 0", MaskWarning)
        return logits.sum() * 0.0
    targets = torch.from_numpy(stream.ids)[positions]
    preds = logits[positions - 1]
    return F.cross_entropy(preds, targets)


def supervised_positions(stream: TokenStream) -> list[int]:
    """Positions with loss_mask=1 excluding position 0 (the actual supervision set)."""
    mask = stream.loss_mask.astype(bool).copy()
    mask[0] = False
    return [int(i) for i in np.flatnonzero(mask)]
