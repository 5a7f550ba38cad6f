"""Packed-sequence construction for heterogeneous interleaved visual samples.

Samples of different lengths and resolutions are flattened and concatenated
with no padding; per-image restore metadata and per-token (t, h, w) indices
ride along, and a block-diagonal mask keyed on sample id keeps attention from
crossing sample boundaries (which is what makes packing semantically inert).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import LatentImage
from .core import InputError
from .genhead import PositionIndex, position_indices


class PackCorruptionError(ValueError):
    """Packed metadata is inconsistent with the token array."""


@dataclass(frozen=True)
class PackedImageMeta:
    height_px: int
    width_px: int
    seq_index: int
    sample_id: int
    is_target: bool


@dataclass
class PackedVisualSequence:
    tokens: np.ndarray  # [sum tokens, c_lat]
    meta: list[PackedImageMeta]
    positions: list[PositionIndex]
    sample_boundaries: list[int]  # token offset where each sample starts, plus the total

    def image_token_counts(self, patch: int) -> list[int]:
        return [(m.height_px // patch) * (m.width_px // patch) for m in self.meta]

    def _patch(self) -> int:
        c = self.tokens.shape[1]
        p = int(round((c / 3) ** 0.5))
        if 3 * p * p != c:
            raise PackCorruptionError(f"token channels {c} is not 3*patch^2")
        return p

    def token_sample_ids(self) -> np.ndarray:
        """Per-token owning sample id."""
        patch = self._patch()
        ids = np.empty(self.tokens.shape[0], dtype=np.int64)
        off = 0
        for m, n in zip(self.meta, self.image_token_counts(patch)):
            ids[off : off + n] = m.sample_id
            off += n
        if off != self.tokens.shape[0]:
            raise PackCorruptionError(f"meta covers {off} tokens, array has {self.tokens.shape[0]}")
        return ids

    def target_row_mask(self) -> np.ndarray:
        """Per-token flag marking tokens of each sample's target image."""
        patch = self._patch()
        mask = np.zeros(self.tokens.shape[0], dtype=bool)
        off = 0
        for m, n in zip(self.meta, self.image_token_counts(patch)):
            if m.is_target:
                mask[off : off + n] = True
            off += n
        return mask


def pack(samples: Sequence[tuple[Sequence[LatentImage], LatentImage]]) -> PackedVisualSequence:
    """Concatenate (condition latents, target latent) samples in order.

    Temporal/spatial indices restart at t=0 for every sample; each sample
    contributes exactly one target image (the last, largest-t one).
    """
    tokens: list[np.ndarray] = []
    meta: list[PackedImageMeta] = []
    positions: list[PositionIndex] = []
    boundaries = [0]
    total = 0
    for sid, sample in enumerate(samples):
        try:
            conds, target = sample
        except (TypeError, ValueError) as e:
            raise InputError(f"sample {sid}: expected (cond_latents, target)") from e
        if not isinstance(target, LatentImage):
            raise InputError(f"sample {sid}: missing target latent")
        for lat in list(conds) + [target]:
            tokens.append(np.ascontiguousarray(lat.data).reshape(lat.tokens, lat.channels))
            meta.append(
                PackedImageMeta(
                    height_px=lat.height_px,
                    width_px=lat.width_px,
                    seq_index=lat.seq_index,
                    sample_id=sid,
                    is_target=lat is target,
                )
            )
            total += lat.tokens
        positions.extend(position_indices([c.grid for c in conds], target.grid))
        boundaries.append(total)
    if not tokens:
        return PackedVisualSequence(
            tokens=np.zeros((0, 0), dtype=np.float32), meta=[], positions=[], sample_boundaries=[0]
        )
    return PackedVisualSequence(
        tokens=np.concatenate(tokens, axis=0),
        meta=meta,
        positions=positions,
        sample_boundaries=boundaries,
    )


def unpack(p: PackedVisualSequence) -> list[tuple[list[LatentImage], LatentImage]]:
    """Exact inverse of :func:`pack`; raises PackCorruptionError when the
    metadata no longer matches the token array."""
    if not p.meta:
        if p.tokens.shape[0] != 0:
            raise PackCorruptionError("tokens present but no image metadata")
        return []
    patch = p._patch()
    counts = p.image_token_counts(patch)
    if sum(counts) != p.tokens.shape[0]:
        raise PackCorruptionError(
            f"meta accounts for {sum(counts)} tokens, array has {p.tokens.shape[0]}"
        )
    n_samples = p.meta[-1].sample_id + 1
    if p.sample_boundaries[-1] != p.tokens.shape[0] or len(p.sample_boundaries) != n_samples + 1:
        raise PackCorruptionError("sample boundaries do not cover the token array")
    per_sample_targets = [0] * n_samples
    out: list[tuple[list[LatentImage], LatentImage]] = []
    conds: list[LatentImage] = []
    off = 0
    for m, n in zip(p.meta, counts):
        hl, wl = m.height_px // patch, m.width_px // patch
        lat = LatentImage(
            data=np.ascontiguousarray(p.tokens[off : off + n].reshape(hl, wl, -1)),
            height_px=m.height_px,
            width_px=m.width_px,
            seq_index=m.seq_index,
        )
        off += n
        if m.is_target:
            per_sample_targets[m.sample_id] += 1
            out.append((conds, lat))
            conds = []
        else:
            conds.append(lat)
    if conds:
        raise PackCorruptionError("trailing condition images with no target")
    if any(c != 1 for c in per_sample_targets):
        raise PackCorruptionError(f"expected exactly one target per sample, got {per_sample_targets}")
    return out


def attention_mask(p: PackedVisualSequence) -> np.ndarray:
    """[N, N] boolean mask: attention allowed iff both tokens share a sample."""
    ids = p.token_sample_ids()
    return ids[:, None] == ids[None, :]
