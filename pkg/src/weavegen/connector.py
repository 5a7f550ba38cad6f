"""Projects stacked LM hidden states into the generation head's text-conditioning space.

All LM layers are concatenated along the channel axis and mapped by a single
affine layer, deliberately linear so exact matrix-multiply oracles apply.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .core import InputError
from .mllm import ChunkSpan, HiddenStates


@dataclass
class ProjectedCondition:
    """Text condition rows for all tokens strictly before the vision trigger,
    with the span map those rows came from (guidance needs it to drop the
    final text chunk)."""

    values: torch.Tensor  # [T_cond, d_out]
    chunk_spans: list[ChunkSpan]

    def __len__(self) -> int:
        return int(self.values.shape[0])


class ConditionProjector(nn.Module):
    def __init__(self, lm_layers: int, d_lm: int, d_out: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.lm_layers = lm_layers
        self.d_lm = d_lm
        self.d_out = d_out
        self.proj = nn.Linear(lm_layers * d_lm, d_out, dtype=dtype)

    def project(self, hidden: HiddenStates, bov_pos: int, chunk_spans: list[ChunkSpan]) -> ProjectedCondition:
        """Affine map of the layer-stacked states h[:, :bov_pos]; tokens at or
        after bov_pos never influence the output."""
        if bov_pos <= 0:
            raise InputError("empty condition context")
        if bov_pos > hidden.valid_prefix_len:
            raise InputError(f"bov_pos {bov_pos} beyond valid prefix {hidden.valid_prefix_len}")
        layers, t, d = hidden.values.shape
        if layers != self.lm_layers or d != self.d_lm:
            raise InputError(f"hidden states [{layers}, ., {d}] do not match projector ({self.lm_layers}, {self.d_lm})")
        prefix = hidden.values[:, :bov_pos, :]  # [L, T_cond, d]
        stacked = prefix.permute(1, 0, 2).reshape(bov_pos, layers * d)
        truncated = [
            ChunkSpan(s.chunk_index, s.start, min(s.end, bov_pos), s.kind, s.role)
            for s in chunk_spans
            if s.start < bov_pos
        ]
        return ProjectedCondition(values=self.proj(stacked), chunk_spans=truncated)
