"""Diffusion-transformer generation head.

The head is a bidirectional transformer over flattened image latents: clean
condition frames are concatenated with the noisy target along a temporal axis
whose index increases by one per image, spatial rotary indices follow each
image's own latent grid, and the projected LM states condition every layer
through cross-attention. Training regresses the flow-matching velocity along
x_t = (1-t)*x0 + t*eps (target eps - x0); sampling Euler-integrates that
field from noise with a guidance variant whose negative branch keeps the
visual conditions and drops only the final text chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch
from torch import nn

from .codec import LatentImage
from .connector import ProjectedCondition
from .core import InputError, TransformerDims
from .mllm import TEXT, ChunkSpan, apply_rope

if TYPE_CHECKING:  # avoids a module cycle; packing imports PositionIndex from here
    from .packing import PackedVisualSequence


# ---------------------------------------------------------------------------
# Positional indexing


@dataclass(frozen=True)
class PositionIndex:
    """(t, h, w) of one latent token; t is constant within an image and
    increments between consecutive images, the noisy target having the
    largest t."""

    t: int
    h: int
    w: int


def position_indices(
    layout: Sequence[tuple[int, int]], target: tuple[int, int]
) -> list[PositionIndex]:
    """Indices for condition grids ``layout`` (t = 0..k-1) followed by the
    target grid (t = len(layout)), row-major within each image."""
    out: list[PositionIndex] = []
    for t, (h, w) in enumerate(list(layout) + [target]):
        if h <= 0 or w <= 0:
            raise InputError(f"image {t}: non-positive latent grid {h}x{w}")
        for i in range(h):
            for j in range(w):
                out.append(PositionIndex(t=t, h=i, w=j))
    return out


def positions_to_array(positions: Sequence[PositionIndex]) -> np.ndarray:
    return np.asarray([(p.t, p.h, p.w) for p in positions], dtype=np.int64)


# ---------------------------------------------------------------------------
# Flow state and conditioning bundle


@dataclass(frozen=True)
class FlowState:
    """One interpolation point of the rectified path between data and noise."""

    t_diff: float
    x_t: torch.Tensor
    eps: torch.Tensor
    v_target: torch.Tensor


def make_flow_state(x0: torch.Tensor, t_diff: float, eps: torch.Tensor) -> FlowState:
    if not 0.0 <= t_diff <= 1.0:
        raise InputError(f"t_diff must lie in [0, 1], got {t_diff}")
    x_t = (1.0 - t_diff) * x0 + t_diff * eps
    return FlowState(t_diff=t_diff, x_t=x_t, eps=eps, v_target=eps - x0)


@dataclass
class ConditionBundle:
    """Everything the head is conditioned on: clean latents of all images
    before the vision trigger (possibly none) plus the projected text rows."""

    cond_latents: list[LatentImage]
    text_cond: ProjectedCondition

    def __post_init__(self):
        indices = [l.seq_index for l in self.cond_latents]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise InputError(f"condition seq_index values must strictly increase, got {indices}")

    def layout(self) -> list[tuple[int, int]]:
        return [l.grid for l in self.cond_latents]


def drop_final_text_chunk(cond: ProjectedCondition) -> ProjectedCondition:
    """Negative condition for guidance: remove the rows of the last maximal
    text span; image rows (the visual context the LM saw) stay put. With no
    text span the condition is returned unchanged; dropping the only span
    leaves the empty-text negative."""
    text_spans = [s for s in cond.chunk_spans if s.kind == TEXT]
    if not text_spans:
        return ProjectedCondition(values=cond.values, chunk_spans=list(cond.chunk_spans))
    last = max(text_spans, key=lambda s: s.start)
    keep = torch.cat([cond.values[: last.start], cond.values[last.end :]], dim=0)
    width = last.end - last.start
    spans: list[ChunkSpan] = []
    for s in cond.chunk_spans:
        if s is last:
            continue
        if s.start >= last.end:
            spans.append(ChunkSpan(s.chunk_index, s.start - width, s.end - width, s.kind, s.role))
        else:
            spans.append(s)
    return ProjectedCondition(values=keep, chunk_spans=spans)


# ---------------------------------------------------------------------------
# Rotary tables over (t, h, w)


def rope_3d_tables(
    pos: torch.Tensor, head_dim: int, base: float = 10000.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin [N, head_dim/2]: the head dim is split into a temporal band and
    two equal spatial bands (each even), rotated by t, h, w respectively."""
    if head_dim % 2 != 0:
        raise InputError("head_dim must be even")
    dim_s = 2 * (head_dim // 6)
    dim_t = head_dim - 2 * dim_s
    angle_parts = []
    for coord, d in ((pos[:, 0], dim_t), (pos[:, 1], dim_s), (pos[:, 2], dim_s)):
        if d == 0:
            continue
        half = d // 2
        freqs = base ** (-torch.arange(half, dtype=torch.float64) / half)
        angle_parts.append(coord.to(torch.float64)[:, None] * freqs[None, :])
    angles = torch.cat(angle_parts, dim=1)
    return torch.cos(angles), torch.sin(angles)


# ---------------------------------------------------------------------------
# Transformer internals


def _masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, allowed: torch.Tensor
) -> torch.Tensor:
    """Attention [Nq,H,D]x[Nk,H,D] restricted to ``allowed`` [Nq,Nk]; query
    rows with no allowed key yield exact zeros (and clean gradients)."""
    scores = torch.einsum("qhd,khd->hqk", q, k) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~allowed[None, :, :], float("-inf"))
    has_key = allowed.any(dim=1)  # [Nq]
    safe = torch.where(has_key[None, :, None], scores, torch.zeros_like(scores))
    attn = torch.softmax(safe, dim=-1)
    out = torch.einsum("hqk,khd->qhd", attn, v)
    return torch.where(has_key[:, None, None], out, torch.zeros_like(out))


class _PackedSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, dtype: torch.dtype):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        if self.head_dim % 2 != 0:
            raise InputError("head_dim must be even for rotary pairs")
        self.qkv = nn.Linear(width, 3 * width, dtype=dtype)
        self.out = nn.Linear(width, width, dtype=dtype)

    def forward(
        self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor, allowed: torch.Tensor
    ) -> torch.Tensor:
        n = x.shape[0]
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = apply_rope(q.reshape(n, self.heads, self.head_dim), cos, sin)
        k = apply_rope(k.reshape(n, self.heads, self.head_dim), cos, sin)
        v = v.reshape(n, self.heads, self.head_dim)
        return self.out(_masked_attention(q, k, v, allowed).reshape(n, -1))


class _TextCrossAttention(nn.Module):
    def __init__(self, width: int, d_cond: int, heads: int, dtype: torch.dtype):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q = nn.Linear(width, width, dtype=dtype)
        self.k = nn.Linear(d_cond, width, dtype=dtype)
        self.v = nn.Linear(d_cond, width, dtype=dtype)
        self.out = nn.Linear(width, width, dtype=dtype)

    def forward(self, x: torch.Tensor, text: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        if text.shape[0] == 0:
            return torch.zeros_like(x)
        q = self.q(x).reshape(n, self.heads, self.head_dim)
        k = self.k(text).reshape(text.shape[0], self.heads, self.head_dim)
        v = self.v(text).reshape(text.shape[0], self.heads, self.head_dim)
        return self.out(_masked_attention(q, k, v, allowed).reshape(n, -1))


class _DiTBlock(nn.Module):
    def __init__(self, width: int, d_cond: int, heads: int, dtype: torch.dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(width, dtype=dtype)
        self.self_attn = _PackedSelfAttention(width, heads, dtype)
        self.ln2 = nn.LayerNorm(width, dtype=dtype)
        self.cross_attn = _TextCrossAttention(width, d_cond, heads, dtype)
        self.ln3 = nn.LayerNorm(width, dtype=dtype)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width, dtype=dtype),
            nn.GELU(),
            nn.Linear(4 * width, width, dtype=dtype),
        )

    def forward(self, x, cos, sin, self_allowed, text, cross_allowed):
        x = x + self.self_attn(self.ln1(x), cos, sin, self_allowed)
        x = x + self.cross_attn(self.ln2(x), text, cross_allowed)
        x = x + self.mlp(self.ln3(x))
        return x


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal featurization of diffusion time in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.to(torch.float64)[:, None] * 1000.0 * freqs[None, :]
    feats = torch.cat([torch.cos(ang), torch.sin(ang)], dim=1)
    if dim % 2 == 1:
        feats = torch.cat([feats, torch.zeros(t.shape[0], 1, dtype=torch.float64)], dim=1)
    return feats


@dataclass
class SamplerStep:
    """Per-step sampler record for auditing guidance arithmetic."""

    t_diff: float
    x: np.ndarray  # state the velocities were evaluated at
    v_pos: np.ndarray | None
    v_neg: np.ndarray | None
    v_guided: np.ndarray


class GenerationHead(nn.Module):
    def __init__(
        self,
        dims: TransformerDims,
        latent_channels: int,
        d_cond: int,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.dims = dims
        self.latent_channels = latent_channels
        self.d_cond = d_cond
        self.token_in = nn.Linear(latent_channels, dims.width, dtype=dtype)
        self.t_mlp = nn.Sequential(
            nn.Linear(dims.width, dims.width, dtype=dtype),
            nn.SiLU(),
            nn.Linear(dims.width, dims.width, dtype=dtype),
        )
        self.blocks = nn.ModuleList(
            _DiTBlock(dims.width, d_cond, dims.heads, dtype) for _ in range(dims.layers)
        )
        self.out_norm = nn.LayerNorm(dims.width, dtype=dtype)
        self.token_out = nn.Linear(dims.width, latent_channels, dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.token_in.weight.dtype

    def forward_tokens(
        self,
        tokens: torch.Tensor,  # [N, c_lat]
        pos: torch.Tensor,  # [N, 3] (t, h, w)
        sample_ids: torch.Tensor,  # [N]
        is_target: torch.Tensor,  # [N] bool
        t_diff: torch.Tensor,  # [S] one diffusion time per sample
        text: torch.Tensor,  # [M, d_cond]
        text_sample_ids: torch.Tensor,  # [M]
    ) -> torch.Tensor:
        """Velocity at every token; callers read the target rows. Attention is
        block-diagonal by sample id (bidirectional within a sample); the
        timestep embedding is added to noisy target tokens only."""
        if tokens.shape[1] != self.latent_channels:
            raise InputError(f"expected {self.latent_channels} latent channels, got {tokens.shape[1]}")
        x = self.token_in(tokens.to(self.dtype))
        temb = self.t_mlp(timestep_features(t_diff, self.dims.width).to(self.dtype))
        x = x + is_target.to(self.dtype)[:, None] * temb[sample_ids]
        head_dim = self.dims.width // self.dims.heads
        cos, sin = rope_3d_tables(pos, head_dim)
        self_allowed = sample_ids[:, None] == sample_ids[None, :]
        if text.shape[0] > 0:
            cross_allowed = sample_ids[:, None] == text_sample_ids[None, :]
        else:
            cross_allowed = torch.zeros((tokens.shape[0], 0), dtype=torch.bool)
        text = text.to(self.dtype)
        for block in self.blocks:
            x = block(x, cos, sin, self_allowed, text, cross_allowed)
        return self.token_out(self.out_norm(x))

    # -- single-sample entry points ------------------------------------------

    def _single_sample_inputs(
        self, x_t: torch.Tensor, cond: ConditionBundle
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        cond_tokens = [
            torch.from_numpy(np.ascontiguousarray(l.data)).reshape(l.tokens, l.channels).to(self.dtype)
            for l in cond.cond_latents
        ]
        th, tw = int(x_t.shape[0]), int(x_t.shape[1])
        tokens = torch.cat(cond_tokens + [x_t.reshape(th * tw, -1).to(self.dtype)], dim=0)
        pos = torch.from_numpy(positions_to_array(position_indices(cond.layout(), (th, tw))))
        n = tokens.shape[0]
        sample_ids = torch.zeros(n, dtype=torch.long)
        is_target = torch.zeros(n, dtype=torch.bool)
        is_target[n - th * tw :] = True
        text_ids = torch.zeros(len(cond.text_cond), dtype=torch.long)
        return tokens, pos, sample_ids, is_target, cond.text_cond.values, text_ids

    def velocity(self, x_t: torch.Tensor, t_diff: float, cond: ConditionBundle) -> torch.Tensor:
        """Velocity field for one target latent [h, w, c] under the bundle."""
        if x_t.ndim != 3 or x_t.shape[2] != self.latent_channels:
            raise InputError(f"x_t must be [h, w, {self.latent_channels}], got {tuple(x_t.shape)}")
        tokens, pos, sample_ids, is_target, text, text_ids = self._single_sample_inputs(x_t, cond)
        out = self.forward_tokens(
            tokens, pos, sample_ids, is_target,
            torch.tensor([t_diff], dtype=self.dtype), text, text_ids,
        )
        th, tw = int(x_t.shape[0]), int(x_t.shape[1])
        return out[out.shape[0] - th * tw :].reshape(th, tw, self.latent_channels)

    def flow_loss(
        self,
        x0: LatentImage,
        cond: ConditionBundle,
        generator: torch.Generator | None = None,
        *,
        t_diff: float | None = None,
        eps: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Mean squared error of the predicted velocity against eps - x0 at a
        uniformly drawn diffusion time; deterministic given the generator.
        ``t_diff``/``eps`` may be pinned for oracle tests."""
        x0_t = torch.from_numpy(np.ascontiguousarray(x0.data)).to(self.dtype)
        if t_diff is None:
            t_diff = float(torch.rand((), generator=generator, dtype=torch.float64).item())
        if eps is None:
            eps = torch.randn(x0_t.shape, generator=generator, dtype=torch.float64).to(self.dtype)
        state = make_flow_state(x0_t, t_diff, eps.to(self.dtype))
        v = self.velocity(state.x_t, state.t_diff, cond)
        return torch.mean((v - state.v_target) ** 2)

    # -- packed entry points ---------------------------------------------------

    def flow_loss_packed(
        self,
        packed: "PackedVisualSequence",
        text_conds: Sequence[ProjectedCondition],
        generator: torch.Generator | None = None,
        *,
        t_diffs: Sequence[float] | None = None,
        epses: Sequence[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """Flow loss over a packed batch: per-sample target MSE averaged across
        samples, so it equals the mean of single-sample losses given the same
        draws (the sample mask makes packing semantically inert)."""
        n_samples = len(packed.sample_boundaries) - 1
        if len(text_conds) != n_samples:
            raise InputError(f"{n_samples} packed samples but {len(text_conds)} text conditions")
        tokens = torch.from_numpy(np.ascontiguousarray(packed.tokens)).to(self.dtype)
        pos = torch.from_numpy(positions_to_array(packed.positions))
        sample_ids = torch.from_numpy(packed.token_sample_ids())
        target_rows = torch.from_numpy(packed.target_row_mask())
        if t_diffs is None:
            t_diffs = [float(torch.rand((), generator=generator, dtype=torch.float64).item()) for _ in range(n_samples)]
        drawn_eps: list[torch.Tensor] = []
        states: list[FlowState] = []
        noisy = tokens.clone()
        for s in range(n_samples):
            rows = (sample_ids == s) & target_rows
            x0_rows = tokens[rows]
            if epses is None:
                eps = torch.randn(x0_rows.shape, generator=generator, dtype=torch.float64).to(self.dtype)
            else:
                eps = epses[s].reshape(x0_rows.shape).to(self.dtype)
            drawn_eps.append(eps)
            state = make_flow_state(x0_rows, float(t_diffs[s]), eps)
            states.append(state)
            noisy[rows] = state.x_t
        text = torch.cat([tc.values.to(self.dtype) for tc in text_conds], dim=0) if text_conds else torch.zeros(0, self.d_cond)
        text_ids = torch.cat(
            [torch.full((len(tc),), s, dtype=torch.long) for s, tc in enumerate(text_conds)]
        ) if text_conds else torch.zeros(0, dtype=torch.long)
        out = self.forward_tokens(
            noisy, pos, sample_ids, target_rows,
            torch.tensor([float(t) for t in t_diffs], dtype=self.dtype), text, text_ids,
        )
        per_sample = []
        for s in range(n_samples):
            rows = (sample_ids == s) & target_rows
            per_sample.append(torch.mean((out[rows] - states[s].v_target) ** 2))
        return torch.stack(per_sample).mean()

    # -- sampling ----------------------------------------------------------------

    @torch.no_grad()
    def sample(
        self,
        cond: ConditionBundle,
        shape: tuple[int, int],
        steps: int,
        cfg_scale: float,
        generator: torch.Generator | None = None,
        trace: list[SamplerStep] | None = None,
    ) -> LatentImage:
        """Euler-integrate dx/dt = -v from t=1 (noise) to t=0 in uniform steps.

        Guidance: v = v_neg + s*(v_pos - v_neg) where the negative bundle keeps
        every visual condition and drops the final text chunk. s=1 and s=0
        short-circuit to exactly v_pos / v_neg.
        """
        if steps < 1:
            raise InputError("steps must be >= 1")
        if cfg_scale < 0:
            raise InputError("cfg_scale must be >= 0")
        h, w = shape
        neg_bundle = ConditionBundle(
            cond_latents=list(cond.cond_latents),
            text_cond=drop_final_text_chunk(cond.text_cond),
        )
        x = torch.randn((h, w, self.latent_channels), generator=generator, dtype=torch.float64).to(self.dtype)
        for k in range(steps):
            t = 1.0 - k / steps
            v_pos = self.velocity(x, t, cond) if cfg_scale != 0.0 else None
            v_neg = self.velocity(x, t, neg_bundle) if cfg_scale != 1.0 else None
            if cfg_scale == 1.0:
                v = v_pos
            elif cfg_scale == 0.0:
                v = v_neg
            else:
                v = v_neg + cfg_scale * (v_pos - v_neg)
            if trace is not None:
                trace.append(
                    SamplerStep(
                        t_diff=t,
                        x=x.cpu().numpy().copy(),
                        v_pos=None if v_pos is None else v_pos.cpu().numpy().copy(),
                        v_neg=None if v_neg is None else v_neg.cpu().numpy().copy(),
                        v_guided=v.cpu().numpy().copy(),
                    )
                )
            x = x - v / steps
        patch = int(round(math.sqrt(self.latent_channels / 3)))
        return LatentImage(
            data=x.cpu().numpy(),
            height_px=h * patch,
            width_px=w * patch,
            seq_index=len(cond.cond_latents),
        )
