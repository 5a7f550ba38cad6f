"""Two-stage decoupled training.

Stage 1 (instruction tuning) updates only the LM with next-token loss on
multimodal conversations; alignment-style records are rejected there because
they carry no real dialogue. Stage 2 (context alignment) freezes the LM and
fits connector + generation head with the flow loss, one uniformly chosen
assistant image per sequence as the target and everything before it as
conditioning. Freezing is bitwise, not approximate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import codec
from .bundle import ModelBundle, save_checkpoint
from .connector import ProjectedCondition
from .core import (
    ASSISTANT,
    IMAGE,
    ImageStore,
    InputError,
    InterleavedSequence,
    ShardRecord,
    read_shard,
)
from .mllm import TokenStream, ntp_loss, tokenize
from .packing import pack

STAGE_INSTRUCTION_TUNING = "instruction_tuning"
STAGE_CONTEXT_ALIGNMENT = "context_alignment"

_GROUPS = frozenset({"mllm", "connector", "genhead"})


@dataclass(frozen=True)
class StagePlan:
    stage: str
    trainable: frozenset[str]
    frozen: frozenset[str]
    data_mix: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.trainable & self.frozen:
            raise InputError("trainable and frozen parameter groups overlap")
        if (self.trainable | self.frozen) != _GROUPS:
            raise InputError(f"plan must cover groups {sorted(_GROUPS)}")
        expected = {
            STAGE_INSTRUCTION_TUNING: frozenset({"mllm"}),
            STAGE_CONTEXT_ALIGNMENT: frozenset({"connector", "genhead"}),
        }.get(self.stage)
        if expected is None:
            raise InputError(f"unknown stage {self.stage!r}")
        if self.trainable != expected:
            raise InputError(f"stage {self.stage} must train exactly {sorted(expected)}")
        if any(w <= 0 for w in self.data_mix.values()):
            raise InputError("data mix weights must be positive")


def stage1_plan(data_mix: Mapping[str, float] | None = None) -> StagePlan:
    return StagePlan(
        stage=STAGE_INSTRUCTION_TUNING,
        trainable=frozenset({"mllm"}),
        frozen=frozenset({"connector", "genhead"}),
        data_mix=dict(data_mix or {}),
    )


def stage2_plan(data_mix: Mapping[str, float] | None = None) -> StagePlan:
    return StagePlan(
        stage=STAGE_CONTEXT_ALIGNMENT,
        trainable=frozenset({"connector", "genhead"}),
        frozen=frozenset({"mllm"}),
        data_mix=dict(data_mix or {}),
    )


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class TrainingSample:
    sequence: InterleavedSequence
    images: dict[str, np.ndarray]
    meta: dict

    def assistant_image_chunks(self) -> list[int]:
        return [
            i for i, c in enumerate(self.sequence.chunks) if c.kind == IMAGE and c.role == ASSISTANT
        ]


def sample_from_record(rec: ShardRecord, store: ImageStore) -> TrainingSample:
    images = {ref: store.get(ref) for ref in rec.sequence.image_refs()}
    return TrainingSample(sequence=rec.sequence, images=images, meta=dict(rec.meta))


def load_training_samples(shard_path: str | Path) -> list[TrainingSample]:
    shard_path = Path(shard_path)
    store = ImageStore(shard_path.parent)
    return [sample_from_record(rec, store) for rec in read_shard(shard_path)]


def choose_target_image(sample: TrainingSample, rng: np.random.Generator) -> int | None:
    """Uniformly pick the chunk index of one assistant image, or None if the
    sequence has no generable image."""
    candidates = sample.assistant_image_chunks()
    if not candidates:
        return None
    return int(candidates[rng.integers(len(candidates))])


# ---------------------------------------------------------------------------
# Shared plumbing


@dataclass
class TrainResult:
    losses: list[float]
    log: list[dict]
    skipped: int = 0
    checkpoint_path: Path | None = None


def _mixture(
    datasets: Mapping[str, Sequence[TrainingSample]], mix: Mapping[str, float]
) -> tuple[list[str], np.ndarray]:
    names = sorted(datasets)
    if not names or all(len(datasets[n]) == 0 for n in names):
        raise InputError("empty dataset")
    unknown = set(mix) - set(names)
    if unknown:
        raise InputError(f"data mix names {sorted(unknown)} not among datasets {names}")
    weights = np.asarray([mix.get(n, 1.0) for n in names], dtype=np.float64)
    weights[[len(datasets[n]) == 0 for n in names]] = 0.0
    if weights.sum() <= 0:
        raise InputError("empty dataset")
    return names, weights / weights.sum()


def _set_trainable(bundle: ModelBundle, plan: StagePlan) -> list[torch.nn.Parameter]:
    trainable_params: list[torch.nn.Parameter] = []
    for name, mod in bundle.param_groups().items():
        requires = name in plan.trainable
        for p in mod.parameters():
            p.requires_grad_(requires)
        if requires:
            trainable_params.extend(mod.parameters())
    return trainable_params


def _restore_trainable(bundle: ModelBundle) -> None:
    for mod in bundle.param_groups().values():
        for p in mod.parameters():
            p.requires_grad_(True)


def _forward_inputs(bundle: ModelBundle, sample: TrainingSample) -> tuple[TokenStream, list[np.ndarray]]:
    stream = tokenize(
        sample.sequence,
        bundle.vocab,
        bundle.config.latent_patch,
        bundle.config.mllm_max_side_px,
        sample.images,
    )
    chunk_pixels = {
        i: sample.images[c.image_ref]
        for i, c in enumerate(sample.sequence.chunks)
        if c.kind == IMAGE
    }
    pixels = [chunk_pixels[s.chunk_index] for s in stream.image_token_spans]
    return stream, pixels


def _write_log(log: list[dict], out_dir: Path | None, name: str) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w", encoding="utf-8") as f:
        for entry in log:
            f.write(json.dumps(entry) + "\n")


# ---------------------------------------------------------------------------
# Stage 1: instruction tuning


def run_stage1(
    bundle: ModelBundle,
    plan: StagePlan,
    datasets: Mapping[str, Sequence[TrainingSample]],
    *,
    steps: int | None = None,
    lr: float | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    if plan.stage != STAGE_INSTRUCTION_TUNING:
        raise InputError(f"stage-1 runner given plan for {plan.stage!r}")
    for name, ds in datasets.items():
        for sample in ds:
            if sample.meta.get("no_dialogue"):
                raise InputError(
                    f"dataset {name!r} contains no_dialogue alignment records; "
                    "they are excluded from instruction tuning"
                )
    steps = steps if steps is not None else bundle.config.stage1_steps
    lr = lr if lr is not None else bundle.config.stage1_lr
    seed = seed if seed is not None else bundle.config.seed
    names, probs = _mixture(datasets, plan.data_mix)
    rng = np.random.default_rng(seed)
    params = _set_trainable(bundle, plan)
    opt = torch.optim.Adam(params, lr=lr)
    losses: list[float] = []
    log: list[dict] = []
    try:
        for step in range(steps):
            ds = datasets[names[rng.choice(len(names), p=probs)]]
            sample = ds[int(rng.integers(len(ds)))]
            stream, pixels = _forward_inputs(bundle, sample)
            logits, _ = bundle.lm(stream, pixels)
            loss = ntp_loss(logits, stream)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.item()))
            log.append({"step": step, "stage": STAGE_INSTRUCTION_TUNING, "loss": losses[-1]})
    finally:
        _restore_trainable(bundle)
    out_dir = Path(out_dir) if out_dir is not None else None
    _write_log(log, out_dir, "stage1_log.jsonl")
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(bundle, out_dir / "stage1.pt", meta={"stage": 1, "steps": steps, "seed": seed})
    return TrainResult(losses=losses, log=log, checkpoint_path=ckpt)


# ---------------------------------------------------------------------------
# Stage 2: interleaved context alignment


def _frozen_hidden(bundle: ModelBundle, sample: TrainingSample):
    """Stream, per-span pixels, and LM hidden states for one sample. With the
    LM frozen these are constants, so stage 2 caches them per sequence."""
    stream, pixels = _forward_inputs(bundle, sample)
    with torch.no_grad():
        _, hidden = bundle.lm(stream, pixels)
    return stream, pixels, hidden


def prepare_alignment_example(
    bundle: ModelBundle,
    sample: TrainingSample,
    target_chunk: int,
    precomputed: tuple | None = None,
) -> tuple[list[codec.LatentImage], codec.LatentImage, ProjectedCondition]:
    """Teacher-forced conditioning for one target image: clean latents of all
    earlier images plus the projected LM states preceding that image's
    vision-trigger token. The frozen LM runs without gradients."""
    stream, pixels, hidden = precomputed if precomputed is not None else _frozen_hidden(bundle, sample)
    span = next(
        (s for s in stream.chunk_spans if s.chunk_index == target_chunk and s.kind == IMAGE),
        None,
    )
    if span is None:
        raise InputError(f"chunk {target_chunk} is not an image chunk of this stream")
    chunk = sample.sequence.chunks[target_chunk]
    if chunk.role != ASSISTANT:
        raise InputError(f"chunk {target_chunk} is not an assistant image")
    bov_pos = span.start  # assistant image spans open with the trigger token
    patch = bundle.config.latent_patch
    cond_latents: list[codec.LatentImage] = []
    order = 0
    target_latent: codec.LatentImage | None = None
    for i, c in enumerate(sample.sequence.chunks):
        if c.kind != IMAGE:
            continue
        if i < target_chunk:
            cond_latents.append(codec.encode(sample.images[c.image_ref], patch, seq_index=order))
        elif i == target_chunk:
            target_latent = codec.encode(sample.images[c.image_ref], patch, seq_index=order)
            break
        order += 1
    assert target_latent is not None
    text_cond = bundle.connector.project(hidden, bov_pos, stream.chunk_spans)
    return cond_latents, target_latent, text_cond


def run_stage2(
    bundle: ModelBundle,
    plan: StagePlan,
    datasets: Mapping[str, Sequence[TrainingSample]],
    *,
    steps: int | None = None,
    lr: float | None = None,
    seed: int | None = None,
    batch_size: int = 2,
    out_dir: str | Path | None = None,
) -> TrainResult:
    if plan.stage != STAGE_CONTEXT_ALIGNMENT:
        raise InputError(f"stage-2 runner given plan for {plan.stage!r}")
    steps = steps if steps is not None else bundle.config.stage2_steps
    lr = lr if lr is not None else bundle.config.stage2_lr
    seed = seed if seed is not None else bundle.config.seed
    names, probs = _mixture(datasets, plan.data_mix)
    if not any(s.assistant_image_chunks() for ds in datasets.values() for s in ds):
        raise InputError("no dataset sample contains an assistant image to generate")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    params = _set_trainable(bundle, plan)
    opt = torch.optim.Adam(params, lr=lr)
    losses: list[float] = []
    log: list[dict] = []
    skipped = 0
    hidden_cache: dict[str, tuple] = {}
    try:
        for step in range(steps):
            batch: list[tuple[list[codec.LatentImage], codec.LatentImage]] = []
            texts: list[ProjectedCondition] = []
            attempts = 0
            while len(batch) < batch_size:
                attempts += 1
                if attempts > 1000 * batch_size:
                    raise InputError("could not draw a batch; data mix yields only imageless samples")
                ds = datasets[names[rng.choice(len(names), p=probs)]]
                sample = ds[int(rng.integers(len(ds)))]
                target_chunk = choose_target_image(sample, rng)
                if target_chunk is None:
                    skipped += 1
                    continue
                key = sample.sequence.id
                if key not in hidden_cache:
                    hidden_cache[key] = _frozen_hidden(bundle, sample)
                conds, target, text = prepare_alignment_example(
                    bundle, sample, target_chunk, precomputed=hidden_cache[key]
                )
                batch.append((conds, target))
                texts.append(text)
            loss = bundle.head.flow_loss_packed(pack(batch), texts, generator=gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.item()))
            log.append({"step": step, "stage": STAGE_CONTEXT_ALIGNMENT, "loss": losses[-1]})
    finally:
        _restore_trainable(bundle)
    out_dir = Path(out_dir) if out_dir is not None else None
    _write_log(log, out_dir, "stage2_log.jsonl")
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(bundle, out_dir / "stage2.pt", meta={"stage": 2, "steps": steps, "seed": seed})
    return TrainResult(losses=losses, log=log, skipped=skipped, checkpoint_path=ckpt)
