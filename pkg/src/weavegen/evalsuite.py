"""Judge-based benchmark harness for interleaved generations.

A rubric names the metrics, their integer scale, and which are judged per
generated image versus per sequence; the judge is any chat endpoint. Judge
determinism is never assumed; every request/response transcript is kept so
scores stay auditable. Out-of-scale or malformed replies are rejected and
retried; samples that exhaust retries are reported unjudged, never guessed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .bundle import ModelBundle
from .core import (
    ASSISTANT,
    IMAGE,
    TEXT,
    USER,
    InputError,
    InterleavedSequence,
    image_chunk,
    pixel_hash,
    text_chunk,
)
from .dataengine.client import ChatMessage, ChatRequest, ClientError, extract_json, user_text
from .dataengine.prompts import template
from .pipeline import GenerationBudget, GenerationResult, generate_interleaved

DEFAULT_METRICS = ("T-Com", "I-Com", "I-Co", "IT-Co", "I-Q")


@dataclass(frozen=True)
class Rubric:
    metric_names: tuple[str, ...]
    scale: tuple[int, int]
    judge_template_id: str = "judge_interleaved_v1"
    per_image: tuple[str, ...] = ()
    per_sequence: tuple[str, ...] = ()

    def __post_init__(self):
        if set(self.per_image) & set(self.per_sequence):
            raise InputError("per_image and per_sequence metrics overlap")
        if set(self.per_image) | set(self.per_sequence) != set(self.metric_names):
            raise InputError("per_image + per_sequence must cover metric_names exactly")
        if self.scale[0] >= self.scale[1]:
            raise InputError(f"bad scale {self.scale}")

    @classmethod
    def from_file(cls, path: str | Path) -> "Rubric":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            metric_names=tuple(obj["metric_names"]),
            scale=(int(obj["scale"][0]), int(obj["scale"][1])),
            judge_template_id=obj.get("judge_template_id", "judge_interleaved_v1"),
            per_image=tuple(obj.get("per_image", ())),
            per_sequence=tuple(obj.get("per_sequence", ())),
        )


def default_rubric() -> Rubric:
    """Sequence-level completeness/coherence plus image-level quality and
    image-text coherence on a 1-5 scale."""
    return Rubric(
        metric_names=DEFAULT_METRICS,
        scale=(1, 5),
        per_sequence=("T-Com", "I-Com", "I-Co"),
        per_image=("IT-Co", "I-Q"),
    )


@dataclass
class SampleJudgment:
    sample_id: str
    judged: bool
    scores: dict[str, float] = field(default_factory=dict)
    transcript: list[dict] = field(default_factory=list)


@dataclass
class ScoreReport:
    per_sample: list[SampleJudgment]
    per_metric_mean: dict[str, float]
    per_metric_count: dict[str, int]
    judged: int
    total: int

    def table(self) -> str:
        lines = ["metric        mean    n"]
        for m, v in self.per_metric_mean.items():
            lines.append(f"{m:<12} {v:6.3f} {self.per_metric_count[m]:4d}")
        lines.append(f"judged {self.judged}/{self.total} samples")
        return "\n".join(lines)

    def as_obj(self) -> dict:
        return {
            "per_metric_mean": self.per_metric_mean,
            "per_metric_count": self.per_metric_count,
            "judged": self.judged,
            "total": self.total,
            "per_sample": [
                {"id": j.sample_id, "judged": j.judged, "scores": j.scores} for j in self.per_sample
            ],
        }


def _split_prompt(seq: InterleavedSequence) -> tuple[str, str, list[str]]:
    """(user text, assistant text, assistant image refs) of one generation."""
    user_parts = [c.text for c in seq.chunks if c.kind == TEXT and c.role == USER]
    assistant_parts = [c.text for c in seq.chunks if c.kind == TEXT and c.role == ASSISTANT]
    gen_images = [c.image_ref for c in seq.chunks if c.kind == IMAGE and c.role == ASSISTANT]
    return "\n".join(user_parts), "\n".join(assistant_parts), gen_images


def judge_sample(
    seq: InterleavedSequence,
    rubric: Rubric,
    client,
    max_retries: int = 2,
    model_name: str = "judge",
) -> SampleJudgment:
    """Score one generated sequence. Per-image metrics are averaged over the
    generated images; a sample with no generated image simply has no
    per-image scores."""
    user_prompt, generated_text, gen_images = _split_prompt(seq)
    lo, hi = rubric.scale
    payload = {
        "user_prompt": user_prompt,
        "generated_text": generated_text,
        "image_count": len(gen_images),
        "sequence_metrics": list(rubric.per_sequence),
        "image_metrics": list(rubric.per_image),
        "scale": [lo, hi],
    }
    parts = tuple({"type": "image_ref", "hash": h} for h in gen_images) + (
        {"type": "text", "text": user_text(payload)},
    )
    messages: list[ChatMessage] = [
        ChatMessage(role="system", content=template(rubric.judge_template_id)),
        ChatMessage(role="user", content=parts),
    ]
    transcript: list[dict] = []

    def validate(content: str) -> tuple[dict[str, float] | None, str | None]:
        obj = extract_json(content)
        if obj is None:
            return None, "reply is not JSON"
        scores: dict[str, float] = {}
        for m in rubric.per_sequence:
            v = obj.get(m)
            if not isinstance(v, (int, float)):
                return None, f"metric {m} missing"
            if not lo <= v <= hi:
                return None, f"metric {m}={v} outside scale [{lo}, {hi}]"
            scores[m] = float(v)
        per_image = obj.get("per_image", [])
        if not isinstance(per_image, list) or len(per_image) != len(gen_images):
            return None, f"per_image must list {len(gen_images)} entries"
        for k, entry in enumerate(per_image):
            for m in rubric.per_image:
                v = entry.get(m) if isinstance(entry, dict) else None
                if not isinstance(v, (int, float)):
                    return None, f"image {k}: metric {m} missing"
                if not lo <= v <= hi:
                    return None, f"image {k}: metric {m}={v} outside scale [{lo}, {hi}]"
        if gen_images:
            for m in rubric.per_image:
                scores[m] = float(np.mean([entry[m] for entry in per_image]))
        return scores, None

    for attempt in range(max_retries + 1):
        request = ChatRequest(
            model=model_name,
            messages=tuple(messages),
            template_id=rubric.judge_template_id,
            metadata={"stage": "judge", "sample": seq.id, "attempt": attempt},
        )
        try:
            response = client.complete(request)
        except ClientError as e:
            transcript.append({"attempt": attempt, "error": str(e)})
            continue
        transcript.append({"attempt": attempt, "response": response.content})
        scores, violation = validate(response.content)
        if violation is None:
            return SampleJudgment(sample_id=seq.id, judged=True, scores=scores, transcript=transcript)
        transcript[-1]["violation"] = violation
        messages.append(ChatMessage(role="assistant", content=response.content))
        messages.append(ChatMessage(role="user", content=f"Invalid reply: {violation}. Answer again with valid JSON only."))
    return SampleJudgment(sample_id=seq.id, judged=False, transcript=transcript)


def aggregate(judgments: Sequence[SampleJudgment]) -> ScoreReport:
    judged = [j for j in judgments if j.judged]
    if not judged:
        raise InputError("nothing judged")
    metrics: list[str] = []
    for j in judged:
        for m in j.scores:
            if m not in metrics:
                metrics.append(m)
    means = {}
    counts = {}
    for m in metrics:
        vals = [j.scores[m] for j in judged if m in j.scores]
        means[m] = float(np.mean(vals))
        counts[m] = len(vals)
    return ScoreReport(
        per_sample=list(judgments),
        per_metric_mean=means,
        per_metric_count=counts,
        judged=len(judged),
        total=len(judgments),
    )


# ---------------------------------------------------------------------------
# Benchmarks


@dataclass(frozen=True)
class BenchmarkPrompt:
    id: str
    text: str
    image_path: Path | None = None


def manifest_from_pool(pool_path: str | Path, out_path: str | Path, split: str = "holdout") -> int:
    """Turn one split of an expanded prompt pool (the engine's ``expand``
    output) into a benchmark manifest; returns the row count."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(pool_path, "r", encoding="utf-8") as src, open(out_path, "w", encoding="utf-8") as dst:
        for line in src:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row.get("split") != split:
                continue
            dst.write(json.dumps({"id": f"{split}-{n:05d}", "prompt": row["prompt"]}) + "\n")
            n += 1
    if n == 0:
        raise InputError(f"no {split!r} prompts in {pool_path}")
    return n


def load_benchmark(name: str, benchmarks_dir: str | Path) -> list[BenchmarkPrompt]:
    """Prompt manifest ``<dir>/<name>.jsonl``: rows {id, prompt, image?} with
    image paths relative to the manifest."""
    path = Path(benchmarks_dir) / f"{name}.jsonl"
    if not path.exists():
        raise InputError(f"benchmark manifest {path} not found")
    prompts: list[BenchmarkPrompt] = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "id" not in obj or "prompt" not in obj:
                raise InputError(f"{path}: row {i} needs id and prompt")
            image = obj.get("image")
            prompts.append(
                BenchmarkPrompt(
                    id=str(obj["id"]),
                    text=str(obj["prompt"]),
                    image_path=(path.parent / image) if image else None,
                )
            )
    return prompts


def prompt_sequence(p: BenchmarkPrompt) -> tuple[InterleavedSequence, dict[str, np.ndarray]]:
    chunks = [text_chunk(USER, p.text)]
    images: dict[str, np.ndarray] = {}
    if p.image_path is not None:
        with Image.open(p.image_path) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8).astype(np.float32) / 255.0
        ref = pixel_hash(px)
        images[ref] = px
        chunks.append(image_chunk(USER, ref))
    return InterleavedSequence(id=p.id, chunks=tuple(chunks)), images


def run_benchmark(
    bundle: ModelBundle,
    prompts: Sequence[BenchmarkPrompt],
    budget: GenerationBudget,
    judge_client,
    rubric: Rubric,
    out_dir: str | Path | None = None,
    temperature: float = 0.0,
) -> ScoreReport:
    """Generate for every prompt, judge each result, aggregate, and (when
    out_dir is given) persist the report plus all judge transcripts."""
    judgments: list[SampleJudgment] = []
    results: list[GenerationResult] = []
    for i, p in enumerate(prompts):
        seq, images = prompt_sequence(p)
        result = generate_interleaved(
            bundle, seq, images, replace(budget, seed=budget.seed + i), temperature=temperature
        )
        results.append(result)
        judgments.append(judge_sample(result.sequence, rubric, judge_client))
    report = aggregate(judgments)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "transcripts").mkdir(parents=True, exist_ok=True)
        for j in judgments:
            with open(out_dir / "transcripts" / f"{j.sample_id}.json", "w", encoding="utf-8") as f:
                json.dump({"judged": j.judged, "scores": j.scores, "transcript": j.transcript}, f, indent=1)
        with open(out_dir / "report.json", "w", encoding="utf-8") as f:
            json.dump(report.as_obj(), f, indent=1)
    return report
