"""Synthetic prompt expansion over a hierarchical taxonomy.

Human-curated seed questions per subcategory get expanded by an LLM; every
expansion request carries the sibling subcategories (and a sample of their
seeds) so the model steers away from what is already covered. Exact
duplicates of seeds or earlier expansions are dropped locally; a fixed-size
holdout is reserved for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from ..core import InputError
from .client import ChatMessage, ChatRequest, ClientError, extract_json, user_text
from .prompts import template

BASE_CATEGORIES = (
    "Sports",
    "Outdoor & Survival",
    "DIY & Crafting",
    "Vehicle & Transportation",
    "Personal Care & Health",
    "Farm, Pet, and Animals",
    "Home & Living",
    "Office & Productivity",
)

DEFAULT_COUNTS = (8, 151, 1500)
DEFAULT_TARGET = 15270
DEFAULT_HOLDOUT = 700


@dataclass(frozen=True)
class PromptTaxonomy:
    base_categories: tuple[str, ...]
    subcategories: Mapping[str, tuple[str, ...]]  # base -> subcategory names
    seeds: Mapping[str, tuple[str, ...]]  # subcategory -> seed questions

    def base_of(self, sub: str) -> str:
        for base, subs in self.subcategories.items():
            if sub in subs:
                return base
        raise InputError(f"subcategory {sub!r} not in taxonomy")

    def all_subcategories(self) -> list[str]:
        return [s for base in self.base_categories for s in self.subcategories.get(base, ())]

    def validate(self, counts: tuple[int, int, int] = DEFAULT_COUNTS) -> list[str]:
        violations: list[str] = []
        n_base, n_sub, n_seed = counts
        if len(self.base_categories) != n_base:
            violations.append(f"expected {n_base} base categories, got {len(self.base_categories)}")
        if set(self.subcategories) != set(self.base_categories):
            violations.append("subcategory map keys do not match base categories")
        subs = self.all_subcategories()
        if len(subs) != n_sub:
            violations.append(f"expected {n_sub} subcategories, got {len(subs)}")
        if len(set(subs)) != len(subs):
            violations.append("duplicate subcategory names")
        missing = [s for s in subs if not self.seeds.get(s)]
        if missing:
            violations.append(f"subcategories without seeds: {missing[:5]}")
        total = sum(len(self.seeds.get(s, ())) for s in subs)
        if total != n_seed:
            violations.append(f"expected {n_seed} seed prompts, got {total}")
        all_seeds = [q for s in subs for q in self.seeds.get(s, ())]
        if len(set(all_seeds)) != len(all_seeds):
            violations.append("duplicate seed questions")
        return violations

    def to_file(self, path: str | Path) -> None:
        obj = {
            "base_categories": list(self.base_categories),
            "subcategories": {b: list(v) for b, v in self.subcategories.items()},
            "seeds": {s: list(v) for s, v in self.seeds.items()},
        }
        Path(path).write_text(json.dumps(obj, indent=1, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTaxonomy":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            base_categories=tuple(obj["base_categories"]),
            subcategories={b: tuple(v) for b, v in obj["subcategories"].items()},
            seeds={s: tuple(v) for s, v in obj["seeds"].items()},
        )


@dataclass(frozen=True)
class PromptRecord:
    text: str
    base_category: str
    subcategory: str


@dataclass
class PromptPool:
    train: list[PromptRecord]
    holdout: list[PromptRecord]
    duplicates_dropped: int = 0
    under_generated: int = 0

    def all_prompts(self) -> list[PromptRecord]:
        return self.train + self.holdout


def expand_prompts(
    taxonomy: PromptTaxonomy,
    client,
    target_count: int = DEFAULT_TARGET,
    *,
    holdout: int = DEFAULT_HOLDOUT,
    batch_size: int = 20,
    max_rounds: int = 50,
    seed: int = 0,
    model_name: str = "engine",
) -> PromptPool:
    """Round-robin the subcategories requesting batches until the pool reaches
    ``target_count`` new prompts (or rounds run out; under-generation is
    recorded, not fatal). Exact duplicates never enter the pool."""
    violations = taxonomy.validate(counts=(len(taxonomy.base_categories), len(taxonomy.all_subcategories()), sum(len(v) for v in taxonomy.seeds.values())))
    if violations:
        raise InputError("invalid taxonomy: " + "; ".join(violations))
    if holdout >= target_count:
        raise InputError(f"holdout {holdout} must be smaller than target {target_count}")
    seen: set[str] = {q for qs in taxonomy.seeds.values() for q in qs}
    pool: list[PromptRecord] = []
    dropped = 0
    subs = taxonomy.all_subcategories()
    rounds = 0
    while len(pool) < target_count and rounds < max_rounds:
        rounds += 1
        for sub in subs:
            if len(pool) >= target_count:
                break
            base = taxonomy.base_of(sub)
            siblings = [s for s in taxonomy.subcategories[base] if s != sub]
            want = min(batch_size, target_count - len(pool))
            payload = {
                "base_category": base,
                "subcategory": sub,
                "seed_questions": list(taxonomy.seeds[sub]),
                "sibling_subcategories": siblings,
                "sibling_seed_samples": {s: list(taxonomy.seeds[s][:2]) for s in siblings[:5]},
                "count": want,
                "round": rounds,
            }
            request = ChatRequest(
                model=model_name,
                messages=(
                    ChatMessage(role="system", content=template("expand_prompts_v1")),
                    ChatMessage(role="user", content=user_text(payload)),
                ),
                template_id="expand_prompts_v1",
                metadata={"stage": "expand", "subcategory": sub},
            )
            try:
                response = client.complete(request)
            except ClientError:
                continue
            obj = extract_json(response.content)
            questions = obj.get("questions") if obj else None
            if not isinstance(questions, list):
                continue
            for q in questions:
                if not isinstance(q, str) or not q.strip():
                    continue
                q = q.strip()
                if q in seen:
                    dropped += 1
                    continue
                seen.add(q)
                pool.append(PromptRecord(text=q, base_category=base, subcategory=sub))
                if len(pool) >= target_count:
                    break
    under = max(0, target_count - len(pool))
    rng = np.random.default_rng(seed)
    held_idx = set(rng.choice(len(pool), size=min(holdout, len(pool)), replace=False).tolist())
    held = [p for i, p in enumerate(pool) if i in held_idx]
    train = [p for i, p in enumerate(pool) if i not in held_idx]
    return PromptPool(train=train, holdout=held, duplicates_dropped=dropped, under_generated=under)


def synth_taxonomy(counts: tuple[int, int, int] = DEFAULT_COUNTS, seed: int = 0) -> PromptTaxonomy:
    """Deterministic desk-scale taxonomy fixture with the configured shape:
    n_base real domain names, n_sub synthetic subcategories spread across
    them, n_seed seed questions spread ~evenly (9-10 per subcategory)."""
    n_base, n_sub, n_seed = counts
    bases = BASE_CATEGORIES[:n_base]
    if len(bases) < n_base:
        bases = bases + tuple(f"Domain {i}" for i in range(len(bases), n_base))
    per_base = [n_sub // n_base + (1 if i < n_sub % n_base else 0) for i in range(n_base)]
    subcategories: dict[str, tuple[str, ...]] = {}
    k = 0
    for base, n in zip(bases, per_base):
        subcategories[base] = tuple(f"{base} / topic {j}" for j in range(n))
        k += n
    subs = [s for b in bases for s in subcategories[b]]
    per_sub = [n_seed // n_sub + (1 if i < n_seed % n_sub else 0) for i in range(n_sub)]
    seeds = {
        sub: tuple(f"How do I handle {sub.lower()} task {j}?" for j in range(n))
        for sub, n in zip(subs, per_sub)
    }
    return PromptTaxonomy(base_categories=bases, subcategories=subcategories, seeds=seeds)
