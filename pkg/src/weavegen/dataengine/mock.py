"""Deterministic canned-response client.

Implements every shipped template with pure transformations of the request
payload, so the whole engine (and the eval harness) runs offline: it is what
"mock:" endpoints resolve to, and the test suite drives the stage contracts
through it. Category hints let fixtures steer the classify stage.
"""

from __future__ import annotations

import json
from typing import Mapping

from .client import ChatRequest, MockChatClient, payload_of


class MockEngineClient(MockChatClient):
    def __init__(
        self,
        category_by_hash: Mapping[str, str] | None = None,
        ad_prefixes: tuple[str, ...] = ("Advertisement:",),
    ):
        super().__init__(handler=self._handle)
        self.category_by_hash = dict(category_by_hash or {})
        self.ad_prefixes = ad_prefixes

    # -- per-template behaviours ------------------------------------------------

    def _handle(self, request: ChatRequest) -> str:
        fn = {
            "rewrite_split_v1": self._rewrite,
            "caption_classify_v1": self._caption,
            "dedup_reorder_v1": self._dedup,
            "dialogize_v1": self._dialogize,
            "expand_prompts_v1": self._expand,
            "video_transition_v1": self._video,
            "judge_interleaved_v1": self._judge,
        }.get(request.template_id)
        if fn is None:
            return json.dumps({"error": f"no canned behaviour for {request.template_id!r}"})
        return json.dumps(fn(payload_of(request)))

    def _is_ad(self, text: str) -> bool:
        return any(text.lstrip().startswith(p) for p in self.ad_prefixes)

    def _rewrite(self, payload: dict) -> dict:
        blocks = [b for b in payload.get("text_blocks", []) if b.get("type") != "text" or not self._is_ad(b.get("text", ""))]
        # introduction = everything through the first image, rest is main content
        split = next((i + 1 for i, b in enumerate(blocks) if b.get("type") == "image"), len(blocks))
        if split == len(blocks):  # keep at least something in the main body
            split = max(1, len(blocks) - 1)
        return {"introduction": blocks[:split], "main_content": blocks[split:]}

    def _caption(self, payload: dict) -> dict:
        h = str(payload.get("hash", ""))
        return {
            "caption": f"A picture of item {h[:8]}.",
            "category": self.category_by_hash.get(h, "natural_photo"),
        }

    def _dedup(self, payload: dict) -> dict:
        chunks = payload.get("chunks", [])
        ids = [c["id"] for c in chunks]
        first_text = next((i for i, c in enumerate(chunks) if c.get("type") == "text"), None)
        if first_text is None:
            return {"order": ids}
        leading_images = [c["id"] for c in chunks[:first_text]]
        order = [chunks[first_text]["id"]] + leading_images + [
            c["id"] for c in chunks[first_text + 1 :]
        ]
        return {"order": order}

    def _dialogize(self, payload: dict) -> dict:
        chunks = payload.get("chunks", [])
        intro = payload.get("intro_placeholders", [])
        first_text = next((c.get("text", "") for c in chunks if c.get("type") == "text"), "this")
        turns = [{"role": "user", "type": "text", "text": f"Can you walk me through it? Context: {first_text[:80]}"}]
        if intro:
            turns.append({"role": "user", "type": "image", "placeholder": intro[0]})
        used = {intro[0]} if intro else set()
        emitted_text = False
        for c in chunks:
            if c.get("type") == "text":
                turns.append({"role": "assistant", "type": "text", "text": c["text"]})
                emitted_text = True
            elif c.get("placeholder") not in used:
                if not emitted_text:
                    turns.append({"role": "assistant", "type": "text", "text": "Here is how it starts."})
                    emitted_text = True
                turns.append({"role": "assistant", "type": "image", "placeholder": c["placeholder"]})
                used.add(c["placeholder"])
        if not emitted_text:
            turns.append({"role": "assistant", "type": "text", "text": "Done."})
        return {"turns": turns}

    def _expand(self, payload: dict) -> dict:
        sub = payload.get("subcategory", "topic")
        count = int(payload.get("count", 10))
        rnd = int(payload.get("round", 1))
        seeds = payload.get("seed_questions") or []
        questions = []
        if seeds:  # echo one seed so local dedup always has work to do
            questions.append(seeds[0])
        questions += [
            f"What is a reliable way to approach {sub.lower()} scenario {rnd}.{i}?" for i in range(count)
        ]
        return {"questions": questions[: count + 1]}

    def _video(self, payload: dict) -> dict:
        clip = payload.get("clip_id", "clip")
        return {"caption": f"The subject of clip {clip} moves steadily while the camera holds position."}

    def _judge(self, payload: dict) -> dict:
        seq_metrics = payload.get("sequence_metrics", [])
        img_metrics = payload.get("image_metrics", [])
        lo, hi = payload.get("scale", [1, 5])
        n_images = int(payload.get("image_count", 0))
        mid = (int(lo) + int(hi) + 1) // 2
        out: dict = {m: mid for m in seq_metrics}
        out["per_image"] = [{m: mid for m in img_metrics} for _ in range(n_images)]
        return out
