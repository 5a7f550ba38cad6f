"""Prompt templates shipped as assets.

Every engine/eval call names one of these ids; the template text is the
system message and the structured payload travels in the user message. All
templates demand a JSON reply so responses are machine-checkable.
"""

from __future__ import annotations

TEMPLATES: dict[str, str] = {
    "rewrite_split_v1": (
        "You clean raw how-to webpage content. The user message carries JSON with "
        "'text_blocks' (raw passages, in order) and 'placeholders' (image ids img_0.. "
        "standing in for pictures you cannot see). Rewrite the passages into fluent "
        "prose: drop HTML artifacts, formatting noise, external links, and anything "
        "promotional. Split the result into a short introduction and the main content, "
        "keeping each image placeholder next to the passage it belongs to. Reply with "
        "JSON only: {\"introduction\": [chunk...], \"main_content\": [chunk...]} where a "
        "chunk is {\"type\": \"text\", \"text\": ...} or {\"type\": \"image\", "
        "\"placeholder\": ...}. Reference only the provided placeholder ids."
    ),
    "caption_classify_v1": (
        "You describe and classify one image from a webpage. Reply with JSON only: "
        "{\"caption\": <one factual sentence>, \"category\": <one of natural_photo, "
        "gui_screenshot, document, icon, qr_code, advertisement, other>}."
    ),
    "dedup_reorder_v1": (
        "You receive a cleaned interleaved article as JSON: 'chunks' is a list of "
        "{\"id\": ..., \"type\": \"text\"|\"image\", \"text\"|\"caption\": ...}. Near-identical "
        "neighbouring images should be collapsed to one, and every image must come "
        "after the passage that describes it. Reply with JSON only: {\"order\": [chunk "
        "ids in the new order]}. The order must be a permutation of a subset of the "
        "given ids that keeps every text chunk and places no image before the first "
        "text chunk."
    ),
    "dialogize_v1": (
        "Turn a cleaned how-to article into a realistic user/assistant conversation. "
        "The user asks for help (optionally attaching one of the introduction images, "
        "listed in 'intro_placeholders'); the assistant answers step by step, weaving "
        "in the main-content images as illustrations. Main-content images stay "
        "placeholders. Reply with JSON only: {\"turns\": [{\"role\": \"user\"|\"assistant\", "
        "\"type\": \"text\", \"text\": ...} or {\"role\": ..., \"type\": \"image\", "
        "\"placeholder\": ...}]}. Start with a user turn, use each placeholder at most "
        "once, attach at most one user image, and put assistant text before the first "
        "assistant image."
    ),
    "expand_prompts_v1": (
        "You write new everyday how-to questions for a given subcategory. The payload "
        "lists the base category, the subcategory, its existing seed questions, and "
        "the sibling subcategories already covered elsewhere; do not duplicate any of "
        "them or drift into their territory. Reply with JSON only: {\"questions\": "
        "[<count> distinct questions]}."
    ),
    "video_transition_v1": (
        "You are shown the first and last frame of a short clip. Describe the "
        "transition between them in one or two sentences: object motion, human "
        "actions, camera movement. Reply with JSON only: {\"caption\": ...}."
    ),
    "judge_interleaved_v1": (
        "You grade one interleaved answer (text plus generated images) against the "
        "user's request. Score each listed metric on the given integer scale; "
        "sequence-level metrics get one score, image-level metrics one score per "
        "generated image. Reply with JSON only: {<sequence metric>: score, ..., "
        "\"per_image\": [{<image metric>: score, ...} per generated image]}."
    ),
}


def template(template_id: str) -> str:
    if template_id not in TEMPLATES:
        raise KeyError(f"unknown prompt template {template_id!r}")
    return TEMPLATES[template_id]
