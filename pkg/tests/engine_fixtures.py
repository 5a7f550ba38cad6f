"""Synthetic webpage corpus for engine tests.

Pages are deterministic in the seed. Failure modes are allocated up front so
the expected number of fully dialogized survivors is known exactly:
text-only and no-text pages die in the filter stage, all-tiny-image pages die
on size heuristics, and icon pages survive until the classify stage flags
every image. Everything else passes all five stages under the canned client.
"""

import hashlib
import json
from pathlib import Path


def _h(page: int, k: int) -> str:
    return hashlib.sha256(f"page{page}-img{k}".encode()).hexdigest()[:12]


def synth_corpus(
    corpus_dir: Path,
    n_pages: int = 347,
    n_text_only: int = 40,
    n_no_text: int = 15,
    n_tiny_images: int = 14,
    n_icon_images: int = 10,
    with_ads: bool = True,
) -> dict[str, str]:
    """Write page JSON files; returns the category hints the canned client
    needs to classify icon-page images as icons."""
    corpus_dir.mkdir(parents=True, exist_ok=True)
    hints: dict[str, str] = {}
    kinds = (
        ["text_only"] * n_text_only
        + ["no_text"] * n_no_text
        + ["tiny"] * n_tiny_images
        + ["icon"] * n_icon_images
    )
    kinds += ["good"] * (n_pages - len(kinds))
    for i, kind in enumerate(kinds):
        url = f"https://howto.example/guide/{i}"
        images = []
        paras = [f"How to finish project {i}: start by clearing the bench."]
        if kind == "text_only":
            paras.append(f"Then keep going until project {i} is done. No pictures today.")
        elif kind == "no_text":
            paras = []
            for k in range(2):
                h = _h(i, k)
                images.append({"hash": h, "width": 128, "height": 96})
                paras.append(f"![fig](image:{h})")
        elif kind == "tiny":
            for k in range(2):
                h = _h(i, k)
                images.append({"hash": h, "width": 8, "height": 8})
                paras.append(f"![fig](image:{h})")
                paras.append(f"Tiny step {k} text for page {i}.")
        elif kind == "icon":
            for k in range(2):
                h = _h(i, k)
                images.append({"hash": h, "width": 100, "height": 100})
                hints[h] = "icon"
                paras.append(f"![fig](image:{h})")
                paras.append(f"Step {k} of page {i} looks fine but the pictures are icons.")
        else:
            n_imgs = 2 + (i % 3)
            for k in range(n_imgs):
                h = _h(i, k)
                images.append({"hash": h, "width": 64 + 16 * k, "height": 64})
                paras.append(f"Step {k + 1}: work carefully on part {k} of project {i}.")
                paras.append(f"![fig](image:{h})")
            if with_ads and i % 4 == 0:
                paras.insert(2, "Advertisement: click here for the best deals on tools!")
            paras.append(f"That finishes project {i}. Enjoy.")
        page = {"url": url, "markdown": "\n\n".join(paras), "images": images}
        (corpus_dir / f"page{i:04d}.json").write_text(json.dumps(page), encoding="utf-8")
    return hints


class TamperClient:
    """Wraps a client and rewrites responses for one template id, optionally
    only the first `times` matching calls; used to inject schema violations."""

    def __init__(self, inner, template_id: str, mutate, times: int | None = None):
        self.inner = inner
        self.template_id = template_id
        self.mutate = mutate
        self.times = times
        self.tampered = 0

    @property
    def call_count(self):
        return self.inner.call_count

    @property
    def calls(self):
        return self.inner.calls

    def complete(self, request):
        response = self.inner.complete(request)
        if request.template_id == self.template_id and (self.times is None or self.tampered < self.times):
            self.tampered += 1
            return type(response)(content=self.mutate(response.content, request))
        return response
