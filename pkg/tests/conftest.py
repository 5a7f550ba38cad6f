import numpy as np
import pytest
import torch

from weavegen.core import (
    ASSISTANT,
    USER,
    InterleavedSequence,
    RunConfig,
    TransformerDims,
    VocabSpec,
    image_chunk,
    pixel_hash,
    text_chunk,
)


@pytest.fixture(autouse=True)
def _torch_single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def vocab():
    return VocabSpec()


@pytest.fixture
def tiny_config():
    return RunConfig(
        seed=7,
        latent_patch=8,
        lm_dims=TransformerDims(layers=2, width=32, heads=4),
        dit_dims=TransformerDims(layers=2, width=24, heads=4),
        sampler_steps=4,
        mllm_max_side_px=64,
    )


def make_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    return rng.random((h, w, 3)).astype(np.float32)


def blocky_image(rng: np.random.Generator, h: int, w: int, cells: int = 4) -> np.ndarray:
    """Low-frequency image: a coarse random grid upsampled to (h, w). Easy for
    tiny models to memorize, unlike white noise."""
    base = rng.random((cells, cells, 3)).astype(np.float32)
    reps_h, reps_w = -(-h // cells), -(-w // cells)
    big = np.repeat(np.repeat(base, reps_h, axis=0), reps_w, axis=1)
    return np.ascontiguousarray(big[:h, :w])


def conversation_fixture(rng: np.random.Generator, n_images: int = 2, image_side: int = 16):
    """A simple user question + assistant answer alternating text and images.
    Returns (sequence, images dict)."""
    images = {}
    chunks = [text_chunk(USER, "How is it done?")]
    for k in range(n_images):
        chunks.append(text_chunk(ASSISTANT, f"Step {k + 1} goes like this."))
        px = make_image(rng, image_side, image_side)
        ref = pixel_hash(px)
        images[ref] = px
        chunks.append(image_chunk(ASSISTANT, ref))
    chunks.append(text_chunk(ASSISTANT, "Done."))
    return InterleavedSequence(id=f"fx{rng.integers(1 << 30)}", chunks=tuple(chunks)), images


def random_conversation(rng: np.random.Generator, vocab: VocabSpec, max_side: int = 64):
    """Randomized-but-valid conversation for property tests: arbitrary image
    sizes (not patch aligned), optional user image, unicode text."""
    words = ["fix", "paint", "mend", "stir", "fold", "wire", "prune", "sand", "glue", "ärm", "日本"]
    images = {}
    chunks = [text_chunk(USER, " ".join(rng.choice(words, size=rng.integers(1, 6))))]
    if rng.random() < 0.4:
        px = make_image(rng, int(rng.integers(4, 90)), int(rng.integers(4, 90)))
        ref = pixel_hash(px)
        images[ref] = px
        chunks.append(image_chunk(USER, ref))
    n_steps = int(rng.integers(1, 4))
    for _ in range(n_steps):
        chunks.append(text_chunk(ASSISTANT, " ".join(rng.choice(words, size=rng.integers(1, 8)))))
        if rng.random() < 0.7:
            px = make_image(rng, int(rng.integers(4, 90)), int(rng.integers(4, 90)))
            ref = pixel_hash(px)
            images[ref] = px
            chunks.append(image_chunk(ASSISTANT, ref))
    return InterleavedSequence(id=f"r{rng.integers(1 << 30)}", chunks=tuple(chunks)), images
