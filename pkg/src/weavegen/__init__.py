"""Desk-scale interleaved text-image generation.

A byte-level multimodal LM decides *when* to draw by emitting a vision
trigger token; a flow-matching transformer head decides *what* to draw,
conditioned on every earlier image and the LM's stacked hidden states.
Training is decoupled: stage 1 tunes only the LM on conversations, stage 2
freezes it and aligns connector + head on interleaved context data.
"""

from .core import (
    Chunk,
    ImageStore,
    InputError,
    InterleavedSequence,
    ParseError,
    RunConfig,
    ShardRecord,
    TransformerDims,
    VocabSpec,
    deserialize,
    read_shard,
    serialize,
    validate_sequence,
    write_shard,
)

__version__ = "0.1.0"

__all__ = [
    "Chunk",
    "ImageStore",
    "InputError",
    "InterleavedSequence",
    "ParseError",
    "RunConfig",
    "ShardRecord",
    "TransformerDims",
    "VocabSpec",
    "deserialize",
    "read_shard",
    "serialize",
    "validate_sequence",
    "write_shard",
    "__version__",
]
