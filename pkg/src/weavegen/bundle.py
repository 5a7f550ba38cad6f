"""Model bundle: the LM, connector, and generation head built from one
RunConfig, plus versioned checkpoint save/load."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import torch

from .connector import ConditionProjector
from .core import InputError, RunConfig, VocabSpec, config_from_dict, config_to_dict
from .genhead import GenerationHead
from .mllm import MultimodalLM

CHECKPOINT_VERSION = 1

PARAM_GROUPS = ("mllm", "connector", "genhead")


@dataclass
class ModelBundle:
    config: RunConfig
    vocab: VocabSpec
    lm: MultimodalLM
    connector: ConditionProjector
    head: GenerationHead

    def param_groups(self) -> dict[str, torch.nn.Module]:
        return {"mllm": self.lm, "connector": self.connector, "genhead": self.head}

    def state_dicts(self) -> dict[str, dict[str, torch.Tensor]]:
        return {name: mod.state_dict() for name, mod in self.param_groups().items()}


def build_bundle(
    config: RunConfig, vocab: VocabSpec | None = None, dtype: torch.dtype = torch.float32
) -> ModelBundle:
    """Construct freshly initialized models; init is deterministic in config.seed."""
    vocab = vocab or VocabSpec()
    torch.manual_seed(config.seed)
    lm = MultimodalLM(vocab, config.lm_dims, config.latent_patch, dtype=dtype)
    connector = ConditionProjector(
        config.lm_dims.layers, config.lm_dims.width, config.dit_dims.width, dtype=dtype
    )
    head = GenerationHead(config.dit_dims, config.latent_channels, config.dit_dims.width, dtype=dtype)
    return ModelBundle(config=config, vocab=vocab, lm=lm, connector=connector, head=head)


def save_checkpoint(bundle: ModelBundle, path: str | Path, meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(bundle.config),
        "vocab": {
            "vocab_size": bundle.vocab.vocab_size,
            "bov_id": bundle.vocab.bov_id,
            "eos_id": bundle.vocab.eos_id,
            "pad_id": bundle.vocab.pad_id,
            "image_placeholder_id": bundle.vocab.image_placeholder_id,
        },
        "params": bundle.state_dicts(),
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[ModelBundle, dict[str, Any]]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {version!r}")
    config = config_from_dict(payload["config"])
    vocab = VocabSpec(**payload["vocab"])
    bundle = build_bundle(config, vocab, dtype=dtype)
    for name, mod in bundle.param_groups().items():
        mod.load_state_dict(payload["params"][name])
    return bundle, payload.get("meta", {})
