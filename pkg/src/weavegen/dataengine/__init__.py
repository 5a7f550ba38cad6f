"""Data engine: webpage-to-conversation pipeline, synthetic prompt expansion,
and video-transition alignment pairs, all behind a pluggable chat endpoint."""

from .client import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    ClientError,
    HttpChatClient,
    LlmClientSpec,
    MockChatClient,
    make_client,
)
from .expand import PromptPool, PromptRecord, PromptTaxonomy, expand_prompts, synth_taxonomy
from .mock import MockEngineClient
from .stages import (
    EngineConfig,
    EngineStats,
    export_conversations,
    run_engine,
    stage_caption_classify,
    stage_dedup_reorder,
    stage_dialogize,
    stage_filter,
    stage_rewrite_split,
)
from .store import PageImage, PageRecord, RecordStore, load_corpus, page_key
from .video import ClipRow, VideoPairResult, assemble_video_pairs, load_manifest

__all__ = [
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "ClientError",
    "ClipRow",
    "EngineConfig",
    "EngineStats",
    "HttpChatClient",
    "LlmClientSpec",
    "MockChatClient",
    "MockEngineClient",
    "PageImage",
    "PageRecord",
    "PromptPool",
    "PromptRecord",
    "PromptTaxonomy",
    "RecordStore",
    "VideoPairResult",
    "assemble_video_pairs",
    "expand_prompts",
    "export_conversations",
    "load_corpus",
    "load_manifest",
    "make_client",
    "page_key",
    "run_engine",
    "stage_caption_classify",
    "stage_dedup_reorder",
    "stage_dialogize",
    "stage_filter",
    "stage_rewrite_split",
    "synth_taxonomy",
]
