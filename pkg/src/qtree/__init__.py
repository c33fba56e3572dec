"""Confidence-gated query decomposition trees for retrieval-augmented QA."""

from .core import (
    ConfigError,
    DecompositionTree,
    EngineConfig,
    NodeKind,
    TreeNode,
    load_config,
    validate_config,
)
from .engine import Answer, Engine, Entities, MalformedModelOutput, Split
from .llm import CompletionsClient, GenerationRequest, GenerationResult, ScriptedLLM, confidence
from .retrieval import Corpus, Document, ingest

__all__ = [
    "Answer",
    "CompletionsClient",
    "ConfigError",
    "Corpus",
    "DecompositionTree",
    "Document",
    "Engine",
    "EngineConfig",
    "Entities",
    "GenerationRequest",
    "GenerationResult",
    "MalformedModelOutput",
    "NodeKind",
    "ScriptedLLM",
    "Split",
    "TreeNode",
    "confidence",
    "ingest",
    "load_config",
    "validate_config",
]
