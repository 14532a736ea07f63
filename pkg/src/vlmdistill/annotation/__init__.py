from .clients import LiveVlmClient, MockVlmClient, ReplayClient, VlmClient
from .parsing import format_actions, format_freeform, parse_actions, parse_freeform, resolve_action
from .pipeline import BatchSummary, annotate, annotate_batch
from .prompts import (
    ACTION_FAMILIES,
    DEFAULT_VOCABULARY,
    ActionVocabulary,
    PromptFamily,
    PromptTemplate,
    build_prompt,
)
from .records import AnnotationRecord, FreeformAnnotation, StructuredActionAnnotation
from .store import ScanResult, store_append, store_scan

__all__ = [
    "ACTION_FAMILIES",
    "DEFAULT_VOCABULARY",
    "ActionVocabulary",
    "AnnotationRecord",
    "BatchSummary",
    "FreeformAnnotation",
    "LiveVlmClient",
    "MockVlmClient",
    "PromptFamily",
    "PromptTemplate",
    "ReplayClient",
    "ScanResult",
    "StructuredActionAnnotation",
    "VlmClient",
    "annotate",
    "annotate_batch",
    "build_prompt",
    "format_actions",
    "format_freeform",
    "parse_actions",
    "parse_freeform",
    "resolve_action",
    "store_append",
    "store_scan",
]
