"""Backend adapters: HTTP chat dialect and the deterministic scripted policy."""

from .adapter import (
    CompletionRequest,
    CompletionResult,
    HttpChatBackend,
    TaintedText,
    ToolCall,
    ToolSchema,
    request_completion,
    retain_reasoning,
    validate_request,
)
from .scripted import ScriptedBackend

__all__ = [
    "CompletionRequest",
    "CompletionResult",
    "HttpChatBackend",
    "ScriptedBackend",
    "TaintedText",
    "ToolCall",
    "ToolSchema",
    "request_completion",
    "retain_reasoning",
    "validate_request",
]
