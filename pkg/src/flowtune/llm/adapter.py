"""Chat/tool-calling adapter: request validation, structured-output repair, trace policy."""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from typing import Callable

from ..errors import BackendError, LimitError, SchemaError, StructuredParseError, TaintError

log = logging.getLogger(__name__)

TOOL_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_-]{0,63}$")
MAX_TOOLS = 128
MAX_REPAIRS = 3
CONTENT_RESERVE = 0.4
SUMMARY_CAP = 280
DEFAULT_TEMPERATURE = 0.1


class TaintedText:
    """Reasoning-trace text: loggable, but refuses to become part of a prompt."""

    __slots__ = ("_text",)

    def __init__(self, text: str):
        self._text = text

    def __len__(self):
        return len(self._text)

    def __bool__(self):
        return bool(self._text)

    def __str__(self):
        raise TaintError("reasoning trace text cannot be converted to a prompt string")

    def __format__(self, spec):
        raise TaintError("reasoning trace text cannot be formatted into a prompt")

    def __add__(self, other):
        raise TaintError("reasoning trace text cannot be concatenated")

    __radd__ = __add__

    def __repr__(self):
        return f"<TaintedText len={len(self._text)}>"

    def for_log(self) -> str:
        """Raw text, for the trace log file only."""
        return self._text

    def keyword_hits(self, vocabulary) -> list[str]:
        low = self._text.lower()
        return [w for w in vocabulary if w in low]


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str = ""
    parameters: dict = field(default_factory=lambda: {"type": "object", "properties": {}, "required": []})

    def to_wire(self) -> dict:
        return {"type": "function",
                "function": {"name": self.name, "description": self.description, "parameters": self.parameters}}


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    arguments: dict

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "arguments": self.arguments}


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple
    tools: tuple = ()
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = 4096
    structured_output: bool = False
    choices: int = 1
    reasoning_budget: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "tools", tuple(self.tools))


@dataclass
class CompletionResult:
    content: str
    tool_calls: list = field(default_factory=list)
    reasoning_trace: TaintedText | None = None
    token_usage: dict = field(default_factory=dict)
    retry_count: int = 0
    parsed: object = None
    model: str = ""

    def response_record(self) -> dict:
        """The part of a response that is safe to log in the proposal transcript."""
        return {"content": self.content, "tool_calls": [c.to_dict() for c in self.tool_calls]}


def validate_request(request: CompletionRequest) -> CompletionRequest:
    if len(request.tools) > MAX_TOOLS:
        raise LimitError(f"{len(request.tools)} tools exceed the limit of {MAX_TOOLS}")
    for t in request.tools:
        if not isinstance(t.name, str) or not TOOL_NAME_RE.match(t.name):
            raise SchemaError(f"invalid tool name {t.name!r}: must match {TOOL_NAME_RE.pattern}")
    temp = min(max(float(request.temperature), 0.0), 1.0)
    choices = max(int(request.choices), 1)
    if temp < 0.01:
        choices = 1
    if request.max_tokens < 1:
        raise LimitError("max_tokens must be >= 1")
    budget = request.reasoning_budget
    if budget is not None:
        budget = max(0, min(int(budget), int(request.max_tokens * (1.0 - CONTENT_RESERVE))))
    for m in request.messages:
        if isinstance(m.get("content"), TaintedText):
            raise TaintError("a message carries reasoning-trace text")
    return replace(request, temperature=temp, choices=choices, reasoning_budget=budget)


def reasoning_budget(max_tokens: int) -> int:
    """Largest trace allowance that still leaves the content reserve free."""
    return int(max_tokens * (1.0 - CONTENT_RESERVE))


def _repair_message(error: str) -> dict:
    return {"role": "user",
            "content": f"Your previous reply could not be accepted: {error}. "
                       "Reply again with only the corrected JSON object."}


def request_completion(backend, request: CompletionRequest, validator: Callable | None = None) -> CompletionResult:
    """Call the backend; when structured output is requested, validate and repair up to 3 times.

    ``validator`` receives the parsed JSON content and returns the accepted
    value or raises ``ValueError`` with a message that is quoted back to the
    model. Responses carrying tool calls are returned without validation.
    """
    request = validate_request(request)
    if getattr(backend, "emits_reasoning", False) and request.reasoning_budget is None:
        request = replace(request, reasoning_budget=reasoning_budget(request.max_tokens))
    messages = list(request.messages)
    last_error = None
    for attempt in range(MAX_REPAIRS + 1):
        result = backend.complete(replace(request, messages=tuple(messages)))
        result.retry_count = attempt
        if result.tool_calls or not request.structured_output:
            return result
        try:
            doc = json.loads(result.content)
            result.parsed = validator(doc) if validator else doc
            return result
        except (ValueError, TypeError, KeyError) as exc:
            last_error = str(exc) or type(exc).__name__
            log.info("structured output rejected (attempt %d): %s", attempt + 1, last_error)
            messages.append({"role": "assistant", "content": result.content})
            messages.append(_repair_message(last_error))
    raise StructuredParseError(
        f"structured output invalid after {MAX_REPAIRS} repair attempts: {last_error}",
        attempts=MAX_REPAIRS + 1, last_error=last_error,
    )


# ----------------------------------------------------------------------------
# reasoning traces

TRACE_VOCABULARY = (
    "kernel", "matern", "rbf", "expected improvement", "exploration", "exploitation", "surrogate", "timeout",
    "clock", "utilization", "density", "padding", "constraint", "pareto", "diversity", "outlier", "correlation",
    "latin hypercube", "incumbent", "noise",
)


class TraceLog:
    """Sink for full reasoning traces; kept apart from anything prompt-bound."""

    def __init__(self, path=None):
        self.path = path
        self.entries: list[dict] = []

    def write(self, iteration: int, stage: str, trace: TaintedText) -> None:
        entry = {"iteration": iteration, "stage": stage, "chars": len(trace), "trace": trace.for_log()}
        self.entries.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")


def retain_reasoning(result: CompletionResult, policy: str = "summary", trace_log: TraceLog | None = None,
                     iteration: int = 0, stage: str = "") -> str:
    """Log the full trace and return the only trace-derived text allowed into later prompts.

    The fragment is built from a fixed vocabulary and the trace length, never
    from trace substrings, and is capped at 280 characters.
    """
    trace = result.reasoning_trace
    if not trace:
        return ""
    if trace_log is not None:
        trace_log.write(iteration, stage, trace)
    if policy == "drop":
        return ""
    hits = trace.keyword_hits(TRACE_VOCABULARY)
    frag = f"trace {len(trace)} chars"
    if hits:
        frag += "; themes: " + ", ".join(hits)
    return frag[:SUMMARY_CAP]


# ----------------------------------------------------------------------------
# HTTP chat-completions backend


class HttpChatBackend:
    """OpenAI-style chat-completions dialect with tool calling and JSON mode."""

    emits_reasoning = True

    def __init__(self, base_url: str, api_key: str, model: str, session=None, max_attempts: int = 3,
                 timeout: float = 120.0, sleep=time.sleep, transcript=None, reasoning_field: str | None = None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self._session = session
        self.max_attempts = max_attempts
        self.timeout = timeout
        self.sleep = sleep
        self.transcript = transcript  # callable(record) for request/response logging
        self.reasoning_field = reasoning_field
        self.calls = 0

    @property
    def model_id(self) -> str:
        return self.model

    @property
    def session(self):
        if self._session is None:
            import requests

            self._session = requests.Session()
        return self._session

    def payload(self, request: CompletionRequest) -> dict:
        msgs = []
        for m in request.messages:
            if isinstance(m.get("content"), TaintedText):
                raise TaintError("a message carries reasoning-trace text")
            msgs.append(m)
        body = {"model": self.model, "messages": msgs, "temperature": request.temperature,
                "max_tokens": request.max_tokens, "n": request.choices}
        if request.tools:
            body["tools"] = [t.to_wire() for t in request.tools]
        if request.structured_output and not request.tools:
            body["response_format"] = {"type": "json_object"}
        if self.reasoning_field and request.reasoning_budget is not None:
            body[self.reasoning_field] = {"max_tokens": request.reasoning_budget}
        return body

    def complete(self, request: CompletionRequest) -> CompletionResult:
        body = self.payload(request)
        status, last = None, None
        for attempt in range(1, self.max_attempts + 1):
            self.calls += 1
            try:
                resp = self.session.post(f"{self.base_url}/chat/completions", json=body, timeout=self.timeout,
                                         headers={"Authorization": f"Bearer {self.api_key}"})
                status = resp.status_code
                if status == 429 or status >= 500:
                    last = f"HTTP {status}"
                elif status >= 400:
                    raise BackendError(f"HTTP {status}: {resp.text[:200]}", attempts=attempt, status=status)
                else:
                    data = resp.json()
                    result = self.parse(data)
                    if self.transcript:
                        self.transcript({"model": self.model, "request": body, "response": result.response_record(),
                                         "usage": result.token_usage})
                    return result
            except BackendError:
                raise
            except Exception as exc:  # transport errors from the session
                last = f"{type(exc).__name__}: {exc}"
            if attempt < self.max_attempts:
                self.sleep(min(2.0 ** (attempt - 1), 30.0))
        raise BackendError(f"backend unavailable after {self.max_attempts} attempts ({last})",
                           attempts=self.max_attempts, status=status)

    def parse(self, data: dict) -> CompletionResult:
        try:
            msg = data["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
        calls = []
        for i, tc in enumerate(msg.get("tool_calls") or []):
            fn = tc.get("function", {})
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError:
                args = {"__unparsed__": fn.get("arguments")}
            calls.append(ToolCall(tc.get("id", f"call_{i}"), fn.get("name", ""), args))
        trace = msg.get("reasoning_content") or msg.get("reasoning")
        return CompletionResult(
            content=msg.get("content") or "",
            tool_calls=calls,
            reasoning_trace=TaintedText(trace) if trace else None,
            token_usage=dict(data.get("usage") or {}),
            model=data.get("model", self.model),
        )
