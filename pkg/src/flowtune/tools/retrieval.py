"""Budgeted, cached and sanitized web / scholarly-metadata retrieval."""

from __future__ import annotations

import hashlib
import html
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import BudgetExhausted, DomainError, RetrievalUnavailable

DEFAULT_INJECTION_PATTERNS = (
    r"^\s*(ignore|disregard|forget|override)\b",
    r"^\s*you\s+(must|should|are\s+now|will)\b",
    r"^\s*(system|assistant|developer)\s*:",
    r"\b(ignore|disregard)\s+(all\s+|any\s+)?(previous|prior|above|earlier)\s+(instructions|prompts|messages)",
    r"^\s*(do\s+not|don't)\s+(follow|obey|tell|reveal)\b",
)
_TAG_RE = re.compile(r"<[^>]*>")
_SCRIPT_RE = re.compile(r"<(script|style)\b.*?</\1\s*>", re.IGNORECASE | re.DOTALL)


@dataclass(frozen=True)
class RetrievalBudget:
    max_calls_per_iteration: int = 3
    max_payload_chars_per_iteration: int = 2000
    max_snippet_chars: int = 500
    cutoff_iteration: int | None = None

    def __post_init__(self):
        for name in ("max_calls_per_iteration", "max_payload_chars_per_iteration", "max_snippet_chars"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if self.max_snippet_chars > self.max_payload_chars_per_iteration:
            raise DomainError("snippet cap exceeds the per-iteration payload cap")


@dataclass
class BudgetState:
    budget: RetrievalBudget = field(default_factory=RetrievalBudget)
    iteration: int = 1
    calls: int = 0
    payload_chars: int = 0
    history: dict = field(default_factory=dict)  # iteration -> (calls, payload)

    def start_iteration(self, iteration: int) -> None:
        self.iteration = iteration
        self.calls = 0
        self.payload_chars = 0
        self.history[iteration] = (0, 0)

    def _record(self) -> None:
        self.history[self.iteration] = (self.calls, self.payload_chars)

    @property
    def payload_left(self) -> int:
        return max(self.budget.max_payload_chars_per_iteration - self.payload_chars, 0)

    def check_open(self) -> None:
        cut = self.budget.cutoff_iteration
        if cut is not None and self.iteration > cut:
            raise BudgetExhausted(f"retrieval cutoff at iteration {cut} has passed")

    def charge_call(self) -> None:
        if self.calls >= self.budget.max_calls_per_iteration:
            raise BudgetExhausted(
                f"retrieval call budget of {self.budget.max_calls_per_iteration} per iteration exhausted"
            )
        self.calls += 1
        self._record()

    def charge_payload(self, n: int) -> None:
        self.payload_chars += n
        self._record()


def normalize_query(query: str) -> str:
    return " ".join(query.lower().split())


def normalize_cache_key(query: str, provider: str, options: dict | None = None) -> str:
    q = normalize_query(query or "")
    if not q:
        raise DomainError("query is empty")
    payload = json.dumps({"provider": provider, "query": q, "options": options or {}},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def sanitize_snippets(raw: str, cap: int, patterns=DEFAULT_INJECTION_PATTERNS) -> str:
    text = _SCRIPT_RE.sub(" ", raw or "")
    text = html.unescape(_TAG_RE.sub("", text))
    compiled = [re.compile(p, re.IGNORECASE) for p in patterns]
    kept = []
    for line in text.splitlines():
        line = " ".join(line.split())
        if not line or any(p.search(line) for p in compiled):
            continue
        kept.append(line)
    out = " ".join(kept)
    if len(out) <= cap:
        return out
    cut = out[: cap + 1]
    if cut[-1] != " " and " " in cut:
        cut = cut[: cut.rfind(" ")]
    return cut[:cap].rstrip()


class RetrievalCache:
    """Append-only line-delimited JSON store of raw provider responses."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        self.replayed: set[str] = set()
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    e = json.loads(line)
                    self._entries.setdefault(e["key"], e)

    def __contains__(self, key):
        return key in self._entries

    def __len__(self):
        return len(self._entries)

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def put(self, key: str, provider: str, query: str, response) -> dict:
        with self._lock:
            if key in self._entries:
                return self._entries[key]
            entry = {"key": key, "provider": provider, "query": query, "response": response,
                     "stored_at": time.time()}
            self._entries[key] = entry
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
            return entry


# ----------------------------------------------------------------------------
# providers


class _HttpProvider:
    name = "provider"
    endpoint = ""

    def __init__(self, session=None, timeout: float = 15.0):
        self._session = session
        self.timeout = timeout
        self.network_calls = 0

    @property
    def session(self):
        if self._session is None:
            import requests

            self._session = requests.Session()
        return self._session

    def _get(self, params: dict, headers: dict) -> dict:
        self.network_calls += 1
        resp = self.session.get(self.endpoint, params=params, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()


class WebSearchProvider(_HttpProvider):
    name = "brave"
    endpoint = "https://api.search.brave.com/res/v1/web/search"

    def __init__(self, api_key: str, session=None, timeout: float = 15.0):
        super().__init__(session, timeout)
        self.api_key = api_key

    def fetch(self, query: str, options: dict) -> dict:
        q = query if not options.get("site_filter") else f"{query} site:{options['site_filter']}"
        return self._get({"q": q, "count": options.get("top_k", 3)},
                         {"Accept": "application/json", "X-Subscription-Token": self.api_key})

    @staticmethod
    def parse(raw: dict) -> list[dict]:
        rows = (raw or {}).get("web", {}).get("results", [])
        return [{"title": r.get("title", ""), "url_or_id": r.get("url", ""), "snippet": r.get("description", "")}
                for r in rows]


class ScholarlyProvider(_HttpProvider):
    name = "openalex"
    endpoint = "https://api.openalex.org/works"

    def __init__(self, contact: str | None = None, session=None, timeout: float = 15.0):
        super().__init__(session, timeout)
        self.contact = contact

    def fetch(self, query: str, options: dict) -> dict:
        params = {"search": query, "per-page": max(options.get("top_k", 5) * 2, 10)}
        if options.get("year_range"):
            lo, hi = options["year_range"]
            params["filter"] = f"publication_year:{lo}-{hi}"
        if self.contact:
            params["mailto"] = self.contact
        return self._get(params, {"Accept": "application/json"})

    @staticmethod
    def parse(raw: dict) -> list[dict]:
        out = []
        for w in (raw or {}).get("results", []):
            src = ((w.get("primary_location") or {}).get("source") or {})
            authors = [((a.get("author") or {}).get("display_name") or "") for a in w.get("authorships", [])]
            out.append({
                "title": w.get("display_name") or w.get("title") or "",
                "url_or_id": w.get("id", ""),
                "authors": [a for a in authors if a],
                "year": w.get("publication_year"),
                "venue": src.get("display_name") or "",
            })
        return out


@dataclass
class RetrievalConfig:
    web: object | None = None
    scholarly: object | None = None
    budget: RetrievalBudget = field(default_factory=RetrievalBudget)
    patterns: tuple = DEFAULT_INJECTION_PATTERNS
    cache_only: bool = False  # replay mode: a miss is an error, providers are never contacted
    # replay mode: entries stored at or after this time were live fetches in the logged run
    fetched_since: float | None = None


@dataclass(frozen=True)
class RetrievalResult:
    kind: str
    records: list
    from_cache: bool
    query_key: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "untrusted": True, "records": self.records,
                "from_cache": self.from_cache, "query_key": self.query_key}

    def payload_chars(self) -> int:
        return _payload_size(self.records)


def _payload_size(records) -> int:
    return sum(len(r.get("title", "")) + len(r.get("url_or_id", "")) + len(r.get("snippet", "")) for r in records)


def _fit_payload(records: list[dict], allowance: int, cap: int, patterns) -> list[dict]:
    out, used = [], 0
    for r in records:
        r = dict(r)
        r["title"] = sanitize_snippets(r.get("title", ""), cap, patterns)
        r["snippet"] = sanitize_snippets(r.get("snippet", ""), cap, patterns)
        fixed = len(r["title"]) + len(r.get("url_or_id", ""))
        room = allowance - used - fixed
        if room < 0:
            break
        if len(r["snippet"]) > room:
            r["snippet"] = sanitize_snippets(r["snippet"], room, ())
        used += fixed + len(r["snippet"])
        out.append(r)
    return out


def _lookup(kind, provider, query, options, config: RetrievalConfig, cache: RetrievalCache, state: BudgetState):
    if provider is None:
        raise RetrievalUnavailable(f"no {kind} provider configured")
    state.check_open()
    key = normalize_cache_key(query, provider.name, options)
    entry = cache.get(key)
    from_cache = entry is not None
    if (from_cache and config.cache_only and config.fetched_since is not None
            and entry["stored_at"] >= config.fetched_since and key not in cache.replayed):
        # first use of an entry the logged run fetched: account for it exactly as the fetch was
        state.charge_call()
        cache.replayed.add(key)
        from_cache = False
    elif not from_cache:
        if config.cache_only:
            raise RetrievalUnavailable(f"cache miss for {kind} query {normalize_query(query)!r}")
        state.charge_call()
        try:
            raw = provider.fetch(normalize_query(query), options)
        except Exception as exc:
            raise RetrievalUnavailable(f"{kind} provider failed: {exc}") from exc
        entry = cache.put(key, provider.name, normalize_query(query), raw)
    return key, type(provider).parse(entry["response"]), from_cache


def web_search(query: str, config: RetrievalConfig, cache: RetrievalCache, budget_state: BudgetState,
               top_k: int = 3, site_filter: str | None = None) -> RetrievalResult:
    options = {"top_k": int(top_k)}
    if site_filter:
        options["site_filter"] = site_filter
    key, records, hit = _lookup("web", config.web, query, options, config, cache, budget_state)
    records = records[:top_k]
    records = _fit_payload(records, budget_state.payload_left, config.budget.max_snippet_chars, config.patterns)
    budget_state.charge_payload(_payload_size(records))
    return RetrievalResult("web", records, hit, key)


def scholarly_lookup(query: str, config: RetrievalConfig, cache: RetrievalCache, budget_state: BudgetState,
                     top_k: int = 5, year_range: tuple | None = None,
                     venue_filter: str | None = None) -> RetrievalResult:
    options = {"top_k": int(top_k)}
    if year_range:
        options["year_range"] = [int(year_range[0]), int(year_range[1])]
    if venue_filter:
        options["venue_filter"] = venue_filter
    key, works, hit = _lookup("scholarly", config.scholarly, query, options, config, cache, budget_state)
    seen, out = set(), []
    for w in works:
        if w["url_or_id"] in seen:
            continue
        if year_range and (w.get("year") is None or not year_range[0] <= w["year"] <= year_range[1]):
            continue
        if venue_filter and venue_filter.lower() not in (w.get("venue") or "").lower():
            continue
        seen.add(w["url_or_id"])
        authors = ", ".join(w.get("authors", [])[:3])
        out.append({**w, "snippet": f"{authors} ({w.get('year')}), {w.get('venue', '')}".strip()})
        if len(out) == top_k:
            break
    out = _fit_payload(out, budget_state.payload_left, config.budget.max_snippet_chars, config.patterns)
    budget_state.charge_payload(_payload_size(out))
    return RetrievalResult("scholarly", out, hit, key)
