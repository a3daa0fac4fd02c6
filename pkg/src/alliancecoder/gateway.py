"""Chat-completion gateway with record/replay caching.

Three modes:
  live    call the transport, nothing is cached
  record  call the transport and append (key, stage_tag, text) to the cache
  replay  serve from the cache only; a miss is fatal and names the key

The cache key is a stable hash of (model, messages, temperature, stage_tag,
template_version), so identical requests always map to the same transcript
entry. The cache file is append-only; on load the first record for a key
wins, which keeps replay deterministic even if a key was recorded twice.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import textwrap
import threading
import time
from dataclasses import dataclass, field

MODES = ("live", "record", "replay")
STAGE_TAGS = ("api_describe", "steps", "api_descs", "extend", "generate")

ENV_API_KEY = "ALLIANCECODER_API_KEY"
ENV_BASE_URL = "ALLIANCECODER_BASE_URL"


class GatewayError(RuntimeError):
    pass


class GatewayConfigError(GatewayError):
    """Unrecoverable request/configuration problem (maps to exit code 2)."""


class TransportError(GatewayError):
    """Transient transport failure that exhausted its retries."""


class ReplayMissError(GatewayError):
    def __init__(self, key: str, stage_tag: str):
        super().__init__(
            f"replay cache has no entry for key {key} (stage {stage_tag}); "
            "re-record the transcript or switch mode"
        )
        self.key = key


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple  # ((role, content), ...)
    stage_tag: str
    temperature: float = 0.7
    max_tokens: int = 1024
    template_version: str = ""

    def validate(self) -> None:
        if not self.messages:
            raise GatewayConfigError("request has no messages")
        if self.messages[0][0] not in ("system", "user"):
            raise GatewayConfigError(f"first message role must be system or user, got {self.messages[0][0]}")
        if not 0.0 <= self.temperature <= 2.0:
            raise GatewayConfigError(f"temperature out of range: {self.temperature}")
        if self.stage_tag not in STAGE_TAGS:
            raise GatewayConfigError(f"unknown stage tag: {self.stage_tag}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": self.model,
                "messages": [list(m) for m in self.messages],
                "stage_tag": self.stage_tag,
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
                "template_version": self.template_version,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ChatRequest":
        rec = json.loads(text)
        return cls(
            model=rec["model"],
            messages=tuple((role, content) for role, content in rec["messages"]),
            stage_tag=rec["stage_tag"],
            temperature=rec["temperature"],
            max_tokens=rec["max_tokens"],
            template_version=rec["template_version"],
        )


def request_key(request: ChatRequest) -> str:
    payload = json.dumps(
        {
            "model": request.model,
            "messages": [list(m) for m in request.messages],
            "temperature": request.temperature,
            "stage_tag": request.stage_tag,
            "template_version": request.template_version,
        },
        sort_keys=True,
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class CompletionResult:
    text: str
    prompt_token_count: int
    completion_token_count: int
    cached: bool


def estimate_tokens(text: str) -> int:
    """Byte-length heuristic used when no provider tokenizer is available."""
    return math.ceil(len(text.encode("utf-8")) / 4)


class ReplayCache:
    """Append-only transcript of (key, stage_tag, completion text) records."""

    def __init__(self, path):
        self.path = str(path)
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        self._stages: dict[str, str] = {}
        if os.path.exists(self.path):
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                # first record wins so replay stays deterministic per key
                self._entries.setdefault(rec["key"], rec["text"])
                self._stages.setdefault(rec["key"], rec["stage_tag"])

    def get(self, key: str) -> str | None:
        return self._entries.get(key)

    def append(self, key: str, stage_tag: str, text: str) -> None:
        line = json.dumps({"key": key, "stage_tag": stage_tag, "text": text}, sort_keys=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
            self._entries.setdefault(key, text)
            self._stages.setdefault(key, stage_tag)

    def stage_counts(self) -> dict[str, int]:
        """Unique keys per stage tag; sums to len(self)."""
        counts: dict[str, int] = {}
        for stage in self._stages.values():
            counts[stage] = counts.get(stage, 0) + 1
        return counts

    def entries(self):
        """(key, (stage_tag, text)) pairs in sorted key order, first record
        per key, for deterministic export."""
        for key in sorted(self._entries):
            yield key, (self._stages[key], self._entries[key])

    def __len__(self) -> int:
        return len(self._entries)


class OpenAIChatTransport:
    """HTTP transport for chat-completions-shaped endpoints."""

    def __init__(self, base_url: str, api_key: str | None, timeout: float = 120.0, session=None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.calls = 0
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def send(self, request: ChatRequest):
        self.calls += 1
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": request.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        try:
            resp = self._session.post(
                f"{self.base_url}/chat/completions", json=payload,
                headers=headers, timeout=self.timeout,
            )
        except Exception as exc:  # connection errors and timeouts retry upstream
            raise TransportError(f"transport failure: {exc}") from exc
        if 400 <= resp.status_code < 500:
            raise GatewayConfigError(
                f"provider rejected request ({resp.status_code}): {resp.text[:300]}"
            )
        if resp.status_code >= 500:
            raise TransportError(f"provider server error {resp.status_code}")
        data = resp.json()
        text = data["choices"][0]["message"]["content"]
        usage = data.get("usage", {})
        return (
            text,
            int(usage.get("prompt_tokens", 0)) or None,
            int(usage.get("completion_tokens", 0)) or None,
        )


def transport_from_env(timeout: float = 120.0) -> OpenAIChatTransport:
    base_url = os.environ.get(ENV_BASE_URL, "")
    if not base_url:
        raise GatewayConfigError(f"live/record mode needs {ENV_BASE_URL} set")
    return OpenAIChatTransport(base_url, os.environ.get(ENV_API_KEY), timeout=timeout)


class Gateway:
    """Mode-aware completion frontend with bounded retries and concurrency."""

    def __init__(self, mode: str, cache: ReplayCache | None = None, transport=None,
                 retries: int = 3, backoff: float = 1.0, max_in_flight: int = 4,
                 sleep=time.sleep):
        if mode not in MODES:
            raise GatewayConfigError(f"mode must be one of {MODES}, got {mode!r}")
        if mode in ("record", "replay") and cache is None:
            raise GatewayConfigError(f"{mode} mode needs a replay cache")
        if mode in ("live", "record") and transport is None:
            raise GatewayConfigError(f"{mode} mode needs a transport")
        self.mode = mode
        self.cache = cache
        self.transport = transport
        self.retries = retries
        self.backoff = backoff
        self.sleep = sleep
        self._gate = threading.Semaphore(max_in_flight)
        self.stats = {"llm_calls": 0, "cache_hits": 0}

    def complete(self, request: ChatRequest) -> CompletionResult:
        request.validate()
        key = request_key(request)
        if self.mode == "replay":
            text = self.cache.get(key)
            if text is None:
                raise ReplayMissError(key, request.stage_tag)
            self.stats["cache_hits"] += 1
            prompt_text = "\n".join(c for _, c in request.messages)
            return CompletionResult(
                text=text,
                prompt_token_count=estimate_tokens(prompt_text),
                completion_token_count=estimate_tokens(text),
                cached=True,
            )
        text, ptok, ctok = self._send_with_retries(request)
        if self.mode == "record":
            self.cache.append(key, request.stage_tag, text)
        prompt_text = "\n".join(c for _, c in request.messages)
        return CompletionResult(
            text=text,
            prompt_token_count=ptok if ptok is not None else estimate_tokens(prompt_text),
            completion_token_count=ctok if ctok is not None else estimate_tokens(text),
            cached=False,
        )

    def _send_with_retries(self, request: ChatRequest):
        last: Exception | None = None
        for attempt in range(self.retries):
            with self._gate:
                try:
                    self.stats["llm_calls"] += 1
                    return self.transport.send(request)
                except GatewayConfigError:
                    raise
                except TransportError as exc:
                    last = exc
            if attempt < self.retries - 1:
                self.sleep(self.backoff * (2 ** attempt))
        raise TransportError(f"request failed after {self.retries} attempts: {last}")


# ── candidate extraction ─────────────────────────────────────────────────────

EXTRACTION_METHODS = ("fenced_block", "heuristic_def_scan", "whole_completion")

_FENCE_RE = re.compile(r"```[A-Za-z0-9_+.-]*[ \t]*\n(.*?)```", re.DOTALL)
_DEF_RE = re.compile(r"^(\s*)(?:async\s+)?def\s+\w+", re.MULTILINE)


class CandidateUnparsableError(ValueError):
    pass


@dataclass(frozen=True)
class CodeCandidate:
    source: str
    extraction_method: str


def _def_scan(text: str) -> str | None:
    lines = text.splitlines()
    start = None
    for i, line in enumerate(lines):
        if _DEF_RE.match(line):
            start = i
            break
    if start is None:
        return None
    indent = len(lines[start]) - len(lines[start].lstrip())
    # pull in decorator lines sitting directly above
    while start > 0 and lines[start - 1].strip().startswith("@"):
        start -= 1
    end = len(lines)
    for j in range(_def_line_after(lines, start) + 1, len(lines)):
        stripped = lines[j].strip()
        if not stripped:
            continue
        if len(lines[j]) - len(lines[j].lstrip()) <= indent:
            end = j
            break
    return "\n".join(lines[start:end])


def _def_line_after(lines, start: int) -> int:
    for j in range(start, len(lines)):
        if _DEF_RE.match(lines[j]):
            return j
    return start


def _isolate_definition(region: str) -> str | None:
    import ast

    src = textwrap.dedent(region).strip("\n")
    if not src:
        return None
    try:
        tree = ast.parse(src)
    except SyntaxError:
        return None
    for node in tree.body:
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            start = node.lineno
            if node.decorator_list:
                start = min(start, min(d.lineno for d in node.decorator_list))
            return "\n".join(src.splitlines()[start - 1:node.end_lineno])
    return None


def extract_code(completion_text: str) -> CodeCandidate:
    """Pull one callable definition out of a model completion.

    Preference order: first fenced code block, then a bare definition found
    by scanning, then the whole completion. Whatever region is chosen must
    parse and contain a definition, otherwise the candidate is unparsable.
    """
    match = _FENCE_RE.search(completion_text)
    if match:
        region, method = match.group(1), "fenced_block"
    else:
        scanned = _def_scan(completion_text)
        if scanned is not None:
            region, method = scanned, "heuristic_def_scan"
        else:
            region, method = completion_text, "whole_completion"
    source = _isolate_definition(region)
    if source is None:
        raise CandidateUnparsableError(
            f"no parsable definition in completion (tried {method})"
        )
    return CodeCandidate(source=source, extraction_method=method)
