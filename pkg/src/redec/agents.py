"""Level-specialized repair agents and the model client behind them.

Each repair call is stateless: the prompt is rebuilt from scratch from the
current code and the current diagnostics, with no memory of earlier
iterations. The wire protocol is plain chat-completions JSON so any
compatible endpoint works; a scripted mock client stands in for the
endpoint in tests and offline runs.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import (
    AuthError,
    ConfigError,
    EmptyRepair,
    EndpointUnavailable,
    RedecError,
)
from .model import Diagnostics, Level, RepairOrigin, SourceUnit

log = logging.getLogger("redec.agents")

MAX_TOOL_FEEDBACK_CHARS = 500
MAX_L3_CASES = 2
MAX_DIFF_LINES = 10
ESCALATED_MAX_TOKENS = 8192
_TRUNCATION_MARK = "\n... [truncated]"

_SYSTEM_BASE = (
    "You are an expert C developer repairing decompiler output so that it "
    "compiles and behaves exactly like the original binary. "
)
_SYSTEM_LEVEL = {
    Level.L1: "The code currently fails to parse; fix the syntax errors.",
    Level.L2: (
        "The code parses but fails to compile or link; fix missing "
        "declarations, wrong types, and unresolved references."
    ),
    Level.L3: (
        "The code compiles but produces wrong output at runtime; fix the "
        "logic so the program's output matches the expected output exactly."
    ),
}
_SYSTEM_SUFFIX = (
    " Return only the corrected C code, with no explanations or markdown "
    "formatting. Preserve the overall structure of the given code and "
    "change only what is needed."
)


@dataclass(frozen=True)
class AgentConfig:
    temperature: float = 0.0
    max_output_tokens: int = 4096
    max_retries: int = 3
    backoff_base_ms: int = 500
    endpoint_url: str = ""
    model_name: str = ""
    api_key_env: str = "A4D_API_KEY"
    requests_per_minute: float | None = None


@dataclass(frozen=True)
class PromptBundle:
    system_instruction: str
    constraint_status: str
    error_feedback: str
    current_code: str

    def messages(self) -> list[dict]:
        user = (
            f"{self.constraint_status}\n\n{self.error_feedback}\n\n"
            f"Current code:\n{self.current_code}"
        )
        return [
            {"role": "system", "content": self.system_instruction},
            {"role": "user", "content": user},
        ]


@dataclass(frozen=True)
class RepairAttempt:
    level: Level
    bundle: PromptBundle
    reply: str
    extracted: str
    latency_ms: int
    tokens_in: int
    tokens_out: int


class TransportError(RedecError):
    """Network-ish failure worth retrying."""


class RateLimited(TransportError):
    pass


def _render_bytes(data: bytes) -> str:
    if not data:
        return "(empty)"
    return data.decode("utf-8", errors="backslashreplace")


def _checklist() -> str:
    return (
        resources.files("redec.templates")
        .joinpath("execution_checklist.txt")
        .read_text()
        .strip()
    )


def format_feedback(diag: Diagnostics) -> str:
    """Render diagnostics for the prompt, bounded so it cannot flood it.

    L1/L2: raw tool output, at most 500 characters including the marker
    appended when something had to be cut. L3: the first two failing cases
    in suite order with a capped unified diff each, then the pitfall
    checklist.
    """
    if diag.level in (Level.L1, Level.L2):
        raw = diag.raw_text
        if len(raw) <= MAX_TOOL_FEEDBACK_CHARS:
            return raw
        keep = MAX_TOOL_FEEDBACK_CHARS - len(_TRUNCATION_MARK)
        return raw[:keep] + _TRUNCATION_MARK

    parts = []
    shown = diag.failed_tests[:MAX_L3_CASES]
    for i, (case, actual_stdout, actual_exit) in enumerate(shown, start=1):
        expected = _render_bytes(case.expected_stdout)
        actual = _render_bytes(actual_stdout)
        diff_lines = list(
            difflib.unified_diff(
                expected.splitlines(),
                actual.splitlines(),
                fromfile="expected",
                tofile="actual",
                lineterm="",
            )
        )[:MAX_DIFF_LINES]
        parts.append(
            "\n".join(
                [
                    f"Failing case {i}:",
                    f"  args: {json.dumps(list(case.args))}",
                    f"  stdin: {_render_bytes(case.stdin)}",
                    f"  expected exit {case.expected_exit}, got {actual_exit}",
                    f"  expected stdout: {expected}",
                    f"  actual stdout: {actual}",
                    "  diff:",
                    *(f"    {line}" for line in diff_lines),
                ]
            )
        )
    remaining = len(diag.failed_tests) - len(shown)
    if remaining > 0:
        parts.append(f"({remaining} more failing case(s) not shown)")
    parts.append(_checklist())
    return "\n\n".join(parts)


def _constraint_status(level: Level) -> str:
    rows = []
    for lv, label in ((Level.L1, "syntax"), (Level.L2, "compilation"), (Level.L3, "execution")):
        if lv < level:
            state = "passed"
        elif lv == level:
            state = "FAILED"
        else:
            state = "not reached"
        rows.append(f"{lv.name} ({label}): {state}")
    return "Constraint status:\n" + "\n".join(rows)


def build_prompt(level: Level, source: SourceUnit, diag: Diagnostics) -> PromptBundle:
    """Deterministic: same (level, source, diagnostics) gives the same bundle."""
    if level not in _SYSTEM_LEVEL:
        raise ValueError(f"no repair agent for level {level}")
    return PromptBundle(
        system_instruction=_SYSTEM_BASE + _SYSTEM_LEVEL[level] + _SYSTEM_SUFFIX,
        constraint_status=_constraint_status(level),
        error_feedback=format_feedback(diag),
        current_code=source.text,
    )


def prompt_fingerprint() -> str:
    """Digest of every template that shapes prompts; part of the cache key."""
    h = hashlib.sha256()
    for part in (_SYSTEM_BASE, *_SYSTEM_LEVEL.values(), _SYSTEM_SUFFIX, _checklist()):
        h.update(part.encode())
    return h.hexdigest()


# --- reply handling ---------------------------------------------------------

_FENCE_RE = re.compile(r"```[A-Za-z+]*[ \t]*\n?([\s\S]*?)```")
_CODE_START_RE = re.compile(
    r"^\s*(#\s*include|#\s*define|/\*|//|typedef\b|struct\b|union\b|enum\b|"
    r"static\b|extern\b|const\b|unsigned\b|signed\b|int\b|long\b|short\b|"
    r"char\b|float\b|double\b|void\b|size_t\b|bool\b|undefined)"
)


def _looks_like_c(text: str) -> bool:
    return any(tok in text for tok in ("{", ";", "#include"))


def extract_code(reply: str) -> str:
    """Pull C source out of a model reply.

    Prefers the largest C-looking fenced block; otherwise strips leading and
    trailing prose from the raw reply. Raises EmptyRepair when nothing
    usable remains.
    """
    blocks = [b for b in _FENCE_RE.findall(reply) if _looks_like_c(b)]
    if blocks:
        return max(blocks, key=len).strip("\n")
    lines = reply.splitlines()
    start = next((i for i, ln in enumerate(lines) if _CODE_START_RE.match(ln)), None)
    if start is None:
        raise EmptyRepair("reply contains no recognizable C code")
    end = max(
        (i for i, ln in enumerate(lines) if ln.rstrip().endswith(("}", ";"))),
        default=None,
    )
    if end is None or end < start:
        raise EmptyRepair("reply contains no recognizable C code")
    code = "\n".join(lines[start : end + 1]).strip("\n")
    if not code.strip():
        raise EmptyRepair("reply contains no recognizable C code")
    return code


# --- clients ----------------------------------------------------------------


class _TokenBucket:
    """Client-side requests-per-minute limiter; per process, thread-safe."""

    def __init__(self, per_minute: float):
        self.interval = 60.0 / per_minute
        self.lock = threading.Lock()
        self.next_at = 0.0

    def acquire(self, sleep=time.sleep):
        with self.lock:
            now = time.monotonic()
            wait = self.next_at - now
            self.next_at = max(now, self.next_at) + self.interval
        if wait > 0:
            sleep(wait)


class HttpModelClient:
    """Minimal chat-completions client. The API key comes from the
    environment variable named in the config, never from a file."""

    def __init__(self, cfg: AgentConfig):
        if not cfg.endpoint_url:
            raise ConfigError(
                "no model endpoint configured (set A4D_ENDPOINT or agent.endpoint)"
            )
        self.cfg = cfg
        self._client = None

    def send(self, payload: dict) -> dict:
        import httpx

        if self._client is None:
            self._client = httpx.Client(timeout=120.0)
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._client.post(self.cfg.endpoint_url, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"endpoint rejected credentials ({resp.status_code})")
        if resp.status_code == 429:
            raise RateLimited("endpoint rate limit")
        if resp.status_code >= 400:
            raise TransportError(f"endpoint returned {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"endpoint returned non-JSON: {exc}") from exc

    # pickling support for process-pool workers: drop the live socket
    def __getstate__(self):
        return {"cfg": self.cfg}

    def __setstate__(self, state):
        self.cfg = state["cfg"]
        self._client = None


class MockModelClient:
    """Scripted stand-in for the endpoint.

    Entries are either reply strings, {"content": ..., "finish_reason": ...}
    dicts, or {"error": "transport"|"rate_limit"|"auth"} failure
    injections, consumed in order. With repeat_last=True the final entry
    answers every further call, which is how a never-repairing agent is
    scripted.
    """

    def __init__(self, entries: list, repeat_last: bool = False):
        self.entries = list(entries)
        self.repeat_last = repeat_last
        self.pos = 0
        self.calls = 0

    def send(self, payload: dict) -> dict:
        self.calls += 1
        if self.pos >= len(self.entries):
            if self.repeat_last and self.entries:
                entry = self.entries[-1]
            else:
                raise TransportError("mock transcript exhausted")
        else:
            entry = self.entries[self.pos]
            self.pos += 1
        if isinstance(entry, dict) and "error" in entry:
            kind = entry["error"]
            if kind == "rate_limit":
                raise RateLimited("scripted rate limit")
            if kind == "auth":
                raise AuthError("scripted auth failure")
            raise TransportError("scripted transport failure")
        if isinstance(entry, dict):
            content = entry.get("content", "")
            finish = entry.get("finish_reason", "stop")
        else:
            content, finish = str(entry), "stop"
        return {
            "choices": [{"message": {"role": "assistant", "content": content},
                         "finish_reason": finish}],
            "usage": {"prompt_tokens": 0, "completion_tokens": 0},
        }


class TranscriptFactory:
    """Per-binary mock clients from a {name: entries} map.

    The "*" key is the fallback script for names not listed. Values are
    either an entries list or {"entries": [...], "repeat_last": bool}.
    Picklable, so corpus workers in other processes can use it.
    """

    def __init__(self, by_name: dict):
        self.by_name = dict(by_name)

    def __call__(self, name: str) -> MockModelClient:
        spec = self.by_name.get(name, self.by_name.get("*", []))
        if isinstance(spec, dict):
            return MockModelClient(
                spec.get("entries", []), repeat_last=bool(spec.get("repeat_last"))
            )
        return MockModelClient(list(spec))

    @classmethod
    def from_file(cls, path) -> "TranscriptFactory":
        doc = json.loads(Path(path).read_text())
        if isinstance(doc, list):
            doc = {"*": doc}
        return cls(doc)


# --- the completion call ----------------------------------------------------


class JsonlLogger:
    """Appends one JSON object per line; parents created on demand."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def write(self, record: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, default=str) + "\n")


def _payload(bundle: PromptBundle, cfg: AgentConfig, max_tokens: int) -> dict:
    return {
        "model": cfg.model_name,
        "messages": bundle.messages(),
        "temperature": cfg.temperature,
        "max_tokens": max_tokens,
    }


def complete(
    client,
    bundle: PromptBundle,
    cfg: AgentConfig,
    sleep=time.sleep,
    attempt_log: JsonlLogger | None = None,
    limiter: _TokenBucket | None = None,
) -> tuple[str, dict]:
    """One logical model call: retries, backoff, and token-cap escalation.

    Transport failures and rate limits are retried with exponential backoff
    (base, 2x base, 4x base, ...); after max_retries retries the call gives
    up with EndpointUnavailable. A reply truncated by the output-token cap
    is re-requested once at the escalated cap. Auth failures are terminal
    immediately. Returns (reply_text, usage).
    """
    max_tokens = cfg.max_output_tokens
    escalated = False
    retries = 0
    while True:
        payload = _payload(bundle, cfg, max_tokens)
        if limiter is not None:
            limiter.acquire(sleep)
        started = time.monotonic()
        try:
            raw = client.send(payload)
        except AuthError:
            raise
        except TransportError as exc:
            if attempt_log:
                attempt_log.write({"request": payload, "error": str(exc)})
            if retries >= cfg.max_retries:
                raise EndpointUnavailable(
                    f"model endpoint failed after {retries} retries: {exc}"
                ) from exc
            sleep(cfg.backoff_base_ms * (2 ** retries) / 1000.0)
            retries += 1
            continue
        latency_ms = int((time.monotonic() - started) * 1000)
        if attempt_log:
            attempt_log.write(
                {"request": payload, "response": raw, "latency_ms": latency_ms}
            )
        try:
            choice = raw["choices"][0]
            content = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointUnavailable(f"malformed endpoint reply: {exc}") from exc
        if choice.get("finish_reason") == "length" and not escalated:
            max_tokens = ESCALATED_MAX_TOKENS
            escalated = True
            continue
        usage = raw.get("usage") or {}
        return content, usage


def repair(
    level: Level,
    source: SourceUnit,
    diag: Diagnostics,
    client,
    cfg: AgentConfig,
    *,
    iteration: int = 0,
    sleep=time.sleep,
    attempt_log: JsonlLogger | None = None,
    limiter: _TokenBucket | None = None,
) -> SourceUnit:
    """Ask the level's agent for a fixed translation unit.

    Stateless by construction: everything the model sees is in the bundle
    built here. Raises EndpointUnavailable, AuthError, or EmptyRepair.
    """
    bundle = build_prompt(level, source, diag)
    started = time.monotonic()
    reply, usage = complete(
        client, bundle, cfg, sleep=sleep, attempt_log=attempt_log, limiter=limiter
    )
    code = extract_code(reply)
    attempt = RepairAttempt(
        level=level,
        bundle=bundle,
        reply=reply,
        extracted=code,
        latency_ms=int((time.monotonic() - started) * 1000),
        tokens_in=int(usage.get("prompt_tokens") or 0),
        tokens_out=int(usage.get("completion_tokens") or 0),
    )
    if attempt_log:
        attempt_log.write(
            {
                "kind": "repair_attempt",
                "level": str(level),
                "iteration": iteration,
                "latency_ms": attempt.latency_ms,
                "tokens_in": attempt.tokens_in,
                "tokens_out": attempt.tokens_out,
                "extracted_chars": len(code),
            }
        )
    return SourceUnit(text=code, origin=RepairOrigin(level=level, iteration=iteration))
