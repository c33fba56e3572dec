"""Text-generation backends with per-token log-probabilities.

Two backends share the :class:`LLM` protocol: :class:`CompletionsClient`
talks to an OpenAI-style ``/completions`` endpoint, :class:`ScriptedLLM`
replays a JSON script for hermetic tests.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import httpx

Token = tuple[str, float]

# servers occasionally report tiny positive logprobs from float rounding
_LOGPROB_SLACK = 1e-6


class LLMError(Exception):
    """Base class for backend failures."""


class BackendUnavailable(LLMError):
    """Connection refused, DNS failure, timeout or 5xx."""


class ProtocolError(LLMError):
    """The backend answered but the response violates the contract."""


class ScriptMiss(LLMError):
    """A scripted backend received a prompt no entry matches."""


class EmptyAnswer(ValueError):
    """Confidence was requested for an empty token sequence."""


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = 4096
    stop_sequences: tuple[str, ...] = ()
    deterministic: bool = True

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise ValueError("prompt must be nonempty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    tokens: tuple[Token, ...]
    latency: float = 0.0
    truncated: bool = False

    def __post_init__(self):
        if "".join(t for t, _ in self.tokens) != self.text:
            raise ProtocolError("token texts do not concatenate to the generated text")
        for tok, lp in self.tokens:
            if not lp <= 0.0:
                raise ProtocolError(f"positive or NaN logprob {lp!r} for token {tok!r}")


class LLM(Protocol):
    def generate(self, req: GenerationRequest) -> GenerationResult: ...


def confidence(answer_tokens: Sequence[Token]) -> float:
    """Geometric mean of token probabilities, ``exp(mean(logprob))``."""
    if not answer_tokens:
        raise EmptyAnswer("cannot score an empty answer")
    logprobs = [lp for _, lp in answer_tokens]
    if any(not lp <= 0.0 for lp in logprobs):
        raise ValueError("logprobs must be <= 0")
    # centering on the max keeps constant vectors exact; fsum is exactly
    # rounded, so the result does not depend on token order
    top = max(logprobs)
    return math.exp(top + math.fsum(lp - top for lp in logprobs) / len(logprobs))


def extract_answer_span(result: GenerationResult, marker: str = "Answer:") -> list[Token]:
    """Tokens after the last occurrence of ``marker``; all tokens if it is absent.

    A token straddling the end of the marker is kept, since it carries
    answer characters.
    """
    tokens = list(result.tokens)
    pos = result.text.rfind(marker) if marker else -1
    if pos < 0:
        return tokens
    cut = pos + len(marker)
    out: list[Token] = []
    offset = 0
    for tok, lp in tokens:
        end = offset + len(tok)
        if end > cut:
            out.append((tok, lp))
        offset = end
    return out


def span_text(tokens: Iterable[Token]) -> str:
    return "".join(t for t, _ in tokens).strip()


def fingerprint(prompt: str) -> str:
    """Whitespace-insensitive prompt hash used to key scripted responses."""
    collapsed = " ".join(prompt.split())
    return hashlib.sha256(collapsed.encode("utf-8")).hexdigest()


_PIECE = re.compile(r"\s*\S+|\s+")


def split_pieces(text: str) -> list[str]:
    """Split text into whitespace-led pieces whose concatenation is ``text``."""
    return _PIECE.findall(text)


@dataclass
class ScriptEntry:
    text: str
    tokens: tuple[Token, ...]
    contains: tuple[str, ...] = ()
    fingerprint: str | None = None

    def matches(self, prompt: str, fp: str) -> bool:
        if self.fingerprint is not None:
            return self.fingerprint == fp
        return all(s in prompt for s in self.contains)

    @classmethod
    def from_dict(cls, data: dict[str, Any], index: int = 0) -> ScriptEntry:
        where = f"script entry {index}"
        if "text" not in data or not isinstance(data["text"], str):
            raise ValueError(f"{where}: missing text")
        match = data.get("match", {})
        contains = tuple(match.get("contains", ()))
        fp = match.get("fingerprint")
        if not contains and fp is None:
            raise ValueError(f"{where}: match needs 'contains' or 'fingerprint'")
        text = data["text"]
        if "logprobs" not in data:
            raise ValueError(f"{where}: missing logprobs")
        logprobs = [float(x) for x in data["logprobs"]]
        pieces = list(data["tokens"]) if "tokens" in data else split_pieces(text)
        if len(logprobs) == 1 and len(pieces) > 1:
            logprobs = logprobs * len(pieces)
        if len(logprobs) != len(pieces):
            raise ValueError(
                f"{where}: {len(logprobs)} logprobs for {len(pieces)} tokens"
            )
        tokens = tuple(zip(pieces, logprobs))
        GenerationResult(text=text, tokens=tokens)  # validates alignment
        return cls(text=text, tokens=tokens, contains=contains, fingerprint=fp)


class ScriptedLLM:
    """Deterministic backend that answers from an ordered list of entries.

    Fingerprint-keyed entries are exact and checked first; ``contains``
    entries are an ordered fallback where the first match wins. Every call
    is appended to :attr:`calls` so tests can count generations.
    """

    def __init__(self, entries: Sequence[dict[str, Any] | ScriptEntry]):
        self.entries = [
            e if isinstance(e, ScriptEntry) else ScriptEntry.from_dict(e, i)
            for i, e in enumerate(entries)
        ]
        self.calls: list[str] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedLLM:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise ValueError(f"{path}: mock script must be a JSON list")
        return cls(data)

    def lookup(self, prompt: str) -> ScriptEntry:
        fp = fingerprint(prompt)
        keyed = [e for e in self.entries if e.fingerprint is not None]
        for entry in keyed + [e for e in self.entries if e.fingerprint is None]:
            if entry.matches(prompt, fp):
                return entry
        raise ScriptMiss(f"no script entry matches prompt:\n{prompt}")

    def generate(self, req: GenerationRequest) -> GenerationResult:
        with self._lock:
            self.calls.append(req.prompt)
        entry = self.lookup(req.prompt)
        return GenerationResult(text=entry.text, tokens=entry.tokens)

    def reset(self) -> None:
        with self._lock:
            self.calls.clear()


@dataclass
class CompletionsClient:
    """Client for an OpenAI-compatible ``/completions`` endpoint.

    ``base_url`` is the API root (e.g. ``http://localhost:8000/v1``).
    ``max_concurrency`` bounds simultaneous in-flight requests across threads.
    """

    base_url: str
    model: str
    api_key: str | None = None
    timeout: float = 120.0
    max_concurrency: int = 8
    _client: httpx.Client = field(init=False, repr=False)
    _slots: threading.BoundedSemaphore = field(init=False, repr=False)

    def __post_init__(self):
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self._client = httpx.Client(timeout=self.timeout, headers=headers)
        self._slots = threading.BoundedSemaphore(self.max_concurrency)

    @classmethod
    def from_env(cls, base_url: str | None = None, model: str | None = None) -> CompletionsClient:
        url = base_url or os.environ.get("QTREE_BACKEND_URL")
        if not url:
            raise BackendUnavailable("no backend URL given (set QTREE_BACKEND_URL)")
        return cls(
            base_url=url,
            model=model or os.environ.get("QTREE_MODEL", "default"),
            api_key=os.environ.get("QTREE_API_KEY"),
        )

    def close(self) -> None:
        self._client.close()

    def generate(self, req: GenerationRequest) -> GenerationResult:
        body = {
            "model": self.model,
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": 0,
            "logprobs": True,
            "stop": list(req.stop_sequences),
        }
        url = self.base_url.rstrip("/") + "/completions"
        start = time.perf_counter()
        with self._slots:
            try:
                resp = self._client.post(url, json=body)
            except httpx.TransportError as exc:
                raise BackendUnavailable(f"{url}: {exc}") from exc
        latency = time.perf_counter() - start
        if resp.status_code >= 500:
            raise BackendUnavailable(f"{url}: HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"{url}: response is not JSON") from exc
        return parse_completion(payload, latency)


def parse_completion(payload: dict[str, Any], latency: float = 0.0) -> GenerationResult:
    """Read text and token logprobs from a completions response body."""
    try:
        choice = payload["choices"][0]
        text = choice["text"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError("response has no choices[0].text") from exc
    lp = choice.get("logprobs")
    if not isinstance(lp, dict) or lp.get("tokens") is None or lp.get("token_logprobs") is None:
        raise ProtocolError("response lacks token logprobs")
    pieces, values = lp["tokens"], lp["token_logprobs"]
    if len(pieces) != len(values):
        raise ProtocolError("tokens and token_logprobs differ in length")
    tokens: list[Token] = []
    for tok, v in zip(pieces, values):
        if v is None:
            raise ProtocolError(f"null logprob for token {tok!r}")
        v = float(v)
        if 0.0 < v <= _LOGPROB_SLACK:
            v = 0.0
        tokens.append((tok, v))
    return GenerationResult(
        text=text,
        tokens=tuple(tokens),
        latency=latency,
        truncated=choice.get("finish_reason") == "length",
    )
