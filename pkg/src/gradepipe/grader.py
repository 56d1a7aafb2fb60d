"""Multi-pass grading against a provider-agnostic multimodal chat interface.

Every pass is an independent request: no conversation history, no other
student's content, exactly one image. Completions must end with the strict
`Total: X/10` / `Flag: 0|1` footer; the last matching line wins because models
occasionally restate the score mid-text. Results are cached per
(prompt, crop, model, pass) so interrupted jobs resume without re-grading.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
import re
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path

import httpx

from .errors import (
    MissingFlagLine,
    MissingTotalLine,
    ParseFailed,
    ProviderUnavailable,
    ScoreOutOfRange,
)
from .keybank import PromptBundle
from .imaging import png_bytes

DEFAULT_RETRIES = 3

_TOTAL_RE = re.compile(r"^\s*Total:\s*(\d+)\s*/\s*10\s*$", re.MULTILINE)
_FLAG_RE = re.compile(r"^\s*Flag:\s*([01])(?:\s*\(.*\))?\s*$", re.MULTILINE)


def parse_grader_output(text: str) -> tuple[int, bool]:
    """Extract (score, alt_flag) from a completion.

    The score comes from the last `Total: <integer>/10` line, the flag from
    the last `Flag: 0|1` line. Fractional totals match no line and therefore
    read as a missing total.
    """
    totals = _TOTAL_RE.findall(text)
    if not totals:
        raise MissingTotalLine("no 'Total: <integer>/10' line found")
    score = int(totals[-1])
    if not 0 <= score <= 10:
        raise ScoreOutOfRange(f"total {score} outside 0..10")
    flags = _FLAG_RE.findall(text)
    if not flags:
        raise MissingFlagLine("no 'Flag: 0|1' line found")
    return score, flags[-1] == "1"


@dataclass(frozen=True)
class PassResult:
    pass_index: int
    raw_text: str
    score: int
    alt_flag: bool
    model_id: str
    latency_ms: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PassResult":
        return cls(**doc)


class GradingProvider(ABC):
    """One grading call: prompt text plus a single image, no shared state."""

    @abstractmethod
    def submit(
        self,
        prompt_text: str,
        image_png: bytes,
        model_id: str,
        temperature: float | None,
    ) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class ProviderRequest:
    """What actually left the process; kept for audit and anonymity checks."""

    model_id: str
    temperature: float | None
    prompt_text: str
    image_b64: str

    def to_dict(self) -> dict:
        return asdict(self)


class RequestLog:
    """Append-only JSONL capture of outbound requests and their responses."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def record(self, request: ProviderRequest, response_text: str) -> None:
        entry = {"request": request.to_dict(), "response": response_text}
        with self._lock:
            self.entries.append(entry)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def dump_text(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.entries)


class MockGradingProvider(GradingProvider):
    """Deterministic stand-in for the remote model.

    Scores derive from a digest of (seed, prompt, image), so a given
    submission always grades the same way for a given seed. Repeat calls with
    identical input walk a per-input counter, which yields the small
    pass-to-pass variation (and occasional outlier) the consistency checks
    exist to catch.
    """

    def __init__(self, seed: int = 0, log: RequestLog | None = None):
        self.seed = seed
        self.log = log or RequestLog()
        self._call_counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def _digest(self, *parts: bytes) -> bytes:
        h = hashlib.sha256()
        h.update(str(self.seed).encode())
        for part in parts:
            h.update(b"\x1f")
            h.update(part)
        return h.digest()

    def submit(
        self,
        prompt_text: str,
        image_png: bytes,
        model_id: str,
        temperature: float | None,
    ) -> str:
        key = self._digest(prompt_text.encode(), image_png).hex()
        with self._lock:
            call_index = self._call_counts.get(key, 0)
            self._call_counts[key] = call_index + 1

        base_bytes = self._digest(b"base", key.encode())
        base = base_bytes[0] % 11
        jitter_bytes = self._digest(b"pass", key.encode(), str(call_index).encode())
        jitter = (0, 0, 0, 1, -1)[jitter_bytes[0] % 5]
        if jitter_bytes[1] < 10:  # rare outlier pass
            jitter = 4 if jitter_bytes[1] % 2 == 0 else -4
        score = max(0, min(10, base + jitter))
        alt_flag = jitter_bytes[2] < 8

        text = (
            "The work was checked step by step against the grading key.\n"
            f"Credited steps account for {score} of 10 points.\n"
            f"Total: {score}/10\n"
            f"Flag: {1 if alt_flag else 0}\n"
            "Motivation: points were awarded only for steps explicitly shown."
        )
        self.log.record(
            ProviderRequest(
                model_id=model_id,
                temperature=temperature,
                prompt_text=prompt_text,
                image_b64=base64.b64encode(image_png).decode(),
            ),
            text,
        )
        return text


class ScriptedProvider(GradingProvider):
    """Replays a fixed list of completions (or exceptions) for tests."""

    def __init__(self, responses: list):
        self.responses = list(responses)
        self.calls = 0

    def submit(self, prompt_text, image_png, model_id, temperature) -> str:
        self.calls += 1
        if not self.responses:
            raise ProviderUnavailable("script exhausted")
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


class HttpChatProvider(GradingProvider):
    """Chat-completions-compatible HTTP endpoint with the image inlined as base64."""

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        log: RequestLog | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint
        self.api_key = api_key
        self.log = log or RequestLog()
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def submit(
        self,
        prompt_text: str,
        image_png: bytes,
        model_id: str,
        temperature: float | None,
    ) -> str:
        image_b64 = base64.b64encode(image_png).decode()
        payload: dict = {
            "model": model_id,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt_text},
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:image/png;base64,{image_b64}"},
                        },
                    ],
                }
            ],
        }
        if temperature is not None:
            payload["temperature"] = temperature
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self._client.post(self.endpoint, json=payload, headers=headers)
            response.raise_for_status()
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise ProviderUnavailable(f"provider call failed: {exc}") from exc
        # API key is never logged; requests are reconstructed without headers.
        self.log.record(
            ProviderRequest(
                model_id=model_id,
                temperature=temperature,
                prompt_text=prompt_text,
                image_b64=image_b64,
            ),
            text,
        )
        return text


def grade_once(
    provider: GradingProvider,
    bundle: PromptBundle,
    pass_index: int,
    model_id: str,
    temperature: float | None = None,
    retries: int = DEFAULT_RETRIES,
    retry_wait: float = 0.5,
) -> PassResult:
    """One independent evaluation with bounded retries.

    Every attempt is a fresh call with the identical input; nothing from a
    failed attempt is fed back to the model.
    """
    prompt_text = bundle.full_text()
    image_png = png_bytes(bundle.crop.image)
    last_error: Exception | None = None
    for attempt in range(retries):
        if attempt and retry_wait:
            time.sleep(retry_wait * 2 ** (attempt - 1))
        started = time.perf_counter()
        try:
            text = provider.submit(prompt_text, image_png, model_id, temperature)
        except ProviderUnavailable as exc:
            last_error = exc
            continue
        latency_ms = int(round((time.perf_counter() - started) * 1000))
        try:
            score, alt_flag = parse_grader_output(text)
        except (MissingTotalLine, ScoreOutOfRange, MissingFlagLine) as exc:
            last_error = exc
            continue
        return PassResult(
            pass_index=pass_index,
            raw_text=text,
            score=score,
            alt_flag=alt_flag,
            model_id=model_id,
            latency_ms=latency_ms,
        )
    if isinstance(last_error, ProviderUnavailable):
        raise ProviderUnavailable(f"{retries} attempts failed: {last_error}")
    raise ParseFailed(f"{retries} attempts returned malformed output: {last_error}")


def grade_response(
    provider: GradingProvider,
    bundle: PromptBundle,
    n: int,
    model_id: str,
    temperature: float | None = None,
    retries: int = DEFAULT_RETRIES,
    retry_wait: float = 0.5,
) -> list[PassResult]:
    """n independent evaluations of one submission, ordered by pass index."""
    if n < 1:
        raise ValueError("pass count must be at least 1")
    return [
        grade_once(
            provider,
            bundle,
            pass_index,
            model_id,
            temperature=temperature,
            retries=retries,
            retry_wait=retry_wait,
        )
        for pass_index in range(n)
    ]


# -- pass cache -------------------------------------------------------------------


@dataclass(frozen=True)
class PassKey:
    prompt_hash: str
    crop_hash: str
    model_id: str
    pass_index: int

    def to_dict(self) -> dict:
        return asdict(self)


class PassStore:
    """JSONL-backed cache of pass results; corrupt lines degrade to misses."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[PassKey, PassResult] = {}
        self.warnings: list[str] = []
        if self.path.exists():
            for lineno, line in enumerate(
                self.path.read_text("utf-8").splitlines(), start=1
            ):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    key = PassKey(**doc["key"])
                    self._entries[key] = PassResult.from_dict(doc["result"])
                except (json.JSONDecodeError, KeyError, TypeError):
                    self.warnings.append(f"{self.path}:{lineno}: unreadable cache line")

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: PassKey) -> PassResult | None:
        return self._entries.get(key)

    def put(self, key: PassKey, result: PassResult) -> None:
        with self._lock:
            self._entries[key] = result
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {"key": key.to_dict(), "result": result.to_dict()},
                        sort_keys=True,
                    )
                    + "\n"
                )

    def compact(self) -> None:
        """Rewrite the file deduplicated and in a stable order."""
        with self._lock:
            keys = self._sorted_keys()
            lines = [
                json.dumps(
                    {"key": k.to_dict(), "result": self._entries[k].to_dict()},
                    sort_keys=True,
                )
                for k in keys
            ]
            self.path.write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")

    def _sorted_keys(self) -> list[PassKey]:
        return sorted(
            self._entries,
            key=lambda k: (k.prompt_hash, k.crop_hash, k.model_id, k.pass_index),
        )

    def content_digest(self) -> str:
        """Digest of the grading content, ignoring call latencies."""
        digest = hashlib.sha256()
        for key in self._sorted_keys():
            doc = self._entries[key].to_dict()
            doc.pop("latency_ms", None)
            digest.update(json.dumps({"key": key.to_dict(), "result": doc}, sort_keys=True).encode())
            digest.update(b"\n")
        return digest.hexdigest()


def cached_grade(
    store: PassStore,
    provider: GradingProvider,
    bundle: PromptBundle,
    pass_index: int,
    model_id: str,
    temperature: float | None = None,
    retries: int = DEFAULT_RETRIES,
    retry_wait: float = 0.5,
) -> PassResult:
    """Serve a pass from the cache, or grade it and remember the result."""
    key = PassKey(
        prompt_hash=bundle.prompt_hash,
        crop_hash=bundle.crop.content_hash,
        model_id=model_id,
        pass_index=pass_index,
    )
    hit = store.get(key)
    if hit is not None:
        return hit
    result = grade_once(
        provider,
        bundle,
        pass_index,
        model_id,
        temperature=temperature,
        retries=retries,
        retry_wait=retry_wait,
    )
    store.put(key, result)
    return result
