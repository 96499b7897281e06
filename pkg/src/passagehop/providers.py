"""Adapters for embedding, keyword extraction and chat, plus offline doubles.

The offline doubles are deterministic so that every pipeline run is
reproducible given a corpus and a config:

* :class:`HashEmbedder` hashes each token into a bucket and L2-normalizes;
* :class:`RuleKeywordExtractor` is a tokenizer + stopword filter;
* :class:`ScriptedChat` answers from a table keyed by prompt fingerprint.

The live clients speak the OpenAI-compatible ``/chat/completions`` and
``/embeddings`` JSON shapes over ``httpx``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

import httpx
import numpy as np

from passagehop.core import DimensionError, Embedding, make_keywords

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})

STOPWORDS = frozenset(
    """
    a about above after again against all also am an and any are aren't as at be because been
    before being below between both but by can cannot could couldn't did didn't do does doesn't
    doing don't down during each else ever few for from further had hadn't has hasn't have haven't
    having he her here hers herself him himself his how however i if in into is isn't it its itself
    just let me might more most much must my myself no nor not of off on once only or other ought
    our ours ourselves out over own same shall she should so some such than that the their theirs
    them themselves then there these they this those through to too under until up upon us very
    was wasn't we were weren't what when where whether which while who whom whose why will with
    would yet you your yours yourself yourselves
    """.split()
)

_TOKEN_RE = re.compile(r"[A-Za-z0-9]+(?:['’][A-Za-z]+)?")


class ProviderError(RuntimeError):
    """A provider call failed after exhausting its retries."""

    def __init__(self, message: str, status: int | None = None) -> None:
        super().__init__(message)
        self.status = status


class Embedder(Protocol):
    name: str
    dim: int

    def embed(self, text: str) -> Embedding: ...


class KeywordExtractor(Protocol):
    name: str

    def extract(self, text: str) -> frozenset[str]: ...


class ChatModel(Protocol):
    name: str

    def chat(self, prompt: str) -> str: ...


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def fingerprint(prompt: str) -> str:
    return "sha256:" + hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# --- configuration -----------------------------------------------------------


@dataclass
class ProviderConfig:
    endpoint: str
    model_name: str
    api_key: str = field(default="", repr=False)
    timeout: float = 30.0
    max_retries: int = 3
    temperature: float = 0.1
    max_tokens: int = 2048
    backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")

    def with_env(self, prefix: str, environ: Mapping[str, str] | None = None) -> ProviderConfig:
        """Override endpoint/key from ``{prefix}_ENDPOINT`` / ``{prefix}_API_KEY``.

        ``OPENAI_API_KEY`` and ``OPENAI_BASE_URL`` are used as fallbacks.
        """
        env = os.environ if environ is None else environ
        endpoint = env.get(f"{prefix}_ENDPOINT") or env.get("OPENAI_BASE_URL") or self.endpoint
        api_key = env.get(f"{prefix}_API_KEY") or env.get("OPENAI_API_KEY") or self.api_key
        return ProviderConfig(**{**asdict(self), "endpoint": endpoint, "api_key": api_key})


@dataclass
class ChatExchange:
    prompt: str
    response: str
    input_tokens: int
    output_tokens: int
    latency: float
    model: str = ""


class TraceWriter:
    """Append-only JSONL mirror of chat exchanges."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def write(self, exchange: ChatExchange) -> None:
        line = json.dumps(asdict(exchange), ensure_ascii=False)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")


class _CallLog:
    def __init__(self, trace: TraceWriter | None = None) -> None:
        self.calls = 0
        self.exchanges: list[ChatExchange] = []
        self._trace = trace
        self._lock = threading.Lock()

    def _count(self) -> None:
        with self._lock:
            self.calls += 1

    def _record(self, exchange: ChatExchange) -> None:
        with self._lock:
            self.exchanges.append(exchange)
        if self._trace is not None:
            self._trace.write(exchange)


# --- offline doubles ----------------------------------------------------------


class HashEmbedder:
    """Bag-of-tokens embedder: each token lands in ``blake2b(token) % dim``.

    Token counts are L2-normalized. Stopwords are skipped so that two texts
    have positive cosine only when they share a content token (or collide).
    """

    def __init__(self, dim: int = 16, drop_stopwords: bool = True) -> None:
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.drop_stopwords = drop_stopwords
        self.name = f"hash-{dim}"

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.casefold().encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> Embedding:
        if not text:
            raise ValueError("cannot embed empty text")
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in tokenize(text):
            low = tok.casefold()
            if self.drop_stopwords and low in STOPWORDS:
                continue
            vec[self.bucket(low)] += 1.0
        norm = float(np.sqrt(np.sum(vec * vec)))
        if norm > 0:
            vec /= norm
        return Embedding(vec)


class RuleKeywordExtractor:
    """Default offline keyword extractor.

    Tokens are case-folded and deduplicated. A token is kept when it is
    numeric, or when it is not a stopword and is either at least
    ``min_length`` characters long or starts with a capital letter
    (so short names like "Li" or "Ng" survive).
    """

    name = "rule"

    def __init__(self, min_length: int = 3, stopwords: frozenset[str] = STOPWORDS) -> None:
        self.min_length = min_length
        self.stopwords = stopwords

    def extract(self, text: str) -> frozenset[str]:
        kept = []
        for tok in tokenize(text):
            low = tok.casefold()
            if tok.isdigit():
                kept.append(low)
            elif low in self.stopwords:
                continue
            elif len(tok) >= self.min_length or tok[0].isupper():
                kept.append(low)
        return make_keywords(kept)


class CachedEmbedder:
    """Thread-safe cache in front of another embedder, keyed by (model, text).

    Also pins the output dimension: a vector of any other size raises
    :class:`DimensionError` at the call site.
    """

    def __init__(self, inner: Embedder) -> None:
        self.inner = inner
        self.name = inner.name
        self.dim = inner.dim
        self._cache: dict[tuple[str, str], Embedding] = {}
        self._lock = threading.Lock()
        self.misses = 0

    def embed(self, text: str) -> Embedding:
        key = (self.name, text)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        emb = self.inner.embed(text)
        if emb.dim != self.dim:
            raise DimensionError(f"{self.name} returned dim {emb.dim}, expected {self.dim}")
        with self._lock:
            self.misses += 1
            return self._cache.setdefault(key, emb)


class ScriptedChat(_CallLog):
    """Chat double answering from a table keyed by :func:`fingerprint`.

    Unscripted prompts go to ``handler`` if given, else ``default``; if both
    are ``None`` the call raises :class:`ProviderError`.
    """

    def __init__(
        self,
        responses: Mapping[str, str] | None = None,
        *,
        default: str | None = None,
        handler: Callable[[str], str | None] | None = None,
        name: str = "scripted",
        trace: TraceWriter | None = None,
    ) -> None:
        super().__init__(trace)
        self.responses: dict[str, str] = {}
        for key, value in (responses or {}).items():
            self.responses[key if key.startswith("sha256:") else fingerprint(key)] = value
        self.default = default
        self.handler = handler
        self.name = name

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> ScriptedChat:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data.get("responses", {}), default=data.get("default"), **kwargs)

    def add(self, prompt: str, response: str) -> None:
        self.responses[fingerprint(prompt)] = response

    def chat(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        self._count()
        start = time.perf_counter()
        response = self.responses.get(fingerprint(prompt))
        if response is None and self.handler is not None:
            response = self.handler(prompt)
        if response is None:
            response = self.default
        if response is None:
            raise ProviderError(f"no scripted response for {fingerprint(prompt)[:23]}")
        self._record(
            ChatExchange(
                prompt=prompt,
                response=response,
                input_tokens=len(prompt.split()),
                output_tokens=len(response.split()),
                latency=time.perf_counter() - start,
                model=self.name,
            )
        )
        return response


# --- live clients ------------------------------------------------------------


class _HttpClient:
    def __init__(
        self,
        config: ProviderConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        self._client = httpx.Client(
            base_url=config.endpoint.rstrip("/"),
            headers=headers,
            timeout=config.timeout,
            transport=transport,
        )

    def _post(self, path: str, payload: dict) -> dict:
        last_status: int | None = None
        last_error = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                last_status, last_error = None, f"{type(exc).__name__}: {exc}"
                log.warning("POST %s failed (attempt %d): %s", path, attempt + 1, last_error)
                continue
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise ProviderError(f"malformed JSON from {path}: {exc}", 200) from exc
            last_status, last_error = resp.status_code, resp.text[:200]
            if resp.status_code not in RETRYABLE_STATUS:
                break
            log.warning("POST %s -> %d (attempt %d)", path, resp.status_code, attempt + 1)
        raise ProviderError(
            f"{path} failed after {self.config.max_retries} retries "
            f"(last status {last_status}): {last_error}",
            last_status,
        )

    def close(self) -> None:
        self._client.close()


class OpenAIChat(_HttpClient, _CallLog):
    """Chat client for any OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        config: ProviderConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        trace: TraceWriter | None = None,
    ) -> None:
        _HttpClient.__init__(self, config, transport, sleep)
        _CallLog.__init__(self, trace)
        self.name = config.model_name

    def chat(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        self._count()
        start = time.perf_counter()
        data = self._post(
            "/chat/completions",
            {
                "model": self.config.model_name,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.config.temperature,
                "max_tokens": self.config.max_tokens,
            },
        )
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected chat response shape: {exc}") from exc
        if not isinstance(text, str):
            raise ProviderError("chat response content is not a string")
        usage = data.get("usage") or {}
        self._record(
            ChatExchange(
                prompt=prompt,
                response=text,
                input_tokens=int(usage.get("prompt_tokens", 0)),
                output_tokens=int(usage.get("completion_tokens", 0)),
                latency=time.perf_counter() - start,
                model=self.config.model_name,
            )
        )
        return text


class OpenAIEmbedder(_HttpClient):
    """Embedding client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(
        self,
        config: ProviderConfig,
        dim: int,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        super().__init__(config, transport, sleep)
        self.dim = dim
        self.name = config.model_name

    def embed(self, text: str) -> Embedding:
        if not text:
            raise ValueError("cannot embed empty text")
        data = self._post("/embeddings", {"model": self.config.model_name, "input": text})
        try:
            values = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected embedding response shape: {exc}") from exc
        emb = Embedding(values)
        if emb.dim != self.dim:
            raise DimensionError(f"{self.name} returned dim {emb.dim}, expected {self.dim}")
        return emb
