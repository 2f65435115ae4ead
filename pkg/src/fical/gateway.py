"""Text generation and embedding backends.

Two families live here: remote backends speaking the common
``/chat/completions`` and ``/embeddings`` HTTP shapes, and mock backends that
are pure functions of their inputs so whole pipelines run offline.

A mock generator is driven by a *rule*: any callable ``ChatRequest -> str``.
Rules can be registered under a name (see :func:`register_rule`) so that
configuration files can select them.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import httpx
import numpy as np

from .errors import (
    BackendRejected,
    BackendUnreachable,
    ConfigError,
    EmptyText,
    Timeout,
)

log = logging.getLogger(__name__)

DEFAULT_PARALLELISM = 4
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 1.0

# per-role sampling defaults
JUDGE_TEMPERATURE = 0.0
AGENT_TEMPERATURE = 0.0
KCG_TEMPERATURE = 0.3


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.system_prompt, self.user_prompt, repr(self.temperature),
                     str(self.max_tokens), repr(self.seed)):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash(self.values.tobytes())


class Generator(Protocol):
    fingerprint: str

    def generate(self, req: ChatRequest) -> str: ...


class Embedder(Protocol):
    fingerprint: str
    dim: int

    def embed(self, text: str) -> EmbeddingVector: ...


def generate(backend: Generator, req: ChatRequest) -> str:
    return backend.generate(req)


def embed(embedder: Embedder, text: str) -> EmbeddingVector:
    return embedder.embed(text)


# -- mock backends ---------------------------------------------------------------

Rule = Callable[[ChatRequest], str]
_RULES: dict[str, Rule] = {}


def register_rule(name: str) -> Callable[[Rule], Rule]:
    def deco(fn: Rule) -> Rule:
        _RULES[name] = fn
        return fn

    return deco


def get_rule(name: str) -> Rule:
    # named rules for the pipeline roles live in fical.rules
    from . import rules  # noqa: F401

    try:
        return _RULES[name]
    except KeyError:
        raise ConfigError(f"unknown mock rule {name!r}; known: {sorted(_RULES)}") from None


def rule_names() -> list[str]:
    from . import rules  # noqa: F401

    return sorted(_RULES)


@register_rule("echo-instruction")
def _echo_instruction(req: ChatRequest) -> str:
    first = next((ln.strip() for ln in req.user_prompt.splitlines() if ln.strip()), "")
    return f"[mock {req.digest()[:12]}] {first}"


class MockGenerator:
    """Deterministic generator; output depends only on the request."""

    def __init__(self, rule: Rule | str = "echo-instruction", name: str | None = None) -> None:
        if isinstance(rule, str):
            name = name or rule
            rule = get_rule(rule)
        self.rule = rule
        self.name = name or getattr(rule, "__name__", "rule")
        self.fingerprint = f"mock:{self.name}"
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, req: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
        return self.rule(req)


_TOKEN_RE = re.compile(r"[^\W_]+")
_EMBED_KEY = b"fical-mock-embedder-v1"


def _trigrams(token: str) -> list[str]:
    padded = f"^{token}$"
    return [padded[i : i + 3] for i in range(len(padded) - 2)]


def _hash64(s: str) -> int:
    digest = hashlib.blake2b(s.encode("utf-8"), digest_size=8, key=_EMBED_KEY).digest()
    return int.from_bytes(digest, "little")


def mock_embedding(text: str, dim: int) -> np.ndarray:
    """Signed feature hashing of per-token character trigrams, L2-normalized."""
    acc = np.zeros(dim, dtype=np.float64)
    for token in _TOKEN_RE.findall(text.lower()):
        for gram in _trigrams(token):
            h = _hash64(gram)
            acc[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        acc[0] = 1.0
        return acc
    return acc / norm


class MockEmbedder:
    def __init__(self, dim: int = 64) -> None:
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.fingerprint = f"mock-trigram-blake2b-v1:dim={dim}"

    def embed(self, text: str) -> EmbeddingVector:
        if not " ".join(text.split()):
            raise EmptyText("cannot embed empty text")
        return EmbeddingVector(mock_embedding(text, self.dim))


# -- remote backends -------------------------------------------------------------


@dataclass
class TransferStats:
    requests: int = 0
    request_bytes: int = 0
    response_bytes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, sent: int, received: int) -> None:
        with self._lock:
            self.requests += 1
            self.request_bytes += sent
            self.response_bytes += received


class _HttpBackend:
    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        retries: int = DEFAULT_RETRIES,
        backoff: float = DEFAULT_BACKOFF,
        parallelism: int = DEFAULT_PARALLELISM,
        client: httpx.Client | None = None,
    ) -> None:
        if retries < 1:
            raise ValueError("retries counts attempts and must be >= 1")
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.stats = TransferStats()
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(parallelism)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.endpoint}{path}"
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            start = time.monotonic()
            try:
                with self._slots:
                    resp = self._client.post(url, json=payload, headers=self._headers())
            except httpx.TimeoutException:
                last = Timeout(time.monotonic() - start)
                continue
            except httpx.TransportError as exc:
                last = BackendUnreachable(f"{url}: {exc}")
                continue
            self.stats.add(len(resp.request.content or b""), len(resp.content))
            if resp.status_code >= 500 or resp.status_code == 429:
                last = BackendRejected(resp.status_code, resp.text[:200])
                continue
            if resp.status_code >= 400:
                raise BackendRejected(resp.status_code, resp.text[:200])
            try:
                return resp.json()
            except ValueError:
                raise BackendRejected(resp.status_code, "response is not JSON") from None
        assert last is not None
        log.warning("giving up on %s after %d attempts", url, self.retries)
        raise last

    def close(self) -> None:
        self._client.close()


class RemoteGenerator(_HttpBackend):
    def __init__(self, endpoint: str, model: str, **kwargs) -> None:
        super().__init__(endpoint, **kwargs)
        self.model = model
        self.fingerprint = f"remote:{model}@{self.endpoint}"

    def generate(self, req: ChatRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            payload["seed"] = req.seed
        data = self._post("/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise BackendRejected(200, "unexpected completion shape") from None


class RemoteEmbedder(_HttpBackend):
    def __init__(self, endpoint: str, model: str, dim: int | None = None, **kwargs) -> None:
        super().__init__(endpoint, **kwargs)
        self.model = model
        self.dim = dim or 0
        self.fingerprint = f"remote:{model}@{self.endpoint}"

    def embed(self, text: str) -> EmbeddingVector:
        if not " ".join(text.split()):
            raise EmptyText("cannot embed empty text")
        data = self._post("/embeddings", {"model": self.model, "input": text})
        try:
            values = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError):
            raise BackendRejected(200, "unexpected embedding shape") from None
        if self.dim and values.shape[0] != self.dim:
            raise BackendRejected(200, f"expected dim {self.dim}, got {values.shape[0]}")
        self.dim = int(values.shape[0])
        norm = np.linalg.norm(values)
        if norm == 0:
            values = np.zeros_like(values)
            values[0] = 1.0
            return EmbeddingVector(values)
        return EmbeddingVector(values / norm)


# -- configuration ------------------------------------------------------------------


@dataclass
class LLMSettings:
    mode: str = "mock"
    endpoint: str = ""
    api_key: str = ""
    model: str = ""
    embed_endpoint: str = ""
    embed_model: str = ""
    parallelism: int = DEFAULT_PARALLELISM
    timeout: float = 60.0
    retries: int = DEFAULT_RETRIES
    backoff: float = DEFAULT_BACKOFF
    # mock rule per role
    generator_rule: str = "compendium-writer"
    agent_rule: str = "keyword-agent"
    simulator_rule: str = "simulator-echo"
    judge_rule: str = "judge-structural"

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None, **overrides) -> LLMSettings:
        env = dict(os.environ if env is None else env)
        s = cls(**overrides)
        s.endpoint = s.endpoint or env.get("FICAL_LLM_ENDPOINT", "")
        s.api_key = s.api_key or env.get("FICAL_LLM_API_KEY", "")
        s.model = s.model or env.get("FICAL_LLM_MODEL", "")
        s.embed_endpoint = s.embed_endpoint or env.get("FICAL_EMBED_ENDPOINT", "")
        s.embed_model = s.embed_model or env.get("FICAL_EMBED_MODEL", "")
        return s

    def validate(self) -> None:
        if self.mode not in ("mock", "remote"):
            raise ConfigError(f"llm.mode must be 'mock' or 'remote', not {self.mode!r}")
        if self.mode == "remote" and not (self.endpoint and self.model):
            raise ConfigError("remote mode needs llm endpoint and model")
        if self.parallelism < 1:
            raise ConfigError("llm.parallelism must be >= 1")

    def _http_kwargs(self) -> dict:
        return dict(
            api_key=self.api_key or None,
            timeout=self.timeout,
            retries=self.retries,
            backoff=self.backoff,
            parallelism=self.parallelism,
        )

    def generator(self, role: str) -> Generator:
        """Backend for ``role``: one of generator, agent, simulator, judge."""
        if self.mode == "remote":
            return RemoteGenerator(self.endpoint, self.model, **self._http_kwargs())
        rule = getattr(self, f"{role}_rule")
        return MockGenerator(rule)

    def embedder(self, dim: int) -> Embedder:
        if self.mode == "remote" and self.embed_endpoint:
            return RemoteEmbedder(self.embed_endpoint, self.embed_model, **self._http_kwargs())
        return MockEmbedder(dim)
