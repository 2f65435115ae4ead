"""Tool learning and utilizing: retrieval over the global compendium.

The global compendium is split into one chunk per (client, tool, section),
embedded, and kept in an exact in-memory index. At query time the top-k
chunks by cosine similarity are placed in the agent prompt together with the
signatures of the tools they talk about, and the agent's reply is parsed into
a :class:`~fical.domain.ToolCall`.

The no-retrieval alternative, :func:`stuff_prompt`, inlines the whole global
compendium and fails once that no longer fits the context budget.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import ToolCall, ToolSpec
from .errors import (
    BudgetTooSmall,
    ContextOverflow,
    DimMismatch,
    EmbeddingFailed,
    EmptyIndex,
    FingerprintMismatch,
    UnparseableAgentOutput,
)
from .federation import GlobalCompendium
from .gateway import AGENT_TEMPERATURE, ChatRequest, Embedder, EmbeddingVector, Generator
from .kcg import SECTIONS

log = logging.getLogger(__name__)

DEFAULT_K = 8
DEFAULT_BUDGET = 2048
DEFAULT_AGENT_RETRIES = 2

INDEX_SUFFIX = ".fical-index"
_INDEX_MAGIC = b"FICALIDX"
_INDEX_VERSION = 1

TOOL_CALL_MARKER = "TOOL_CALL"

AGENT_SYSTEM_PROMPT = "You are an agent that answers user requests by calling exactly one tool."
AGENT_PREAMBLE = (
    "Decide which tool answers the user's request and with which arguments. "
    "Use the knowledge notes to pick the right tool and fill its parameters."
)
OUTPUT_FORMAT = (
    "Reply with a single line of the form\n"
    'TOOL_CALL {"tool": "<tool name>", "arguments": {"<parameter>": <value>}}\n'
    "and nothing else."
)
AGENT_REMINDER = (
    "\n\nREMINDER: your previous reply contained no valid tool call. Reply with exactly one line "
    'starting with TOOL_CALL followed by a JSON object with keys "tool" and "arguments".'
)


def approx_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


# -- chunks and the index -------------------------------------------------------------------


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    text: str
    client_id: str
    tool_name: str
    section: str
    vector: EmbeddingVector | None = None

    def metadata(self) -> dict[str, str]:
        return {"client_id": self.client_id, "tool_name": self.tool_name, "section": self.section}

    def with_vector(self, vector: EmbeddingVector) -> Chunk:
        return Chunk(self.chunk_id, self.text, self.client_id, self.tool_name, self.section, vector)


def chunk_compendium(global_comp: GlobalCompendium) -> list[Chunk]:
    """Four chunks per tool entry, ids ``<client>/<tool>/<section>``."""
    chunks = []
    for comp in global_comp.sections:
        for entry in comp.entries:
            for key, title in SECTIONS:
                chunks.append(
                    Chunk(
                        chunk_id=f"{comp.client_id}/{entry.tool_name}/{key}",
                        text=f"tool: {entry.tool_name}\nsection: {title}\n{entry.section(key)}",
                        client_id=comp.client_id,
                        tool_name=entry.tool_name,
                        section=key,
                    )
                )
    return chunks


class VectorStore:
    """Immutable exact-search index; chunks are kept sorted by chunk_id."""

    def __init__(self, dim: int, chunks: Iterable[Chunk], embedder_fingerprint: str) -> None:
        chunks = sorted(chunks, key=lambda c: c.chunk_id)
        if dim < 1:
            raise ValueError("dim must be positive")
        ids = [c.chunk_id for c in chunks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate chunk ids")
        matrix = np.zeros((len(chunks), dim), dtype="<f4")
        for row, c in enumerate(chunks):
            if c.vector is None:
                raise ValueError(f"chunk {c.chunk_id!r} has no vector")
            if c.vector.dim != dim:
                raise DimMismatch(f"chunk {c.chunk_id!r} has dim {c.vector.dim}, store has {dim}")
            matrix[row] = c.vector.values
        matrix.setflags(write=False)
        # chunks carry the stored (float32) vectors so that a reloaded store compares equal
        self.chunks: tuple[Chunk, ...] = tuple(
            c.with_vector(EmbeddingVector(matrix[i])) for i, c in enumerate(chunks)
        )
        self.dim = dim
        self.embedder_fingerprint = embedder_fingerprint
        self.matrix = matrix
        self._matrix64 = matrix.astype(np.float64)
        self._norms = np.linalg.norm(self._matrix64, axis=1)
        self._by_id = {c.chunk_id: c for c in self.chunks}

    def __len__(self) -> int:
        return len(self.chunks)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VectorStore):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def chunk(self, chunk_id: str) -> Chunk:
        return self._by_id[chunk_id]

    @classmethod
    def from_vectors(
        cls,
        ids: Sequence[str],
        vectors: np.ndarray,
        fingerprint: str = "raw",
        texts: Sequence[str] | None = None,
    ) -> VectorStore:
        vectors = np.asarray(vectors, dtype=np.float64)
        texts = texts or [""] * len(ids)
        chunks = [
            Chunk(cid, text, "", "", "", EmbeddingVector(v)) for cid, v, text in zip(ids, vectors, texts)
        ]
        return cls(vectors.shape[1], chunks, fingerprint)

    # persistence: header, little-endian float32 rows, JSON metadata table

    def to_bytes(self) -> bytes:
        fp = self.embedder_fingerprint.encode("utf-8")
        meta = json.dumps(
            [
                {"chunk_id": c.chunk_id, "text": c.text, **c.metadata()}
                for c in self.chunks
            ],
            sort_keys=True,
            ensure_ascii=False,
            separators=(",", ":"),
        ).encode("utf-8")
        header = _INDEX_MAGIC + struct.pack("<IIII", _INDEX_VERSION, self.dim, len(self.chunks), len(fp))
        return b"".join(
            [header, fp, self.matrix.astype("<f4").tobytes(), struct.pack("<I", len(meta)), meta]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> VectorStore:
        if data[:8] != _INDEX_MAGIC:
            raise ValueError("not a vector store file")
        version, dim, count, fp_len = struct.unpack_from("<IIII", data, 8)
        if version != _INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        pos = 8 + 16
        fp = data[pos : pos + fp_len].decode("utf-8")
        pos += fp_len
        nvec = count * dim * 4
        matrix = np.frombuffer(data[pos : pos + nvec], dtype="<f4").reshape(count, dim)
        pos += nvec
        (meta_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
        if len(meta) != count:
            raise ValueError("metadata table does not match vector count")
        chunks = [
            Chunk(m["chunk_id"], m["text"], m["client_id"], m["tool_name"], m["section"], EmbeddingVector(row))
            for m, row in zip(meta, matrix)
        ]
        return cls(dim, chunks, fp)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> VectorStore:
        return cls.from_bytes(Path(path).read_bytes())


def build_index(chunks: Sequence[Chunk], embedder: Embedder, parallelism: int = 4) -> VectorStore:
    if not chunks:
        raise EmptyIndex("no chunks to index")

    def _embed(chunk: Chunk) -> Chunk:
        try:
            return chunk.with_vector(embedder.embed(chunk.text))
        except Exception as exc:  # noqa: BLE001 - wrapped with chunk context
            raise EmbeddingFailed(chunk.chunk_id, exc) from exc

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        embedded = list(pool.map(_embed, chunks))
    dims = {c.vector.dim for c in embedded}
    if len(dims) != 1:
        raise DimMismatch(f"embedder produced several dims: {sorted(dims)}")
    return VectorStore(dims.pop(), embedded, embedder.fingerprint)


# -- retrieval ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalResult:
    chunk: Chunk
    similarity: float


def search_vector(store: VectorStore, query: np.ndarray, k: int) -> list[RetrievalResult]:
    """Exact top-k by cosine similarity; ties go to the smaller chunk_id.

    Zero vectors (stored or query) score 0 against everything.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != store.dim:
        raise DimMismatch(f"query dim {q.shape[0]} != store dim {store.dim}")
    if k == 0 or not len(store):
        return []
    denom = store._norms * np.linalg.norm(q)
    dots = (store._matrix64 * q).sum(axis=1)
    sims = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    sims = np.clip(sims, -1.0, 1.0)
    # rows are in chunk_id order, so a stable sort breaks ties by id
    order = np.argsort(-sims, kind="stable")[:k]
    return [RetrievalResult(store.chunks[i], float(sims[i])) for i in order]


def retrieve(store: VectorStore, query: str, k: int, embedder: Embedder) -> list[RetrievalResult]:
    if embedder.fingerprint != store.embedder_fingerprint:
        raise FingerprintMismatch(store.embedder_fingerprint, embedder.fingerprint)
    return search_vector(store, embedder.embed(query).values, k)


# -- prompts ------------------------------------------------------------------------------


@dataclass(frozen=True)
class AssembledPrompt:
    text: str
    included: int
    dropped: int
    tokens: int
    chunk_ids: tuple[str, ...] = ()


def _signature_block(tool_specs: Sequence[ToolSpec]) -> str:
    if not tool_specs:
        return "Tools you can call: none listed."
    lines = ["Tools you can call:"]
    lines += ["- " + json.dumps(t.signature(), sort_keys=True, ensure_ascii=False) for t in tool_specs]
    return "\n".join(lines)


def _compose(knowledge: Sequence[str], tool_specs: Sequence[ToolSpec], query: str) -> str:
    parts = [AGENT_PREAMBLE]
    if knowledge:
        parts.append("Knowledge notes:\n" + "\n\n".join(knowledge))
    parts.append(_signature_block(tool_specs))
    parts.append(f"QUERY: {' '.join(query.split())}")
    parts.append(OUTPUT_FORMAT)
    return "\n\n".join(parts)


def _note(i: int, result: RetrievalResult) -> str:
    return f"[{i}] {result.chunk.text}"


def assemble_prompt(
    query: str,
    results: Sequence[RetrievalResult],
    tool_specs: Sequence[ToolSpec],
    budget: int,
) -> AssembledPrompt:
    """Agent prompt with as many of the best chunks as fit in ``budget`` tokens.

    Tokens are approximated as ``ceil(chars / 4)``. Chunks are taken in
    similarity order and the first one that does not fit ends the list.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    base = _compose([], tool_specs, query)
    if approx_tokens(base) > budget:
        raise BudgetTooSmall(f"fixed prompt parts need {approx_tokens(base)} tokens, budget is {budget}")
    ranked = sorted(results, key=lambda r: (-r.similarity, r.chunk.chunk_id))
    notes: list[str] = []
    text = base
    for r in ranked:
        candidate = _compose(notes + [_note(len(notes) + 1, r)], tool_specs, query)
        if approx_tokens(candidate) > budget:
            break
        notes.append(_note(len(notes) + 1, r))
        text = candidate
    included = len(notes)
    return AssembledPrompt(
        text=text,
        included=included,
        dropped=len(ranked) - included,
        tokens=approx_tokens(text),
        chunk_ids=tuple(r.chunk.chunk_id for r in ranked[:included]),
    )


def stuff_prompt(
    query: str,
    global_comp: GlobalCompendium,
    tool_specs: Sequence[ToolSpec],
    budget: int,
) -> str:
    """Prompt carrying the entire global compendium; no retrieval."""
    text = _compose([global_comp.to_text()], tool_specs, query)
    needed = approx_tokens(text)
    if needed > budget:
        raise ContextOverflow(needed, budget)
    return text


# -- the agent ---------------------------------------------------------------------------


def parse_tool_call(text: str) -> ToolCall | None:
    """First ``TOOL_CALL {...}`` whose object has a string ``tool``."""
    decoder = json.JSONDecoder()
    start = 0
    while True:
        idx = text.find(TOOL_CALL_MARKER, start)
        if idx < 0:
            return None
        start = idx + len(TOOL_CALL_MARKER)
        pos = start
        while pos < len(text) and text[pos] in " \t\r\n:":
            pos += 1
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict) or not isinstance(obj.get("tool"), str):
            continue
        args = obj.get("arguments", {})
        if not isinstance(args, dict):
            continue
        return ToolCall(obj["tool"], args, raw=text)


def format_tool_call(call: ToolCall) -> str:
    return f"{TOOL_CALL_MARKER} " + json.dumps(call.to_dict(), sort_keys=True, ensure_ascii=False)


@dataclass(frozen=True)
class AgentConfig:
    k: int = DEFAULT_K
    budget: int = DEFAULT_BUDGET
    retries: int = DEFAULT_AGENT_RETRIES
    temperature: float = AGENT_TEMPERATURE
    max_tokens: int = 512
    seed: int | None = None


@dataclass(frozen=True)
class AgentAnswer:
    call: ToolCall
    attempts: int
    prompt_tokens: int
    retrieved: tuple[RetrievalResult, ...] = ()
    included_chunk_ids: tuple[str, ...] = ()


def _call_agent(agent: Generator, prompt: str, config: AgentConfig) -> tuple[ToolCall, int]:
    raw = ""
    for attempt in range(config.retries + 1):
        user = prompt if attempt == 0 else prompt + AGENT_REMINDER
        req = ChatRequest(AGENT_SYSTEM_PROMPT, user, config.temperature, config.max_tokens, config.seed)
        raw = agent.generate(req)
        call = parse_tool_call(raw)
        if call is not None:
            return call, attempt + 1
    raise UnparseableAgentOutput(config.retries + 1, raw)


def tools_for_results(results: Sequence[RetrievalResult], catalog: Mapping[str, ToolSpec]) -> list[ToolSpec]:
    """Signatures of the tools the retrieved chunks describe, best-ranked first."""
    seen: dict[str, ToolSpec] = {}
    for r in results:
        name = r.chunk.tool_name
        if name in catalog and name not in seen:
            seen[name] = catalog[name]
    return list(seen.values())


def run_agent(
    query: str,
    store: VectorStore,
    agent: Generator,
    embedder: Embedder,
    catalog: Mapping[str, ToolSpec],
    config: AgentConfig = AgentConfig(),
) -> AgentAnswer:
    results = retrieve(store, query, config.k, embedder)
    prompt = assemble_prompt(query, results, tools_for_results(results, catalog), config.budget)
    call, attempts = _call_agent(agent, prompt.text, config)
    return AgentAnswer(call, attempts, prompt.tokens, tuple(results), prompt.chunk_ids)


def answer_query(
    query: str,
    store: VectorStore,
    agent: Generator,
    config: AgentConfig = AgentConfig(),
    *,
    embedder: Embedder,
    catalog: Mapping[str, ToolSpec],
) -> ToolCall:
    return run_agent(query, store, agent, embedder, catalog, config).call


def run_agent_stuffed(
    query: str,
    global_comp: GlobalCompendium,
    agent: Generator,
    catalog: Mapping[str, ToolSpec],
    config: AgentConfig = AgentConfig(),
) -> AgentAnswer:
    specs = [catalog[name] for name in sorted(catalog)]
    prompt = stuff_prompt(query, global_comp, specs, config.budget)
    call, attempts = _call_agent(agent, prompt, config)
    return AgentAnswer(call, attempts, approx_tokens(prompt))
