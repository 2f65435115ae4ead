"""One-round federation: upload, aggregate, offload, and count every byte.

The server collects one compendium per registered client, concatenates them in
ascending client-id order once all have arrived, and serves the resulting
global document. Nothing is summarized or deduplicated.

Global document layout::

    # FICAL GLOBAL COMPENDIUM
    format_version: 1
    rounds: 1
    clients: c1,c2

    === SECTION c1 <n bytes> ===
    <the client's compendium document, exactly n bytes>
    === END SECTION c1 ===
    ...
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .errors import (
    ClientTimeout,
    CompendiumParseError,
    DuplicateClient,
    EmptyAggregation,
    NotAggregated,
    TransportError,
    UploadRejected,
)
from .kcg import KnowledgeCompendium

log = logging.getLogger(__name__)

MB = 1_000_000  # decimal megabyte, as used for overhead reporting
GLOBAL_MAGIC = b"# FICAL GLOBAL COMPENDIUM"
GLOBAL_VERSION = 1
DEFAULT_DEADLINE = 300.0

UPLOAD = "upload"
OFFLOAD = "offload"
CLIENT_TO_SERVER = "client->server"
SERVER_TO_CLIENT = "server->client"

_SECTION_RE = re.compile(rb"=== SECTION (\S+) (\d+) ===\n")


@dataclass(frozen=True)
class GlobalCompendium:
    client_order: tuple[str, ...]
    sections: tuple[KnowledgeCompendium, ...]
    rounds: int = 1
    byte_size: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "client_order", tuple(self.client_order))
        object.__setattr__(self, "sections", tuple(self.sections))
        if self.rounds != 1:
            raise ValueError("the protocol has exactly one round")
        if list(self.client_order) != sorted(self.client_order):
            raise ValueError("client_order must be ascending")
        if [s.client_id for s in self.sections] != list(self.client_order):
            raise ValueError("sections must follow client_order")
        object.__setattr__(self, "byte_size", len(self.to_bytes()))

    def header_bytes(self) -> bytes:
        return b"\n".join(
            [
                GLOBAL_MAGIC,
                f"format_version: {GLOBAL_VERSION}".encode(),
                f"rounds: {self.rounds}".encode(),
                f"clients: {','.join(self.client_order)}".encode(),
            ]
        ) + b"\n\n"

    def to_bytes(self) -> bytes:
        parts = [self.header_bytes()]
        for section in self.sections:
            payload = section.to_bytes()
            cid = section.client_id.encode()
            parts.append(b"=== SECTION %s %d ===\n" % (cid, len(payload)))
            parts.append(payload)
            parts.append(b"\n=== END SECTION %s ===\n" % cid)
        return b"".join(parts)

    def to_text(self) -> str:
        return self.to_bytes().decode("utf-8")

    def section_payloads(self) -> list[bytes]:
        return [s.to_bytes() for s in self.sections]

    @classmethod
    def from_bytes(cls, data: bytes) -> GlobalCompendium:
        header, sep, rest = data.partition(b"\n\n")
        lines = header.split(b"\n")
        if not sep or lines[0] != GLOBAL_MAGIC:
            raise CompendiumParseError("not a global compendium document")
        meta = {}
        for line in lines[1:]:
            key, _, value = line.decode("utf-8").partition(":")
            meta[key.strip()] = value.strip()
        if meta.get("format_version") != str(GLOBAL_VERSION):
            raise CompendiumParseError("unsupported global format_version")
        order = [c for c in meta.get("clients", "").split(",") if c]

        sections = []
        pos = 0
        while pos < len(rest):
            m = _SECTION_RE.match(rest, pos)
            if not m:
                raise CompendiumParseError(f"bad section frame at byte {len(header) + 2 + pos}")
            cid, n = m.group(1), int(m.group(2))
            start = m.end()
            payload = rest[start : start + n]
            trailer = b"\n=== END SECTION %s ===\n" % cid
            if rest[start + n : start + n + len(trailer)] != trailer:
                raise CompendiumParseError(f"section {cid!r} is truncated")
            section = KnowledgeCompendium.from_bytes(payload)
            if section.client_id.encode() != cid:
                raise CompendiumParseError("section frame and document disagree on client id")
            sections.append(section)
            pos = start + n + len(trailer)
        if [s.client_id for s in sections] != order:
            raise CompendiumParseError("section order does not match header")
        try:
            return cls(tuple(order), tuple(sections), rounds=int(meta.get("rounds", 0)))
        except ValueError as exc:
            raise CompendiumParseError(str(exc)) from None


def aggregate(compendiums: Iterable[KnowledgeCompendium]) -> GlobalCompendium:
    """Concatenate client compendiums in ascending client-id order."""
    comps = list(compendiums)
    if not comps:
        raise EmptyAggregation("nothing to aggregate")
    seen: set[str] = set()
    for c in comps:
        if c.client_id in seen:
            raise DuplicateClient(c.client_id)
        seen.add(c.client_id)
    comps.sort(key=lambda c: c.client_id)
    return GlobalCompendium(tuple(c.client_id for c in comps), tuple(comps))


# -- ledger ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    phase: str
    client_id: str
    direction: str
    bytes: int
    timestamp: float


class CommLedger:
    """Append-only record of protocol transmissions."""

    def __init__(self, clock: Callable[[], float] = time.time) -> None:
        self._clock = clock
        self._lock = threading.Lock()
        self.entries: list[LedgerEntry] = []
        self.totals: dict[str, int] = {UPLOAD: 0, OFFLOAD: 0}

    def record(self, phase: str, client_id: str, nbytes: int) -> LedgerEntry:
        if phase not in (UPLOAD, OFFLOAD):
            raise ValueError(f"unknown phase {phase!r}")
        if nbytes < 0:
            raise ValueError("byte count cannot be negative")
        direction = CLIENT_TO_SERVER if phase == UPLOAD else SERVER_TO_CLIENT
        entry = LedgerEntry(phase, client_id, direction, int(nbytes), float(self._clock()))
        with self._lock:
            self.entries.append(entry)
            self.totals[phase] += entry.bytes
        return entry

    @property
    def total_bytes(self) -> int:
        return sum(self.totals.values())

    def recompute_totals(self) -> dict[str, int]:
        totals = {UPLOAD: 0, OFFLOAD: 0}
        for e in self.entries:
            totals[e.phase] += e.bytes
        return totals

    def is_consistent(self) -> bool:
        return self.recompute_totals() == self.totals

    def is_complete_round(self, client_ids: Iterable[str]) -> bool:
        """Exactly one upload and one offload per client and nothing else."""
        expected = sorted(client_ids)
        ups = sorted(e.client_id for e in self.entries if e.phase == UPLOAD)
        downs = sorted(e.client_id for e in self.entries if e.phase == OFFLOAD)
        return ups == expected and downs == expected and len(self.entries) == 2 * len(expected)

    def summary(self) -> dict:
        return {
            "entries": len(self.entries),
            "upload_bytes": self.totals[UPLOAD],
            "offload_bytes": self.totals[OFFLOAD],
            "total_bytes": self.total_bytes,
            "total_mb": self.total_bytes / MB,
        }

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.entries)

    @classmethod
    def from_jsonl(cls, text: str) -> CommLedger:
        ledger = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            entry = LedgerEntry(
                rec["phase"], rec["client_id"], rec["direction"], int(rec["bytes"]), float(rec["timestamp"])
            )
            ledger.entries.append(entry)
            ledger.totals[entry.phase] += entry.bytes
        return ledger


# -- server ------------------------------------------------------------------------------

COLLECTING = "collecting"
AGGREGATED = "aggregated"


@dataclass(frozen=True)
class Receipt:
    client_id: str
    bytes: int
    received: int
    registered: int


class FederationServer:
    """Barrier: aggregate once every registered client has uploaded."""

    def __init__(self, registered: Iterable[str]) -> None:
        self.registered = tuple(sorted(set(registered)))
        if not self.registered:
            raise ValueError("no clients registered")
        self._lock = threading.Lock()
        self._received: dict[str, KnowledgeCompendium] = {}
        self._global: GlobalCompendium | None = None
        self._global_bytes: bytes | None = None
        self.aggregations = 0
        self.transitions: list[tuple[str, str]] = []

    @property
    def state(self) -> str:
        return AGGREGATED if self._global is not None else COLLECTING

    def receive(self, payload: bytes, client_id: str | None = None) -> Receipt:
        try:
            comp = KnowledgeCompendium.from_bytes(payload)
        except CompendiumParseError as exc:
            raise UploadRejected(client_id or "?", f"invalid compendium: {exc}") from None
        if client_id is not None and client_id != comp.client_id:
            raise UploadRejected(client_id, f"document belongs to {comp.client_id!r}")
        if comp.client_id not in self.registered:
            raise UploadRejected(comp.client_id, "client is not registered")
        with self._lock:
            if comp.client_id in self._received:
                raise DuplicateClient(comp.client_id)
            self._received[comp.client_id] = comp
            if len(self._received) == len(self.registered) and self._global is None:
                self._global = aggregate(self._received.values())
                self._global_bytes = self._global.to_bytes()
                self.aggregations += 1
                self.transitions.append((COLLECTING, AGGREGATED))
            return Receipt(comp.client_id, len(payload), len(self._received), len(self.registered))

    def global_compendium(self) -> GlobalCompendium:
        if self._global is None:
            raise NotAggregated(f"{len(self._received)}/{len(self.registered)} uploads received")
        return self._global

    def global_bytes(self) -> bytes:
        self.global_compendium()
        assert self._global_bytes is not None
        return self._global_bytes

    def status(self) -> dict:
        return {
            "registered": len(self.registered),
            "received": len(self._received),
            "state": self.state,
        }


# -- transports -------------------------------------------------------------------------


class Transport(Protocol):
    def upload(self, client_id: str, payload: bytes) -> Receipt: ...

    def fetch_global(self, client_id: str) -> bytes: ...


class SimulatedTransport:
    """In-process channel to a :class:`FederationServer`.

    Clients listed in ``unreachable`` never get their upload through; their
    calls block until the transport is closed.
    """

    def __init__(self, server: FederationServer, unreachable: Iterable[str] = ()) -> None:
        self.server = server
        self.unreachable = frozenset(unreachable)
        self._closed = threading.Event()

    def upload(self, client_id: str, payload: bytes) -> Receipt:
        if client_id in self.unreachable:
            self._closed.wait()
            raise ConnectionError(f"{client_id} is partitioned from the server")
        return self.server.receive(bytes(payload), client_id)

    def fetch_global(self, client_id: str) -> bytes:
        if client_id in self.unreachable:
            self._closed.wait()
            raise ConnectionError(f"{client_id} is partitioned from the server")
        return bytes(self.server.global_bytes())

    def status(self) -> dict:
        return self.server.status()

    def close(self) -> None:
        self._closed.set()

    def __enter__(self) -> SimulatedTransport:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class HttpTransport:
    """Client side of the federation HTTP service."""

    def __init__(self, base_url: str, timeout: float = 30.0, client: httpx.Client | None = None) -> None:
        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            return self._client.request(method, f"{self.base_url}{path}", **kwargs)
        except httpx.TransportError as exc:
            raise TransportError(f"{method} {path}: {exc}") from exc

    def upload(self, client_id: str, payload: bytes) -> Receipt:
        resp = self._request(
            "POST",
            "/v1/compendium",
            content=payload,
            headers={"Content-Type": "text/markdown; charset=utf-8", "X-Fical-Client-Id": client_id},
        )
        body = _json_or_empty(resp)
        if resp.status_code == 200:
            return Receipt(body["client_id"], body["bytes"], body["received"], body["registered"])
        if resp.status_code == 409 and body.get("error") == "DuplicateClient":
            raise DuplicateClient(body.get("client_id", client_id))
        raise UploadRejected(client_id, body.get("reason") or f"HTTP {resp.status_code}")

    def fetch_global(self, client_id: str) -> bytes:
        resp = self._request("GET", "/v1/global", headers={"X-Fical-Client-Id": client_id})
        if resp.status_code == 409:
            raise NotAggregated(_json_or_empty(resp).get("reason", "server still collecting"))
        if resp.status_code != 200:
            raise TransportError(f"GET /v1/global returned {resp.status_code}")
        return resp.content

    def status(self) -> dict:
        resp = self._request("GET", "/v1/status")
        if resp.status_code != 200:
            raise TransportError(f"GET /v1/status returned {resp.status_code}")
        return resp.json()

    def close(self) -> None:
        self._client.close()


def _json_or_empty(resp: httpx.Response) -> dict:
    try:
        data = resp.json()
    except ValueError:
        return {}
    return data if isinstance(data, dict) else {}


# -- the round ----------------------------------------------------------------------------


@dataclass
class FederatedClient:
    client_id: str
    compendium: KnowledgeCompendium
    global_compendium: GlobalCompendium | None = None

    def __post_init__(self) -> None:
        if self.compendium.client_id != self.client_id:
            raise ValueError("compendium belongs to another client")

    def payload(self) -> bytes:
        return self.compendium.to_bytes()


_TRANSPORT_FAILURES = (TransportError, ConnectionError, TimeoutError, OSError)


def _run_phase(
    clients: Sequence[FederatedClient],
    action: Callable[[FederatedClient], bytes],
    deadline: float,
) -> dict[str, bytes]:
    results: dict[str, bytes] = {}
    pool = ThreadPoolExecutor(max_workers=min(32, len(clients)), thread_name_prefix="fical-client")
    try:
        futures = {c.client_id: pool.submit(action, c) for c in clients}
        wait(futures.values(), timeout=deadline)
        for cid in sorted(futures):
            fut = futures[cid]
            if not fut.done():
                raise ClientTimeout(cid)
            exc = fut.exception()
            if isinstance(exc, _TRANSPORT_FAILURES) and not isinstance(exc, UploadRejected):
                raise ClientTimeout(cid) from exc
            if exc is not None:
                raise exc
            results[cid] = fut.result()
    finally:
        pool.shutdown(wait=False, cancel_futures=True)
    return results


def run_round(
    clients: Sequence[FederatedClient],
    transport: Transport,
    deadline: float = DEFAULT_DEADLINE,
    clock: Callable[[], float] = time.time,
) -> tuple[GlobalCompendium, CommLedger]:
    """Upload every compendium, wait for aggregation, hand the global back.

    Each client uploads exactly once and downloads exactly once. The ledger
    records the length of every payload handed to or returned by the
    transport, in client-id order per phase.
    """
    if not clients:
        raise EmptyAggregation("no clients")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise DuplicateClient(next(i for i in ids if ids.count(i) > 1))
    ordered = sorted(clients, key=lambda c: c.client_id)
    ledger = CommLedger(clock)

    def _upload(c: FederatedClient) -> bytes:
        payload = c.payload()
        transport.upload(c.client_id, payload)
        return payload

    sent = _run_phase(ordered, _upload, deadline)
    for c in ordered:
        ledger.record(UPLOAD, c.client_id, len(sent[c.client_id]))

    received = _run_phase(ordered, lambda c: transport.fetch_global(c.client_id), deadline)
    global_comp = None
    for c in ordered:
        data = received[c.client_id]
        ledger.record(OFFLOAD, c.client_id, len(data))
        c.global_compendium = GlobalCompendium.from_bytes(data)
        global_comp = global_comp or c.global_compendium
    assert global_comp is not None
    return global_comp, ledger


def run_simulated_round(
    compendiums: Sequence[KnowledgeCompendium],
    deadline: float = DEFAULT_DEADLINE,
    clock: Callable[[], float] = time.time,
) -> tuple[GlobalCompendium, CommLedger, FederationServer]:
    server = FederationServer(c.client_id for c in compendiums)
    clients = [FederatedClient(c.client_id, c) for c in compendiums]
    with SimulatedTransport(server) as transport:
        global_comp, ledger = run_round(clients, transport, deadline, clock)
    return global_comp, ledger, server


# -- analytic cost models -----------------------------------------------------------------


@dataclass(frozen=True)
class BaselineCostModel:
    """Traffic of a parameter-sharing protocol: every client ships the model both ways per round."""

    param_count: float
    bytes_per_param: float = 4.0
    rounds: int = 1
    clients: int = 1
    directions: int = 2

    def __post_init__(self) -> None:
        if self.param_count < 0 or self.bytes_per_param <= 0 or self.clients < 1:
            raise ValueError("param_count >= 0, bytes_per_param > 0 and clients >= 1 are required")
        if self.rounds < 0:
            raise ValueError("rounds cannot be negative")
        if self.directions != 2:
            raise ValueError("directions is fixed at 2 (upload and download)")


# 13M trainable (LoRA-scale) fp32 parameters, 50 rounds, 5 clients: 26000 MB
DEFAULT_BASELINE = BaselineCostModel(param_count=13_000_000, bytes_per_param=4.0, rounds=50, clients=5)

POPULAR_MODELS: Mapping[str, float] = {
    "LLaMA3.1": 405e9,
    "GPT3": 175e9,
    "Qwen2": 72e9,
    "Mistral-L-2": 123e9,
}
TYPICAL_LINK_BPS = 1e8


def baseline_comm_bytes(model: BaselineCostModel) -> float:
    return model.clients * model.rounds * model.directions * model.param_count * model.bytes_per_param


def transmission_time_hours(param_count: float, bytes_per_param: float = 4.0, link_bps: float = TYPICAL_LINK_BPS) -> float:
    if link_bps <= 0:
        raise ValueError("link_bps must be positive")
    return param_count * bytes_per_param * 8 / link_bps / 3600


def transmission_table(
    models: Mapping[str, float] = POPULAR_MODELS,
    bytes_per_param: float = 4.0,
    link_bps: float = TYPICAL_LINK_BPS,
) -> list[dict]:
    return [
        {
            "model": name,
            "params": params,
            "bytes_per_param": bytes_per_param,
            "link_bps": link_bps,
            "hours": transmission_time_hours(params, bytes_per_param, link_bps),
        }
        for name, params in models.items()
    ]


def comm_ratio(ledger: CommLedger | int | float, baseline: BaselineCostModel | float) -> float:
    """How many times less traffic the ledger shows than the baseline."""
    total = ledger.total_bytes if isinstance(ledger, CommLedger) else ledger
    base = baseline_comm_bytes(baseline) if isinstance(baseline, BaselineCostModel) else baseline
    if total == 0:
        raise ZeroDivisionError("ledger total is zero")
    return base / total


def scaling_sweep(
    ledger_bytes: int,
    param_counts: Sequence[float],
    template: BaselineCostModel = DEFAULT_BASELINE,
) -> dict:
    """Baseline traffic against model size, next to the (size-independent) ledger total.

    Returns the per-size rows plus the slope, intercept and R^2 of a
    least-squares line through the baseline bytes.
    """
    xs = np.asarray(param_counts, dtype=np.float64)
    ys = np.array(
        [
            baseline_comm_bytes(
                BaselineCostModel(p, template.bytes_per_param, template.rounds, template.clients)
            )
            for p in xs
        ]
    )
    slope, intercept = np.polyfit(xs, ys, 1)
    fitted = slope * xs + intercept
    ss_res = float(np.sum((ys - fitted) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot else 1.0
    rows = [
        {"param_count": float(p), "baseline_bytes": float(b), "fical_bytes": int(ledger_bytes)}
        for p, b in zip(xs, ys)
    ]
    return {"rows": rows, "slope": float(slope), "intercept": float(intercept), "r2": r2}
