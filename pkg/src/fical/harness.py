"""End-to-end experiments: generate, federate, index, answer, simulate, judge, report."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .config import ExperimentConfig
from .domain import ClientDataset, ToolCall, ToolSpec, ToolUseInstance, load_dataset, validate_tool_call
from .errors import (
    ConfigError,
    ContextOverflow,
    LeakageDetected,
    TransportError,
    UnparseableAgentOutput,
    UnparseableJudgeOutput,
)
from .federation import (
    BaselineCostModel,
    CommLedger,
    FederatedClient,
    GlobalCompendium,
    HttpTransport,
    baseline_comm_bytes,
    comm_ratio,
    run_round,
    run_simulated_round,
)
from .gateway import JUDGE_TEMPERATURE, ChatRequest, Embedder, Generator
from .kcg import KnowledgeCompendium, PromptTemplate, generate_compendium, leakage_check
from .tlu import (
    AgentConfig,
    VectorStore,
    build_index,
    chunk_compendium,
    run_agent,
    run_agent_stuffed,
)

log = logging.getLogger(__name__)

NUMERIC_TOLERANCE = 1e-9
FIXED_EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)

REFERENCE_NOTE = (
    "Reference figures from the full-scale setting (LLaMA3-8B agent, DeepSeek-v2 judge): "
    "57.6% with retrieval, 50.0% with the whole compendium in context. They are not "
    "reproducible with desk-scale or mock backends and are listed for orientation only."
)


# -- simulator ----------------------------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")

SIMULATOR_SYSTEM_PROMPT = (
    "You simulate a web API. Given the tool description and a call, reply with the response "
    "the API would plausibly return."
)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def render_response(template: str, arguments: Mapping[str, Any]) -> str:
    return _PLACEHOLDER_RE.sub(
        lambda m: _format_value(arguments[m.group(1)]) if m.group(1) in arguments else m.group(0),
        template,
    )


def simulate_tool(
    spec: ToolSpec,
    call: ToolCall,
    mode: str = "deterministic",
    gateway: Generator | None = None,
    seed: int | None = None,
) -> str:
    """Tool response for a call; invalid calls get a structured error body."""
    report = validate_tool_call(call, spec)
    if report:
        return json.dumps(
            {
                "error": "invalid_call",
                "tool": spec.tool_name,
                "issues": [{"kind": i.kind, "parameter": i.parameter} for i in report],
            },
            sort_keys=True,
        )
    if mode == "deterministic":
        return render_response(spec.response_template, call.arguments)
    if mode != "llm":
        raise ValueError(f"unknown simulator mode {mode!r}")
    if gateway is None:
        raise ValueError("llm simulator mode needs a gateway")
    prompt = "\n".join(
        [
            "TOOL_SPEC: " + json.dumps(spec.signature(), sort_keys=True),
            "CALL: " + json.dumps(call.to_dict(), sort_keys=True),
        ]
    )
    return gateway.generate(ChatRequest(SIMULATOR_SYSTEM_PROMPT, prompt, 0.0, 512, seed))


# -- judge --------------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    correct: bool
    reasons: tuple[str, ...] = ()
    mode: str = "structural"


@dataclass
class EpisodeTrace:
    instance_id: str
    client_id: str
    toolset_id: str
    query: str
    retrieved_chunk_ids: list[str] = field(default_factory=list)
    agent_call: dict | None = None
    simulator_response: str | None = None
    verdict: JudgeVerdict | None = None
    error: str | None = None
    attempts: int = 0
    prompt_tokens: int = 0

    @property
    def correct(self) -> bool:
        return self.verdict is not None and self.verdict.correct

    @property
    def bucket(self) -> str:
        if self.verdict is None:
            return "failed"
        return "correct" if self.verdict.correct else "incorrect"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bucket"] = self.bucket
        return d


def _values_equal(kind: str | None, got: Any, want: Any) -> bool:
    if isinstance(want, bool) or isinstance(got, bool) or kind in ("boolean",):
        return type(got) is type(want) and got == want
    if kind in ("integer", "number") or (
        kind is None and isinstance(want, (int, float)) and isinstance(got, (int, float))
    ):
        if not isinstance(got, (int, float)) or not isinstance(want, (int, float)):
            return False
        return math.isfinite(got) and abs(got - want) <= NUMERIC_TOLERANCE
    return type(got) is type(want) and got == want


def structural_verdict(call: ToolCall, gold: ToolUseInstance, spec: ToolSpec | None) -> JudgeVerdict:
    reasons: list[str] = []
    if call.tool_name != gold.gold_tool:
        reasons.append(f"WrongTool(expected={gold.gold_tool!r}, got={call.tool_name!r})")
    elif spec is not None:
        reasons.extend(f"SchemaInvalid: {issue}" for issue in validate_tool_call(call, spec))
    for name in sorted(gold.gold_arguments):
        if name not in call.arguments:
            reasons.append(f"MissingArgument({name!r})")
            continue
        param = spec.parameter(name) if spec is not None else None
        if not _values_equal(param.kind if param else None, call.arguments[name], gold.gold_arguments[name]):
            reasons.append(f"ArgumentMismatch({name!r})")
    return JudgeVerdict(not reasons, tuple(reasons), "structural")


JUDGE_SYSTEM_PROMPT = (
    "You grade whether an agent used a tool correctly. Answer 'yes' or 'no' first, then a short reason."
)
_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def _judge_prompt(trace: EpisodeTrace, gold: ToolUseInstance) -> str:
    return "\n".join(
        [
            f"USER_REQUEST: {trace.query}",
            "AGENT_CALL: " + json.dumps(trace.agent_call, sort_keys=True),
            "TOOL_RESPONSE: " + (trace.simulator_response or ""),
            "EXPECTED_CALL: " + json.dumps(gold.gold_call.to_dict(), sort_keys=True),
            "Did the agent call the right tool with the right arguments?",
        ]
    )


def judge_episode(
    trace: EpisodeTrace,
    gold: ToolUseInstance,
    mode: str = "structural",
    gateway: Generator | None = None,
    spec: ToolSpec | None = None,
    retries: int = 2,
    seed: int | None = None,
) -> JudgeVerdict:
    if trace.agent_call is None:
        return JudgeVerdict(False, ("unparseable",), mode)
    call = ToolCall(trace.agent_call.get("tool", ""), dict(trace.agent_call.get("arguments", {})))
    if mode == "structural":
        return structural_verdict(call, gold, spec)
    if mode != "llm":
        raise ValueError(f"unknown judge mode {mode!r}")
    if gateway is None:
        raise ValueError("llm judge mode needs a gateway")
    prompt = _judge_prompt(trace, gold)
    raw = ""
    for _ in range(retries + 1):
        raw = gateway.generate(ChatRequest(JUDGE_SYSTEM_PROMPT, prompt, JUDGE_TEMPERATURE, 64, seed))
        m = _YES_NO_RE.search(raw)
        if m:
            return JudgeVerdict(m.group(1).lower() == "yes", (raw.strip(),), "llm")
    raise UnparseableJudgeOutput(retries + 1, raw)


# -- report -------------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: dict
    rag_mode: bool
    seed: int
    episodes: list[EpisodeTrace]
    ledger: CommLedger
    baseline_bytes: float
    global_bytes: int
    compendium_bytes: dict[str, int]

    @property
    def total(self) -> int:
        return len(self.episodes)

    @property
    def correct(self) -> int:
        return sum(e.correct for e in self.episodes)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def comm_ratio(self) -> float | None:
        return comm_ratio(self.ledger, self.baseline_bytes) if self.ledger.total_bytes else None

    def buckets(self) -> dict[str, int]:
        counts = {"correct": 0, "incorrect": 0, "failed": 0}
        for e in self.episodes:
            counts[e.bucket] += 1
        return counts

    def error_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.episodes:
            if e.error:
                counts[e.error] = counts.get(e.error, 0) + 1
        return dict(sorted(counts.items()))

    def per_toolset(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for e in self.episodes:
            row = out.setdefault(e.toolset_id, {"correct": 0, "total": 0})
            row["total"] += 1
            row["correct"] += int(e.correct)
        for row in out.values():
            row["accuracy"] = row["correct"] / row["total"]
        return dict(sorted(out.items()))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "buckets": self.buckets(),
            "errors": self.error_counts(),
            "per_toolset": self.per_toolset(),
            "rag_mode": self.rag_mode,
            "seed": self.seed,
            "communication": {
                **self.ledger.summary(),
                "baseline_bytes": self.baseline_bytes,
                "comm_ratio": self.comm_ratio,
                "global_bytes": self.global_bytes,
                "compendium_bytes": dict(sorted(self.compendium_bytes.items())),
            },
            "ledger": [asdict(e) for e in self.ledger.entries],
            "episodes": [e.to_dict() for e in self.episodes],
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def to_table(self) -> str:
        comm = self.to_dict()["communication"]
        ratio = comm["comm_ratio"]
        lines = [
            f"mode            {'RAG' if self.rag_mode else 'context stuffing'}",
            f"seed            {self.seed}",
            f"accuracy        {self.accuracy:.4f}  ({self.correct}/{self.total})",
            f"failed          {self.buckets()['failed']}  {self.error_counts() or ''}".rstrip(),
            f"ledger bytes    {comm['total_bytes']}  ({comm['total_mb']:.6f} MB, {comm['entries']} transmissions)",
            f"baseline bytes  {self.baseline_bytes:.0f}",
            f"comm ratio      {ratio:.4g}" if ratio is not None else "comm ratio      n/a",
            "",
            f"{'toolset':<16}{'correct':>8}{'total':>8}{'accuracy':>10}",
        ]
        for name, row in self.per_toolset().items():
            lines.append(f"{name:<16}{row['correct']:>8}{row['total']:>8}{row['accuracy']:>10.4f}")
        return "\n".join(lines) + "\n"

    def csv_row(self, label: str = "") -> dict:
        return {
            "label": label,
            "rag_mode": self.rag_mode,
            "seed": self.seed,
            "clients": len(self.config.get("clients", [])),
            "accuracy": f"{self.accuracy:.6f}",
            "total": self.total,
            "ledger_bytes": self.ledger.total_bytes,
        }

    def write(self, out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
        """Write ``report.json``, ``report.txt``, ``ledger.jsonl`` and ``accuracy.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": out / f"{stem}.json",
            "table": out / f"{stem}.txt",
            "ledger": out / "ledger.jsonl",
            "csv": out / "accuracy.csv",
        }
        paths["json"].write_text(self.to_json(), encoding="utf-8")
        paths["table"].write_text(self.to_table(), encoding="utf-8")
        paths["ledger"].write_text(self.ledger.to_jsonl(), encoding="utf-8")
        paths["csv"].write_text(rows_to_csv([self.csv_row(stem)]), encoding="utf-8")
        return paths


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


@dataclass
class PairedReport:
    rag: ExperimentReport
    stuffing: ExperimentReport

    @property
    def stuffing_overflows(self) -> int:
        return self.stuffing.error_counts().get("ContextOverflow", 0)

    @property
    def rag_overflows(self) -> int:
        return self.rag.error_counts().get("ContextOverflow", 0)

    def to_dict(self) -> dict:
        return {
            "rag_accuracy": self.rag.accuracy,
            "stuffing_accuracy": self.stuffing.accuracy,
            "accuracy_delta": self.rag.accuracy - self.stuffing.accuracy,
            "rag_context_overflows": self.rag_overflows,
            "stuffing_context_overflows": self.stuffing_overflows,
            "episodes": self.rag.total,
            "reference_note": REFERENCE_NOTE,
            "rag": self.rag.to_dict(),
            "stuffing": self.stuffing.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def to_table(self) -> str:
        lines = [
            f"{'mode':<18}{'accuracy':>10}{'overflows':>11}{'episodes':>10}",
            f"{'RAG':<18}{self.rag.accuracy:>10.4f}{self.rag_overflows:>11}{self.rag.total:>10}",
            f"{'context stuffing':<18}{self.stuffing.accuracy:>10.4f}{self.stuffing_overflows:>11}{self.stuffing.total:>10}",
            "",
            REFERENCE_NOTE,
        ]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "ablation") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"{stem}.json", "table": out / f"{stem}.txt", "csv": out / f"{stem}.csv"}
        paths["json"].write_text(self.to_json(), encoding="utf-8")
        paths["table"].write_text(self.to_table(), encoding="utf-8")
        paths["csv"].write_text(
            rows_to_csv([self.rag.csv_row("rag"), self.stuffing.csv_row("stuffing")]), encoding="utf-8"
        )
        return paths


# -- the pipeline ----------------------------------------------------------------------------


@dataclass
class Backends:
    generator: Generator
    agent: Generator
    simulator: Generator
    judge: Generator
    embedder: Embedder

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> Backends:
        llm = config.llm
        return cls(
            generator=llm.generator("generator"),
            agent=llm.generator("agent"),
            simulator=llm.generator("simulator"),
            judge=llm.generator("judge"),
            embedder=llm.embedder(config.tlu.dim),
        )


def split_instances(
    dataset: ClientDataset, fraction: float, seed: int
) -> tuple[list[ToolUseInstance], list[ToolUseInstance]]:
    """Stable (train, eval) split keyed on a salted hash of the instance id."""
    train, held_out = [], []
    for inst in sorted(dataset.instances, key=lambda i: i.instance_id):
        digest = hashlib.blake2b(f"{seed}:{inst.instance_id}".encode(), digest_size=8).digest()
        u = int.from_bytes(digest, "big") / 2**64
        (held_out if u < fraction else train).append(inst)
    return train, held_out


@dataclass
class PreparedFederation:
    """Everything up to and including indexing; shared by both ablation arms."""

    datasets: list[ClientDataset]
    catalog: dict[str, ToolSpec]
    eval_sets: dict[str, list[ToolUseInstance]]
    compendiums: list[KnowledgeCompendium]
    global_comp: GlobalCompendium
    ledger: CommLedger
    store: VectorStore | None


def load_client_datasets(config: ExperimentConfig, only: str | None = None) -> list[ClientDataset]:
    """Datasets of the configured clients, restricted to their assigned toolsets."""
    datasets = []
    for c in config.clients:
        if only is not None and c.client_id != only:
            continue
        ds = load_dataset(config.resolve(c.dataset))
        if ds.client_id != c.client_id:
            raise ConfigError(f"{c.dataset} belongs to client {ds.client_id!r}, not {c.client_id!r}")
        if c.toolsets:
            missing = set(c.toolsets) - set(ds.toolset_ids)
            if missing:
                raise ConfigError(f"client {c.client_id!r} has no data for toolsets {sorted(missing)}")
            keep = {t.tool_name for t in ds.tools if t.toolset_id in c.toolsets}
            ds = ClientDataset(
                ds.client_id,
                tuple(c.toolsets),
                tuple(i for i in ds.instances if i.gold_tool in keep),
                tuple(t for t in ds.tools if t.toolset_id in c.toolsets),
            )
        datasets.append(ds)
    return datasets


def build_catalog(datasets: Sequence[ClientDataset]) -> dict[str, ToolSpec]:
    catalog: dict[str, ToolSpec] = {}
    for ds in datasets:
        for tool in ds.tools:
            known = catalog.get(tool.tool_name)
            if known is not None and known != tool:
                raise ConfigError(f"tool {tool.tool_name!r} is defined differently by two toolsets")
            catalog[tool.tool_name] = tool
    return dict(sorted(catalog.items()))


def _clocks(config: ExperimentConfig) -> tuple[Callable[[], datetime], Callable[[], float]]:
    if config.llm.mode == "mock":
        return (lambda: FIXED_EPOCH), (lambda: FIXED_EPOCH.timestamp())
    return (lambda: datetime.now(timezone.utc)), time.time


def _template(config: ExperimentConfig) -> PromptTemplate:
    if config.tlu.template:
        return PromptTemplate.from_file(config.resolve(config.tlu.template))
    return PromptTemplate.default()


def build_client_compendium(
    config: ExperimentConfig, dataset: ClientDataset, generator: Generator
) -> KnowledgeCompendium:
    """KCG over the training split; the leakage check covers held-out instances too."""
    train, _ = split_instances(dataset, config.eval.split_fraction, config.eval.seed)
    comp = generate_compendium(
        dataset.with_instances(train),
        generator,
        _template(config),
        examples_per_tool=config.tlu.examples_per_tool,
        parse_retries=config.tlu.parse_retries,
        min_span=config.tlu.min_span,
        seed=config.eval.seed,
        clock=_clocks(config)[0],
    )
    report = leakage_check(comp, dataset, config.tlu.min_span)
    if not report.ok:
        worst = max(report.violations, key=lambda v: v.length)
        raise LeakageDetected(worst.tool_name, worst.span)
    return comp


def prepare_federation(
    config: ExperimentConfig, backends: Backends, with_index: bool = True
) -> PreparedFederation:
    datasets = load_client_datasets(config)
    catalog = build_catalog(datasets)
    ledger_clock = _clocks(config)[1]
    eval_sets = {
        ds.client_id: split_instances(ds, config.eval.split_fraction, config.eval.seed)[1] for ds in datasets
    }
    with ThreadPoolExecutor(max_workers=config.llm.parallelism) as pool:
        compendiums = list(
            pool.map(lambda ds: build_client_compendium(config, ds, backends.generator), datasets)
        )

    if config.federation.transport == "http":
        transport = HttpTransport(config.federation.server, timeout=config.federation.deadline)
        try:
            clients = [FederatedClient(c.client_id, c) for c in compendiums]
            global_comp, ledger = run_round(clients, transport, config.federation.deadline, ledger_clock)
        finally:
            transport.close()
    else:
        global_comp, ledger, _ = run_simulated_round(compendiums, config.federation.deadline, ledger_clock)

    store = None
    if with_index:
        store = build_index(chunk_compendium(global_comp), backends.embedder, config.llm.parallelism)
    return PreparedFederation(datasets, catalog, eval_sets, compendiums, global_comp, ledger, store)


def _run_episode(
    inst: ToolUseInstance,
    client_id: str,
    prepared: PreparedFederation,
    config: ExperimentConfig,
    backends: Backends,
    rag: bool,
) -> EpisodeTrace:
    gold_spec = prepared.catalog[inst.gold_tool]
    trace = EpisodeTrace(inst.instance_id, client_id, gold_spec.toolset_id, inst.instruction)
    agent_cfg = AgentConfig(
        k=config.tlu.k,
        budget=config.tlu.budget,
        retries=config.tlu.agent_retries,
        seed=config.eval.seed,
    )
    try:
        if rag:
            assert prepared.store is not None
            answer = run_agent(
                inst.instruction, prepared.store, backends.agent, backends.embedder, prepared.catalog, agent_cfg
            )
            trace.retrieved_chunk_ids = [r.chunk.chunk_id for r in answer.retrieved]
        else:
            answer = run_agent_stuffed(
                inst.instruction, prepared.global_comp, backends.agent, prepared.catalog, agent_cfg
            )
    except (ContextOverflow, UnparseableAgentOutput, TransportError) as exc:
        trace.error = type(exc).__name__
        return trace

    trace.agent_call = answer.call.to_dict()
    trace.attempts = answer.attempts
    trace.prompt_tokens = answer.prompt_tokens
    try:
        called_spec = prepared.catalog.get(answer.call.tool_name)
        if called_spec is None:
            trace.simulator_response = json.dumps(
                {"error": "unknown_tool", "tool": answer.call.tool_name}, sort_keys=True
            )
        else:
            trace.simulator_response = simulate_tool(
                called_spec, answer.call, config.eval.simulator_mode, backends.simulator, config.eval.seed
            )
        trace.verdict = judge_episode(
            trace, inst, config.eval.judge_mode, backends.judge, gold_spec, seed=config.eval.seed
        )
    except (TransportError, UnparseableJudgeOutput) as exc:
        trace.error = type(exc).__name__
        trace.verdict = None
    return trace


def _evaluate(
    prepared: PreparedFederation, config: ExperimentConfig, backends: Backends, rag: bool
) -> list[EpisodeTrace]:
    jobs = [
        (inst, client_id)
        for client_id in sorted(prepared.eval_sets)
        for inst in prepared.eval_sets[client_id]
    ]
    random.Random(config.eval.seed).shuffle(jobs)
    with ThreadPoolExecutor(max_workers=config.llm.parallelism) as pool:
        traces = list(
            pool.map(lambda job: _run_episode(job[0], job[1], prepared, config, backends, rag), jobs)
        )
    return sorted(traces, key=lambda t: (t.client_id, t.instance_id))


def _baseline_model(config: ExperimentConfig) -> BaselineCostModel:
    b = config.baseline
    return BaselineCostModel(
        param_count=b.param_count,
        bytes_per_param=b.bytes_per_param,
        rounds=b.rounds,
        clients=b.clients or len(config.clients),
    )


def _report(
    config: ExperimentConfig, prepared: PreparedFederation, traces: list[EpisodeTrace], rag: bool
) -> ExperimentReport:
    snapshot = config.snapshot()
    snapshot["eval"]["rag"] = rag
    return ExperimentReport(
        config=snapshot,
        rag_mode=rag,
        seed=config.eval.seed,
        episodes=traces,
        ledger=prepared.ledger,
        baseline_bytes=baseline_comm_bytes(_baseline_model(config)),
        global_bytes=prepared.global_comp.byte_size,
        compendium_bytes={c.client_id: c.byte_size for c in prepared.compendiums},
    )


def run_experiment(config: ExperimentConfig, backends: Backends | None = None) -> ExperimentReport:
    """Full pipeline for ``config.eval.rag``; deterministic under mock backends."""
    backends = backends or Backends.from_config(config)
    rag = config.eval.rag
    prepared = prepare_federation(config, backends, with_index=rag)
    return _report(config, prepared, _evaluate(prepared, config, backends, rag), rag)


def compare_rag_ablation(config: ExperimentConfig, backends: Backends | None = None) -> PairedReport:
    """Same federation, same seed, evaluated with and without retrieval."""
    backends = backends or Backends.from_config(config)
    prepared = prepare_federation(config, backends, with_index=True)
    rag = _report(config, prepared, _evaluate(prepared, config, backends, True), True)
    stuffed = _report(config, prepared, _evaluate(prepared, config, backends, False), False)
    return PairedReport(rag, stuffed)


__all__ = [
    "Backends",
    "EpisodeTrace",
    "ExperimentReport",
    "JudgeVerdict",
    "PairedReport",
    "compare_rag_ablation",
    "judge_episode",
    "run_experiment",
    "simulate_tool",
    "split_instances",
    "structural_verdict",
]
