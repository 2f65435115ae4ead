"""Knowledge compendium generation.

A client turns its private tool-use examples into a compendium: for every tool
it has used, four prose sections (description, application scenarios,
precautions, coordination with other tools). The compendium is what leaves the
client, so it is checked for verbatim copies of private text before upload.

Canonical layout of one entry::

    ## TOOL: <tool_name>
    ### Description
    ...
    ### Application Scenarios
    ...
    ### Precautions
    ...
    ### Coordination
    ...
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from .domain import ClientDataset, ToolSpec, is_identifier
from .errors import (
    CompendiumParseError,
    EmptyDataset,
    GenerationFailed,
    LeakageDetected,
    MissingSection,
    MissingTool,
)
from .gateway import KCG_TEMPERATURE, ChatRequest, Generator

log = logging.getLogger(__name__)

SECTIONS: tuple[tuple[str, str], ...] = (
    ("description", "Description"),
    ("application_scenarios", "Application Scenarios"),
    ("precautions", "Precautions"),
    ("coordination", "Coordination"),
)
SECTION_KEYS = tuple(k for k, _ in SECTIONS)
_TITLE_TO_KEY = {title.lower(): key for key, title in SECTIONS}

TOOL_MARKER_RE = re.compile(r"^\s*##\s*tool\s*:\s*(\S+)\s*$", re.IGNORECASE)
SECTION_MARKER_RE = re.compile(
    r"^\s*###\s*(description|application\s+scenarios|precautions|coordination)\s*:?\s*$",
    re.IGNORECASE,
)

COMPENDIUM_MAGIC = "# FICAL KNOWLEDGE COMPENDIUM"
COMPENDIUM_VERSION = 1

DEFAULT_EXAMPLES_PER_TOOL = 5
DEFAULT_MIN_SPAN = 40
DEFAULT_PARSE_RETRIES = 3

KCG_SYSTEM_PROMPT = (
    "You distill worked examples into reusable, privacy-safe tool documentation."
)
FORMAT_REMINDER = (
    "\n\nREMINDER: your previous answer could not be used ({error}). Reply with one "
    "'## TOOL: <name>' block per tool, each containing the four headings "
    "'### Description', '### Application Scenarios', '### Precautions' and "
    "'### Coordination', each followed by non-empty text."
)


def _is_marker(line: str) -> bool:
    return bool(TOOL_MARKER_RE.match(line) or SECTION_MARKER_RE.match(line))


def _section_key(title: str) -> str:
    return _TITLE_TO_KEY[" ".join(title.lower().split())]


@dataclass(frozen=True)
class ToolKnowledgeEntry:
    tool_name: str
    description: str
    application_scenarios: str
    precautions: str
    coordination: str

    def __post_init__(self) -> None:
        if not is_identifier(self.tool_name):
            raise ValueError(f"invalid tool name {self.tool_name!r}")
        for key in SECTION_KEYS:
            text = getattr(self, key).strip()
            if not text:
                raise ValueError(f"{self.tool_name}: section {key} is empty")
            if any(_is_marker(line) for line in text.split("\n")):
                raise ValueError(f"{self.tool_name}: section {key} contains a marker line")
            object.__setattr__(self, key, text)

    def section(self, key: str) -> str:
        return getattr(self, key)


def render_entries(entries: Sequence[ToolKnowledgeEntry]) -> str:
    """Canonical text for a sequence of entries."""
    blocks = []
    for e in entries:
        parts = [f"## TOOL: {e.tool_name}"]
        for key, title in SECTIONS:
            parts.append(f"### {title}\n{e.section(key)}\n")
        blocks.append("\n".join(parts))
    return "\n".join(blocks)


def parse_compendium(raw: str, expected_tools: Sequence[str]) -> list[ToolKnowledgeEntry]:
    """Extract one entry per expected tool from generator output.

    Markers are matched case-insensitively and text outside tool blocks is
    ignored. Blocks for tools that were not expected are dropped with a
    warning; entries come back in ``expected_tools`` order.
    """
    blocks: dict[str, dict[str, list[str]]] = {}
    current_tool: str | None = None
    current_section: str | None = None
    skipping = False

    for line in raw.split("\n"):
        m = TOOL_MARKER_RE.match(line)
        if m:
            name = m.group(1)
            skipping = name in blocks
            if skipping:
                log.warning("duplicate block for tool %r ignored", name)
            else:
                blocks[name] = {}
            current_tool, current_section = name, None
            continue
        if current_tool is None or skipping:
            continue
        m = SECTION_MARKER_RE.match(line)
        if m:
            # a repeated heading continues the first occurrence
            current_section = _section_key(m.group(1))
            blocks[current_tool].setdefault(current_section, [])
            continue
        if current_section is not None:
            blocks[current_tool][current_section].append(line)

    surplus = sorted(set(blocks) - set(expected_tools))
    if surplus:
        log.warning("ignoring compendium blocks for unexpected tools: %s", ", ".join(surplus))

    entries = []
    for name in expected_tools:
        if name not in blocks:
            raise MissingTool(name)
        sections = blocks[name]
        texts = {}
        for key in SECTION_KEYS:
            body = "\n".join(sections.get(key, ())).strip()
            if not body:
                raise MissingSection(name, key)
            texts[key] = body
        entries.append(ToolKnowledgeEntry(tool_name=name, **texts))
    return entries


@dataclass(frozen=True)
class KnowledgeCompendium:
    client_id: str
    entries: tuple[ToolKnowledgeEntry, ...]
    generated_at: str
    generator_fingerprint: str
    byte_size: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        if not is_identifier(self.client_id):
            raise ValueError(f"invalid client id {self.client_id!r}")
        if not self.entries:
            raise ValueError("a compendium needs at least one entry")
        for value in (self.generated_at, self.generator_fingerprint):
            if "\n" in value or value != value.strip():
                raise ValueError(f"header value {value!r} must be a trimmed single line")
        names = [e.tool_name for e in self.entries]
        if len(names) != len(set(names)):
            raise ValueError("duplicate tool entries in compendium")
        object.__setattr__(self, "byte_size", len(self.to_bytes()))

    @property
    def tool_names(self) -> list[str]:
        return [e.tool_name for e in self.entries]

    def to_text(self) -> str:
        header = "\n".join(
            [
                COMPENDIUM_MAGIC,
                f"format_version: {COMPENDIUM_VERSION}",
                f"client_id: {self.client_id}",
                f"generated_at: {self.generated_at}",
                f"generator: {self.generator_fingerprint}",
                f"tools: {','.join(self.tool_names)}",
            ]
        )
        return f"{header}\n\n{render_entries(self.entries)}"

    def to_bytes(self) -> bytes:
        return self.to_text().encode("utf-8")

    @classmethod
    def from_text(cls, text: str) -> KnowledgeCompendium:
        lines = text.split("\n")
        if not lines or lines[0] != COMPENDIUM_MAGIC:
            raise CompendiumParseError("not a knowledge compendium document")
        meta: dict[str, str] = {}
        body_start = len(lines)
        for i, line in enumerate(lines[1:], start=1):
            if TOOL_MARKER_RE.match(line):
                body_start = i
                break
            if line.strip():
                key, sep, value = line.partition(":")
                if not sep:
                    raise CompendiumParseError(f"bad header line {line!r}")
                meta[key.strip()] = value.strip()
        if meta.get("format_version") != str(COMPENDIUM_VERSION):
            raise CompendiumParseError(f"unsupported format_version {meta.get('format_version')!r}")
        try:
            tools = [t for t in meta["tools"].split(",") if t]
            entries = parse_compendium("\n".join(lines[body_start:]), tools)
            return cls(meta["client_id"], tuple(entries), meta["generated_at"], meta["generator"])
        except KeyError as exc:
            raise CompendiumParseError(f"missing header field {exc}") from None
        except ValueError as exc:
            raise CompendiumParseError(str(exc)) from None

    @classmethod
    def from_bytes(cls, data: bytes) -> KnowledgeCompendium:
        try:
            return cls.from_text(data.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CompendiumParseError(f"not UTF-8: {exc}") from None


def serialize_compendium(compendium: KnowledgeCompendium) -> bytes:
    return compendium.to_bytes()


# -- prompt ---------------------------------------------------------------------------


PLACEHOLDERS = ("{{examples}}", "{{tool_list}}", "{{format_instructions}}")

FORMAT_INSTRUCTIONS = """Answer with exactly this layout, one block per tool and nothing else:

## TOOL: <tool name>
### Description
<text>
### Application Scenarios
<text>
### Precautions
<text>
### Coordination
<text>"""


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    version: str

    def __post_init__(self) -> None:
        missing = [p for p in PLACEHOLDERS if p not in self.text]
        if missing:
            raise ValueError(f"template {self.version!r} lacks placeholders {missing}")

    @classmethod
    def from_file(cls, path: str | Path, version: str | None = None) -> PromptTemplate:
        path = Path(path)
        return cls(path.read_text(encoding="utf-8"), version or path.stem)

    @classmethod
    def default(cls) -> PromptTemplate:
        text = resources.files("fical").joinpath("templates/kcg_v1.txt").read_text(encoding="utf-8")
        return cls(text, "kcg-v1")

    def render(self, **values: str) -> str:
        out = self.text
        for name, value in values.items():
            out = out.replace("{{" + name + "}}", value)
        return out


def _format_param(p) -> str:
    bits = [p.kind]
    if p.allowed_values:
        bits[0] = f"enum: {' | '.join(str(v) for v in p.allowed_values)}"
    bits.append("required" if p.required else "optional")
    return f"{p.name} ({'; '.join(bits)})"


def format_tool_list(tools: Sequence[ToolSpec]) -> str:
    lines = []
    for t in tools:
        lines.append(f"- tool: {t.tool_name}")
        lines.append(f"  description: {t.description}")
        params = ", ".join(_format_param(p) for p in t.parameters) or "none"
        lines.append(f"  parameters: {params}")
    return "\n".join(lines)


def select_examples(dataset: ClientDataset, tool_name: str, limit: int):
    matching = sorted(
        (i for i in dataset.instances if i.gold_tool == tool_name), key=lambda i: i.instance_id
    )
    return matching[:limit]


def render_kcg_prompt(
    dataset: ClientDataset,
    template: PromptTemplate | None = None,
    examples_per_tool: int = DEFAULT_EXAMPLES_PER_TOOL,
) -> str:
    if not dataset.instances:
        raise EmptyDataset(f"client {dataset.client_id!r} has no instances")
    template = template or PromptTemplate.default()
    tool_names = dataset.distinct_tools()
    tools = [dataset.tool(n) for n in tool_names]

    lines = []
    n = 0
    for name in tool_names:
        for inst in select_examples(dataset, name, examples_per_tool):
            n += 1
            call = json.dumps(inst.gold_call.to_dict(), sort_keys=True, ensure_ascii=False)
            lines.append(f"Example {n}")
            lines.append(f"  request: {' '.join(inst.instruction.split())}")
            lines.append(f"  answer: TOOL_CALL {call}")
    return template.render(
        tool_list=format_tool_list(tools),
        examples="\n".join(lines),
        format_instructions=FORMAT_INSTRUCTIONS,
    )


# -- leakage ------------------------------------------------------------------------


def normalize_text(text: str) -> str:
    return " ".join(text.casefold().split())


@dataclass(frozen=True)
class LeakageViolation:
    tool_name: str
    instance_id: str
    field: str  # "instruction" | "gold_response"
    start: int  # offsets into the normalized source text
    end: int
    span: str

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class LeakageReport:
    min_span: int
    violations: tuple[LeakageViolation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)


def _shared_spans(source: str, target: str, windows: set[str], m: int) -> list[tuple[int, int]]:
    """Maximal spans of ``source`` (length >= m) that occur verbatim in ``target``."""
    spans: list[tuple[int, int]] = []
    last_end = -1
    for i in range(len(source) - m + 1):
        if source[i : i + m] not in windows:
            continue
        j = i + m
        while j < len(source) and source[i : j + 1] in target:
            j += 1
        if j > last_end:
            spans.append((i, j))
            last_end = j
    return spans


def leakage_check(
    compendium: KnowledgeCompendium | Sequence[ToolKnowledgeEntry],
    dataset: ClientDataset,
    min_span: int = DEFAULT_MIN_SPAN,
) -> LeakageReport:
    """Find private text copied into the compendium.

    Both sides are case-folded and whitespace-collapsed; every maximal span of
    at least ``min_span`` characters shared between an instance's instruction
    (or gold response) and an entry's rendered text is reported.
    """
    if min_span < 20:
        raise ValueError("min_span must be at least 20")
    entries = compendium.entries if isinstance(compendium, KnowledgeCompendium) else compendium
    sources = []
    for inst in sorted(dataset.instances, key=lambda i: i.instance_id):
        sources.append((inst.instance_id, "instruction", normalize_text(inst.instruction)))
        if inst.gold_response:
            sources.append((inst.instance_id, "gold_response", normalize_text(inst.gold_response)))

    violations = []
    for entry in entries:
        target = normalize_text(render_entries([entry]))
        windows = {target[k : k + min_span] for k in range(len(target) - min_span + 1)}
        for instance_id, fld, text in sources:
            for start, end in _shared_spans(text, target, windows, min_span):
                violations.append(
                    LeakageViolation(entry.tool_name, instance_id, fld, start, end, text[start:end])
                )
    return LeakageReport(min_span, tuple(violations))


# -- generation ---------------------------------------------------------------------


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


def generate_compendium(
    dataset: ClientDataset,
    gateway: Generator,
    template: PromptTemplate | None = None,
    *,
    examples_per_tool: int = DEFAULT_EXAMPLES_PER_TOOL,
    parse_retries: int = DEFAULT_PARSE_RETRIES,
    min_span: int = DEFAULT_MIN_SPAN,
    seed: int | None = None,
    temperature: float = KCG_TEMPERATURE,
    max_tokens: int = 4096,
    clock: Callable[[], datetime] = _utc_now,
) -> KnowledgeCompendium:
    """Run the generator over a client's dataset and return a checked compendium.

    Unparseable output is retried ``parse_retries`` times with a format
    reminder appended. A compendium that copies private text is never
    returned: :class:`LeakageDetected` is raised instead.
    """
    template = template or PromptTemplate.default()
    prompt = render_kcg_prompt(dataset, template, examples_per_tool)
    expected = dataset.distinct_tools()

    entries = None
    last_error: Exception | None = None
    attempts = 0
    for attempt in range(parse_retries + 1):
        attempts = attempt + 1
        user = prompt if last_error is None else prompt + FORMAT_REMINDER.format(error=last_error)
        req = ChatRequest(KCG_SYSTEM_PROMPT, user, temperature, max_tokens, seed)
        raw = gateway.generate(req)
        try:
            entries = parse_compendium(raw, expected)
            break
        except (CompendiumParseError, ValueError) as exc:
            log.info("client %s: unparseable compendium (attempt %d): %s",
                     dataset.client_id, attempts, exc)
            last_error = exc
    if entries is None:
        raise GenerationFailed(attempts, last_error)

    report = leakage_check(entries, dataset, min_span)
    if not report.ok:
        worst = max(report.violations, key=lambda v: v.length)
        raise LeakageDetected(worst.tool_name, worst.span)

    return KnowledgeCompendium(
        client_id=dataset.client_id,
        entries=tuple(entries),
        generated_at=clock().isoformat(timespec="seconds"),
        generator_fingerprint=f"{gateway.fingerprint}|template={template.version}",
    )
