"""Tool schemas, labeled tool-use instances and client datasets.

On-disk layout (``format_version: 1``):

* a toolset manifest is one JSON document::

    {"format_version": 1, "toolset_id": "dogs", "tools": [
        {"tool_name": "list_breeds", "description": "...",
         "parameters": [{"name": "size", "kind": "enum", "required": true,
                         "allowed_values": ["small", "large"]}],
         "response_template": "breeds for {size}"}]}

* an instance corpus is line-delimited JSON. The first record is a header
  naming the client and its toolsets, every following line is one instance::

    {"format_version": 1, "client_id": "c1", "toolset_ids": ["dogs"]}
    {"instance_id": "i001", "instruction": "...", "gold_tool": "list_breeds",
     "gold_arguments": {"size": "small"}, "gold_response": null}

Manifests are looked up next to the corpus as ``<toolset_id>.toolset.json``
unless the header lists explicit ``manifests`` paths (relative to the corpus).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import InvalidManifest, MalformedRecord, SchemaViolation, UnknownTool

FORMAT_VERSION = 1
PARAMETER_KINDS = ("string", "integer", "number", "boolean", "enum")
MANIFEST_SUFFIX = ".toolset.json"

_IDENT_RE = re.compile(r"[A-Za-z0-9_.\-]+")


def is_identifier(value: object) -> bool:
    return isinstance(value, str) and _IDENT_RE.fullmatch(value) is not None


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    kind: str
    required: bool = True
    allowed_values: tuple[Any, ...] | None = None
    description: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise InvalidManifest("parameter name must be non-empty")
        if self.kind not in PARAMETER_KINDS:
            raise InvalidManifest(f"parameter {self.name!r}: unsupported kind {self.kind!r}")
        if self.kind == "enum":
            if not self.allowed_values:
                raise InvalidManifest(f"enum parameter {self.name!r} needs allowed_values")
            object.__setattr__(self, "allowed_values", tuple(self.allowed_values))
        elif self.allowed_values is not None:
            raise InvalidManifest(f"allowed_values only apply to enum parameters ({self.name!r})")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind, "required": self.required}
        if self.allowed_values is not None:
            d["allowed_values"] = list(self.allowed_values)
        if self.description:
            d["description"] = self.description
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ParameterSpec:
        if isinstance(d.get("kind"), (dict, list)) or "properties" in d:
            raise InvalidManifest(f"nested parameter {d.get('name')!r} is not supported")
        allowed = d.get("allowed_values")
        return cls(
            name=d["name"],
            kind=d["kind"],
            required=bool(d.get("required", True)),
            allowed_values=tuple(allowed) if allowed is not None else None,
            description=d.get("description", ""),
        )


@dataclass(frozen=True)
class ToolSpec:
    toolset_id: str
    tool_name: str
    description: str
    parameters: tuple[ParameterSpec, ...] = ()
    response_template: str = ""

    def __post_init__(self) -> None:
        if not is_identifier(self.tool_name):
            raise InvalidManifest(f"invalid tool name {self.tool_name!r}")
        object.__setattr__(self, "parameters", tuple(self.parameters))
        names = [p.name for p in self.parameters]
        if len(names) != len(set(names)):
            raise InvalidManifest(f"tool {self.tool_name!r} has duplicate parameter names")

    def parameter(self, name: str) -> ParameterSpec | None:
        for p in self.parameters:
            if p.name == name:
                return p
        return None

    def signature(self) -> dict[str, Any]:
        """Compact, prompt-ready description of the tool's calling convention."""
        return {
            "tool": self.tool_name,
            "description": self.description,
            "parameters": [p.to_dict() for p in self.parameters],
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool_name": self.tool_name,
            "description": self.description,
            "parameters": [p.to_dict() for p in self.parameters],
            "response_template": self.response_template,
        }

    @classmethod
    def from_dict(cls, toolset_id: str, d: Mapping[str, Any]) -> ToolSpec:
        return cls(
            toolset_id=toolset_id,
            tool_name=d["tool_name"],
            description=d.get("description", ""),
            parameters=tuple(ParameterSpec.from_dict(p) for p in d.get("parameters", ())),
            response_template=d.get("response_template", ""),
        )


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments: dict[str, Any] = field(default_factory=dict)
    raw: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"tool": self.tool_name, "arguments": self.arguments}


@dataclass(frozen=True)
class ToolUseInstance:
    instance_id: str
    instruction: str
    gold_tool: str
    gold_arguments: dict[str, Any] = field(default_factory=dict)
    gold_response: str | None = None

    @property
    def gold_call(self) -> ToolCall:
        return ToolCall(self.gold_tool, dict(self.gold_arguments))

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "instruction": self.instruction,
            "gold_tool": self.gold_tool,
            "gold_arguments": self.gold_arguments,
            "gold_response": self.gold_response,
        }


@dataclass(frozen=True)
class ClientDataset:
    client_id: str
    toolset_ids: tuple[str, ...]
    instances: tuple[ToolUseInstance, ...]
    tools: tuple[ToolSpec, ...] = ()

    def __post_init__(self) -> None:
        if not is_identifier(self.client_id):
            raise ValueError(f"invalid client id {self.client_id!r}")
        object.__setattr__(self, "toolset_ids", tuple(self.toolset_ids))
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "tools", tuple(self.tools))

    def tool(self, name: str) -> ToolSpec:
        for t in self.tools:
            if t.tool_name == name:
                return t
        raise UnknownTool(name)

    def distinct_tools(self) -> list[str]:
        """Names of the tools used by at least one instance, sorted."""
        return sorted({inst.gold_tool for inst in self.instances})

    def with_instances(self, instances: Iterable[ToolUseInstance]) -> ClientDataset:
        return ClientDataset(self.client_id, self.toolset_ids, tuple(instances), self.tools)


# -- validation -----------------------------------------------------------------


@dataclass(frozen=True)
class ValidationIssue:
    kind: str  # MissingRequired | UnknownParameter | TypeMismatch | InvalidEnumValue
    parameter: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind}({self.parameter!r})" + (f": {self.detail}" if self.detail else "")


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(self.issues)

    def __iter__(self):
        return iter(self.issues)

    def __len__(self) -> int:
        return len(self.issues)

    def kinds(self) -> list[tuple[str, str]]:
        return [(i.kind, i.parameter) for i in self.issues]


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def kind_matches(kind: str, value: Any) -> bool:
    if kind == "string":
        return isinstance(value, str)
    if kind == "integer":
        if isinstance(value, bool):
            return False
        if isinstance(value, int):
            return True
        return isinstance(value, float) and math.isfinite(value) and value.is_integer()
    if kind == "number":
        return _is_number(value)
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "enum":
        return isinstance(value, (str, int, float, bool))
    return False


def validate_tool_call(call: ToolCall, spec: ToolSpec) -> ValidationReport:
    """Check a call's arguments against a tool's parameter list.

    The report is empty when the call is valid. A call naming a different
    tool is reported as a single ``WrongTool`` issue.
    """
    issues: list[ValidationIssue] = []
    if call.tool_name != spec.tool_name:
        issues.append(ValidationIssue("WrongTool", call.tool_name, f"expected {spec.tool_name!r}"))
    args = call.arguments or {}
    for p in spec.parameters:
        if p.required and p.name not in args:
            issues.append(ValidationIssue("MissingRequired", p.name))
    for name in sorted(args):
        p = spec.parameter(name)
        if p is None:
            issues.append(ValidationIssue("UnknownParameter", name))
            continue
        value = args[name]
        if not kind_matches(p.kind, value):
            issues.append(
                ValidationIssue("TypeMismatch", name, f"expected {p.kind}, got {type(value).__name__}")
            )
        elif p.kind == "enum" and not _enum_member(value, p.allowed_values or ()):
            issues.append(ValidationIssue("InvalidEnumValue", name, f"{value!r} not allowed"))
    return ValidationReport(tuple(issues))


def _enum_member(value: Any, allowed: Sequence[Any]) -> bool:
    # bool is an int subclass; keep True from matching 1
    return any(type(value) is type(a) and value == a for a in allowed)


# -- serialization -------------------------------------------------------------


def manifest_to_dict(toolset_id: str, tools: Sequence[ToolSpec]) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "toolset_id": toolset_id,
        "tools": [t.to_dict() for t in tools],
    }


def parse_manifest(doc: Mapping[str, Any]) -> tuple[str, tuple[ToolSpec, ...]]:
    if doc.get("format_version") != FORMAT_VERSION:
        raise InvalidManifest(f"unsupported manifest format_version {doc.get('format_version')!r}")
    toolset_id = doc.get("toolset_id")
    if not toolset_id:
        raise InvalidManifest("manifest lacks toolset_id")
    try:
        tools = tuple(ToolSpec.from_dict(toolset_id, t) for t in doc.get("tools", ()))
    except KeyError as exc:
        raise InvalidManifest(f"toolset {toolset_id!r}: missing field {exc}") from None
    names = [t.tool_name for t in tools]
    if len(names) != len(set(names)):
        raise InvalidManifest(f"toolset {toolset_id!r} has duplicate tool names")
    return toolset_id, tools


def load_manifest(path: str | Path) -> tuple[str, tuple[ToolSpec, ...]]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidManifest(f"{path}: {exc}") from None
    return parse_manifest(doc)


def write_manifest(path: str | Path, toolset_id: str, tools: Sequence[ToolSpec]) -> None:
    Path(path).write_text(
        json.dumps(manifest_to_dict(toolset_id, tools), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def serialize_dataset(dataset: ClientDataset) -> str:
    header = {
        "format_version": FORMAT_VERSION,
        "client_id": dataset.client_id,
        "toolset_ids": list(dataset.toolset_ids),
    }
    lines = [json.dumps(header, ensure_ascii=False)]
    lines.extend(json.dumps(i.to_dict(), ensure_ascii=False) for i in dataset.instances)
    return "\n".join(lines) + "\n"


_INSTANCE_FIELDS = ("instance_id", "instruction", "gold_tool", "gold_arguments")


def parse_dataset(text: str, toolsets: Mapping[str, Sequence[ToolSpec]]) -> ClientDataset:
    """Parse a corpus given the manifests of the toolsets it may reference."""
    header: dict[str, Any] | None = None
    instances: list[ToolUseInstance] = []
    seen_ids: set[str] = set()
    tools: list[ToolSpec] = []
    by_name: dict[str, ToolSpec] = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(lineno, exc.msg) from None
        if not isinstance(rec, dict):
            raise MalformedRecord(lineno, "record is not an object")

        if header is None:
            if rec.get("format_version") != FORMAT_VERSION:
                raise MalformedRecord(lineno, f"unsupported format_version {rec.get('format_version')!r}")
            if not is_identifier(rec.get("client_id")) or not rec.get("toolset_ids"):
                raise MalformedRecord(lineno, "header needs an identifier client_id and toolset_ids")
            header = rec
            for tsid in rec["toolset_ids"]:
                if tsid not in toolsets:
                    raise MalformedRecord(lineno, f"no manifest for toolset {tsid!r}")
                for t in toolsets[tsid]:
                    if t.tool_name in by_name:
                        raise InvalidManifest(f"tool name {t.tool_name!r} appears in two toolsets")
                    by_name[t.tool_name] = t
                    tools.append(t)
            continue

        missing = [f for f in _INSTANCE_FIELDS if f not in rec]
        if missing:
            raise MalformedRecord(lineno, f"missing fields {missing}")
        if not isinstance(rec["gold_arguments"], dict):
            raise MalformedRecord(lineno, "gold_arguments must be an object")
        inst = ToolUseInstance(
            instance_id=str(rec["instance_id"]),
            instruction=rec["instruction"],
            gold_tool=rec["gold_tool"],
            gold_arguments=rec["gold_arguments"],
            gold_response=rec.get("gold_response"),
        )
        if inst.instance_id in seen_ids:
            raise MalformedRecord(lineno, f"duplicate instance_id {inst.instance_id!r}")
        seen_ids.add(inst.instance_id)
        spec = by_name.get(inst.gold_tool)
        if spec is None:
            raise UnknownTool(inst.gold_tool)
        report = validate_tool_call(inst.gold_call, spec)
        if report:
            issue = report.issues[0]
            raise SchemaViolation(inst.instance_id, issue.parameter, issue.kind)
        instances.append(inst)

    if header is None:
        raise MalformedRecord(1, "missing header record")
    return ClientDataset(
        client_id=str(header["client_id"]),
        toolset_ids=tuple(header["toolset_ids"]),
        instances=tuple(instances),
        tools=tuple(tools),
    )


def _manifest_paths(path: Path, header: Mapping[str, Any], manifest_dir: Path | None) -> list[Path]:
    if "manifests" in header:
        return [(path.parent / m) for m in header["manifests"]]
    base = manifest_dir or path.parent
    return [base / f"{tsid}{MANIFEST_SUFFIX}" for tsid in header.get("toolset_ids", ())]


def load_dataset(path: str | Path, manifest_dir: str | Path | None = None) -> ClientDataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    first = next((ln for ln in text.splitlines() if ln.strip()), None)
    if first is None:
        raise MalformedRecord(1, "empty corpus file")
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(1, exc.msg) from None
    if not isinstance(header, dict):
        raise MalformedRecord(1, "header is not an object")

    toolsets: dict[str, tuple[ToolSpec, ...]] = {}
    for mpath in _manifest_paths(path, header, Path(manifest_dir) if manifest_dir else None):
        if not mpath.exists():
            raise InvalidManifest(f"manifest not found: {mpath}")
        tsid, tools = load_manifest(mpath)
        toolsets[tsid] = tools
    return parse_dataset(text, toolsets)


def dump_dataset(dataset: ClientDataset, path: str | Path, write_manifests: bool = True) -> None:
    """Write a corpus file, plus its manifests next to it unless told otherwise."""
    path = Path(path)
    path.write_text(serialize_dataset(dataset), encoding="utf-8")
    if write_manifests:
        for tsid in dataset.toolset_ids:
            tools = [t for t in dataset.tools if t.toolset_id == tsid]
            write_manifest(path.parent / f"{tsid}{MANIFEST_SUFFIX}", tsid, tools)
