"""Named mock behaviours for every LLM role in the pipeline.

Each rule reads only the prompt it is given, so outputs are reproducible and
independent of process or platform. They are deliberately simple: the
compendium writer summarizes what is visible in the generation prompt, the
keyword agent picks the tool whose notes share most words with the query.
"""

from __future__ import annotations

import json
import re
from collections import Counter

from .gateway import ChatRequest, register_rule

_WORD_RE = re.compile(r"[a-z0-9]+")
STOPWORDS = frozenset(
    """a an and are as at be by can could do for from get give have how i in is it me my
    of on or please show tell that the this to what which with you your would about
    find need want some any all list""".split()
)


def content_words(text: str) -> list[str]:
    return [w for w in _WORD_RE.findall(text.lower()) if w not in STOPWORDS and len(w) > 2]


# -- compendium writers ---------------------------------------------------------------------

_TOOL_RE = re.compile(r"^- tool: (\S+)\n  description: (.*)\n  parameters: (.*)$", re.MULTILINE)
_EXAMPLE_RE = re.compile(r"^  request: (.*)\n  answer: TOOL_CALL (\{.*\})$", re.MULTILINE)


def _kcg_inputs(prompt: str):
    tools = [(m.group(1), m.group(2).strip(), m.group(3).strip()) for m in _TOOL_RE.finditer(prompt)]
    examples: dict[str, list[tuple[str, dict]]] = {}
    for m in _EXAMPLE_RE.finditer(prompt):
        try:
            call = json.loads(m.group(2))
        except json.JSONDecodeError:
            continue
        examples.setdefault(call.get("tool", ""), []).append((m.group(1), call.get("arguments", {})))
    return tools, examples


def _keywords(name: str, examples: list[tuple[str, dict]], limit: int = 12) -> list[str]:
    counts: Counter[str] = Counter()
    for request, args in examples:
        counts.update(set(content_words(request)))
        for value in args.values():
            if isinstance(value, str):
                counts.update(set(content_words(value)))
    counts.update(content_words(name.replace("_", " ")))
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    return sorted(ranked[:limit])


def _entry_sections(name, description, params, examples, others) -> dict[str, str]:
    keywords = _keywords(name, examples)
    desc = description.rstrip(".")
    sections = {
        "Description": f"{name}: {desc}. The tool answers with a structured record built from its parameters.",
        "Application Scenarios": (
            f"Call {name} when a request is about {', '.join(keywords) or 'its subject'}. "
            f"It fits requests that can be answered by: {desc.lower()}."
        ),
        "Precautions": (
            f"Parameters: {params}. Always supply every required parameter, use only the listed "
            "values for enum parameters and pass numbers as plain numerals."
        ),
        "Coordination": (
            f"Can be chained with {', '.join(others)}; call {name} first when its result is needed "
            "as input for the next call."
            if others
            else f"{name} works on its own; no other tool needs to run before it."
        ),
    }
    return sections


def _write_compendium(prompt: str, leak: bool = False, drop: str | None = None) -> str:
    tools, examples = _kcg_inputs(prompt)
    names = [t[0] for t in tools]
    blocks = []
    for name, description, params in tools:
        exs = examples.get(name, [])
        sections = _entry_sections(name, description, params, exs, [n for n in names if n != name])
        if leak and exs:
            sections["Application Scenarios"] += f' A typical request reads: "{exs[0][0]}"'
        lines = [f"## TOOL: {name}"]
        for title, text in sections.items():
            if title == drop:
                continue
            lines += [f"### {title}", text, ""]
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


@register_rule("compendium-writer")
def compendium_writer(req: ChatRequest) -> str:
    return _write_compendium(req.user_prompt)


@register_rule("leaky-writer")
def leaky_writer(req: ChatRequest) -> str:
    return _write_compendium(req.user_prompt, leak=True)


@register_rule("truncated-writer")
def truncated_writer(req: ChatRequest) -> str:
    return _write_compendium(req.user_prompt, drop="Precautions")


# -- agents ---------------------------------------------------------------------------------

_QUERY_RE = re.compile(r"^QUERY: (.*)$", re.MULTILINE)
_SIGNATURE_RE = re.compile(r"^- (\{.*\})$", re.MULTILINE)
_NAMED_RE = re.compile(r"(?:## TOOL:|tool:|\"tool\":)\s*\"?([A-Za-z0-9_.\-]+)", re.IGNORECASE)
_IDENT_RE = re.compile(r"\b\w+_\w+\b")
_NOTE_SPLIT_RE = re.compile(r"^(?:## TOOL:|(?:\[\d+\] )?tool:)\s*(\S+)", re.MULTILINE | re.IGNORECASE)


def prompt_query(prompt: str) -> str:
    m = _QUERY_RE.search(prompt)
    return m.group(1).strip() if m else ""


def prompt_signatures(prompt: str) -> list[dict]:
    sigs = []
    for m in _SIGNATURE_RE.finditer(prompt):
        try:
            sig = json.loads(m.group(1))
        except json.JSONDecodeError:
            continue
        if isinstance(sig, dict) and "tool" in sig:
            sigs.append(sig)
    return sigs


def _call(tool: str, arguments: dict) -> str:
    return "TOOL_CALL " + json.dumps({"tool": tool, "arguments": arguments}, sort_keys=True)


@register_rule("first-tool")
def first_tool(req: ChatRequest) -> str:
    m = _NAMED_RE.search(req.user_prompt)
    return _call(m.group(1) if m else "unknown", {})


@register_rule("no-call")
def no_call(req: ChatRequest) -> str:
    return "I would need to look that up."


def _notes_by_tool(prompt: str) -> dict[str, str]:
    # notes end where the signature list or the query begins
    stop = min((m.start() for m in (_SIGNATURE_RE.search(prompt), _QUERY_RE.search(prompt)) if m), default=len(prompt))
    prompt = prompt[:stop]
    notes: dict[str, list[str]] = {}
    marks = list(_NOTE_SPLIT_RE.finditer(prompt))
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(prompt)
        notes.setdefault(m.group(1), []).append(prompt[m.end() : end])
    return {k: " ".join(v) for k, v in notes.items()}


def _extract_arguments(query: str, params: list[dict]) -> dict:
    lowered = query.lower()
    quoted = re.findall(r"\"([^\"]+)\"|'([^']+)'", query)
    strings = [a or b for a, b in quoted]
    numbers = re.findall(r"(?<![\w.])-?\d+(?:\.\d+)?(?!\w|\.\d)", query)
    args: dict = {}
    for p in params:
        kind, name = p.get("kind"), p["name"]
        if kind == "enum":
            for value in p.get("allowed_values", []):
                if re.search(rf"(?<![\w-]){re.escape(str(value).lower())}(?![\w-])", lowered):
                    args[name] = value
                    break
        elif kind in ("integer", "number") and numbers:
            token = numbers.pop(0)
            args[name] = int(token) if kind == "integer" and "." not in token else float(token)
        elif kind == "boolean":
            if re.search(rf"\b{re.escape(name.lower())}\b[^.]*?\b(true|yes)\b", lowered):
                args[name] = True
            elif re.search(rf"\b{re.escape(name.lower())}\b[^.]*?\b(false|no)\b", lowered):
                args[name] = False
        elif kind == "string" and strings:
            args[name] = strings.pop(0)
    return args


@register_rule("keyword-agent")
def keyword_agent(req: ChatRequest) -> str:
    """Pick the listed tool whose notes share most words with the query."""
    prompt = req.user_prompt
    query = prompt_query(prompt)
    sigs = prompt_signatures(prompt)
    if not sigs:
        return _call("unknown", {})
    qwords = set(content_words(query))
    notes = _notes_by_tool(prompt)
    best, best_score = sigs[0], -1
    for sig in sigs:
        name = sig["tool"]
        # other tools' names in the notes (coordination hints) should not vote
        own_notes = _IDENT_RE.sub(" ", notes.get(name, ""))
        text = " ".join([name.replace("_", " "), sig.get("description", ""), own_notes])
        score = len(qwords & set(content_words(text)))
        if score > best_score:
            best, best_score = sig, score
    return _call(best["tool"], _extract_arguments(query, best.get("parameters", [])))


# -- simulator and judge ----------------------------------------------------------------------

_SIM_CALL_RE = re.compile(r"^CALL: (\{.*\})$", re.MULTILINE)
_AGENT_CALL_RE = re.compile(r"^AGENT_CALL: (.*)$", re.MULTILINE)
_GOLD_CALL_RE = re.compile(r"^EXPECTED_CALL: (.*)$", re.MULTILINE)


@register_rule("simulator-echo")
def simulator_echo(req: ChatRequest) -> str:
    m = _SIM_CALL_RE.search(req.user_prompt)
    call = json.loads(m.group(1)) if m else {}
    return json.dumps({"status": "ok", "tool": call.get("tool"), "echo": call.get("arguments", {})}, sort_keys=True)


@register_rule("judge-structural")
def judge_structural(req: ChatRequest) -> str:
    """Answers yes when the agent call equals the expected call as JSON."""
    a = _AGENT_CALL_RE.search(req.user_prompt)
    g = _GOLD_CALL_RE.search(req.user_prompt)
    try:
        same = a is not None and g is not None and json.loads(a.group(1)) == json.loads(g.group(1))
    except json.JSONDecodeError:
        same = False
    return "yes" if same else "no"


@register_rule("judge-yes")
def judge_yes(req: ChatRequest) -> str:
    return "Yes, the agent used the tool correctly."
