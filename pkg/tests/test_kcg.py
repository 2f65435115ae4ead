import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fical.domain import ClientDataset, ToolUseInstance
from fical.errors import CompendiumParseError, GenerationFailed, LeakageDetected, MissingSection, MissingTool
from fical.gateway import MockGenerator
from fical.kcg import (
    KnowledgeCompendium,
    PromptTemplate,
    ToolKnowledgeEntry,
    generate_compendium,
    leakage_check,
    parse_compendium,
    render_entries,
    render_kcg_prompt,
)

from fical.rules import compendium_writer

from oracles import shared_spans
from strategies import compendiums, entry_lists

RAW = """Some chatter before the answer.
## TOOL: dog_breed_info
### Description
Looks up a breed.
### Application Scenarios
Questions about temperament.
### Precautions
Breed must be one of the listed values.
### Coordination
Use before adoption searches.
"""


def _entry(name="t1", text="x"):
    return ToolKnowledgeEntry(name, text + " d", text + " a", text + " p", text + " c")


def test_parse_ignores_chatter_and_strips():
    (entry,) = parse_compendium(RAW, ["dog_breed_info"])
    assert entry.description == "Looks up a breed."
    assert entry.coordination == "Use before adoption searches."


def test_markers_are_case_insensitive():
    raw = RAW.replace("## TOOL:", "##   tool :").replace("### Precautions", "### PRECAUTIONS:")
    (entry,) = parse_compendium(raw, ["dog_breed_info"])
    assert entry.precautions == "Breed must be one of the listed values."


def test_missing_section_is_named():
    raw = RAW.replace("### Precautions\nBreed must be one of the listed values.\n", "")
    with pytest.raises(MissingSection) as exc:
        parse_compendium(raw, ["dog_breed_info"])
    assert (exc.value.tool_name, exc.value.section) == ("dog_breed_info", "precautions")


def test_missing_tool_is_named():
    with pytest.raises(MissingTool) as exc:
        parse_compendium(RAW, ["dog_breed_info", "dog_food_calculator"])
    assert exc.value.tool_name == "dog_food_calculator"


def test_unexpected_tool_dropped():
    raw = RAW + RAW.replace("dog_breed_info", "cat_facts")
    assert [e.tool_name for e in parse_compendium(raw, ["dog_breed_info"])] == ["dog_breed_info"]


def test_entry_rejects_empty_or_marker_sections():
    with pytest.raises(ValueError):
        ToolKnowledgeEntry("t", "  ", "a", "p", "c")
    with pytest.raises(ValueError):
        ToolKnowledgeEntry("t", "d\n## TOOL: other", "a", "p", "c")


@settings(max_examples=100)
@given(entry_lists())
def test_render_parse_round_trip(entries):
    assert parse_compendium(render_entries(entries), [e.tool_name for e in entries]) == entries


@settings(max_examples=50)
@given(compendiums())
def test_document_round_trip_and_byte_size(comp):
    data = comp.to_bytes()
    assert KnowledgeCompendium.from_bytes(data) == comp
    assert comp.byte_size == len(data)


def test_document_rejects_garbage():
    with pytest.raises(CompendiumParseError):
        KnowledgeCompendium.from_bytes(b"hello")
    with pytest.raises(CompendiumParseError):
        KnowledgeCompendium.from_bytes(b"\xff\xfe")


def test_template_needs_placeholders():
    with pytest.raises(ValueError):
        PromptTemplate("no placeholders here", "v0")


def test_prompt_contains_examples_and_tools(dog_dataset):
    prompt = render_kcg_prompt(dog_dataset, PromptTemplate.default(), examples_per_tool=2)
    assert prompt.count("  request: ") == 6
    for name in dog_dataset.distinct_tools():
        assert f"- tool: {name}" in prompt
    assert "{{" not in prompt


# -- leakage --------------------------------------------------------------------------


def test_leakage_finds_maximal_span(dog_dataset):
    inst = dog_dataset.instances[2]
    entry = _entry("dog_food_calculator", "As one user put it: " + inst.instruction)
    report = leakage_check([entry], dog_dataset, 40)
    assert not report.ok
    spans = {v.span for v in report.violations}
    assert " ".join(inst.instruction.casefold().split()) in spans


def test_leakage_min_span_floor(dog_dataset):
    with pytest.raises(ValueError):
        leakage_check([_entry()], dog_dataset, 19)


_alpha = st.text(st.sampled_from("abcdefghij klmnop"), min_size=60, max_size=160)


@settings(max_examples=60)
@given(_alpha, st.integers(min_value=20, max_value=60), st.data())
def test_leakage_matches_quadratic_oracle(source, m, data):
    start = data.draw(st.integers(0, len(source) - 1))
    length = data.draw(st.integers(0, len(source) - start))
    entry = _entry("t", "|" + source[start : start + length] + "|")
    ds_inst = ToolUseInstance("i1", source, "t")
    ds = ClientDataset("c", ("s",), (ds_inst,))
    got = sorted(v.span for v in leakage_check([entry], ds, m).violations)
    assert got == sorted(shared_spans(source, render_entries([entry]), m))


# -- generation ------------------------------------------------------------------------


def test_generate_with_mock_writer(dog_dataset):
    comp = generate_compendium(dog_dataset, MockGenerator("compendium-writer"), seed=1)
    assert comp.tool_names == dog_dataset.distinct_tools()
    assert comp.generator_fingerprint == "mock:compendium-writer|template=kcg-v1"
    assert leakage_check(comp, dog_dataset).ok


def test_generate_refuses_leaking_output(dog_dataset):
    with pytest.raises(LeakageDetected) as exc:
        generate_compendium(dog_dataset, MockGenerator("leaky-writer"))
    assert len(exc.value.span) >= 40


def test_generate_retries_then_fails(dog_dataset):
    gen = MockGenerator("truncated-writer")
    with pytest.raises(GenerationFailed) as exc:
        generate_compendium(dog_dataset, gen, parse_retries=2)
    assert exc.value.attempts == 3 and gen.calls == 3


def test_generate_recovers_after_reminder(dog_dataset):
    def flaky(req):
        return "not a compendium" if "REMINDER" not in req.user_prompt else compendium_writer(req)

    gen = MockGenerator(flaky, name="flaky")
    comp = generate_compendium(dog_dataset, gen, parse_retries=1)
    assert gen.calls == 2 and len(comp.entries) == 3
