import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fical.domain import (
    ClientDataset,
    ParameterSpec,
    ToolCall,
    ToolSpec,
    dump_dataset,
    kind_matches,
    load_dataset,
    parse_dataset,
    parse_manifest,
    validate_tool_call,
)
from fical.errors import InvalidManifest, MalformedRecord, UnknownTool

from conftest import FIXTURES


def test_fixture_loads(dog_dataset):
    assert dog_dataset.client_id == "dogclient"
    assert dog_dataset.toolset_ids == ("dogs",)
    assert len(dog_dataset.instances) == 12
    assert dog_dataset.distinct_tools() == ["dog_adoption_search", "dog_breed_info", "dog_food_calculator"]


def test_round_trip_through_disk(dog_dataset, tmp_path):
    dump_dataset(dog_dataset, tmp_path / "c.jsonl")
    again = load_dataset(tmp_path / "c.jsonl")
    assert again == dog_dataset


def test_unknown_tool_lookup(dog_dataset):
    with pytest.raises(UnknownTool) as exc:
        dog_dataset.tool("cat_facts")
    assert exc.value.tool_name == "cat_facts"


def _manifest_text():
    return (FIXTURES / "dogs.toolset.json").read_text()


def _toolsets():
    tsid, tools = parse_manifest(json.loads(_manifest_text()))
    return {tsid: tools}


def test_malformed_line_reports_line_number():
    header = json.dumps({"format_version": 1, "client_id": "c1", "toolset_ids": ["dogs"]})
    with pytest.raises(MalformedRecord) as exc:
        parse_dataset(header + "\n{not json\n", _toolsets())
    assert exc.value.line == 2


def test_instance_with_unknown_gold_tool_rejected():
    header = json.dumps({"format_version": 1, "client_id": "c1", "toolset_ids": ["dogs"]})
    inst = json.dumps({"instance_id": "a", "instruction": "x", "gold_tool": "nope", "gold_arguments": {}})
    with pytest.raises(UnknownTool):
        parse_dataset(header + "\n" + inst + "\n", _toolsets())


def test_duplicate_instance_ids_rejected():
    header = json.dumps({"format_version": 1, "client_id": "c1", "toolset_ids": ["dogs"]})
    inst = json.dumps(
        {"instance_id": "a", "instruction": "x", "gold_tool": "dog_breed_info", "gold_arguments": {"breed": "boxer"}}
    )
    with pytest.raises(MalformedRecord):
        parse_dataset("\n".join([header, inst, inst]), _toolsets())


def test_nested_parameter_rejected():
    doc = json.loads(_manifest_text())
    doc["tools"][0]["parameters"].append({"name": "x", "kind": "object", "properties": {}})
    with pytest.raises(InvalidManifest):
        parse_manifest(doc)


def test_enum_without_values_rejected():
    with pytest.raises(InvalidManifest):
        ParameterSpec("size", "enum")


@pytest.fixture
def adopt(dog_tools):
    return dog_tools["dog_adoption_search"]


def test_valid_call_has_no_issues(adopt):
    assert validate_tool_call(ToolCall("dog_adoption_search", {"city": "Oslo", "max_age": 3}), adopt).ok


def test_missing_required(adopt):
    report = validate_tool_call(ToolCall("dog_adoption_search", {"city": "Oslo"}), adopt)
    assert report.kinds() == [("MissingRequired", "max_age")]


def test_unknown_and_mistyped(adopt):
    call = ToolCall("dog_adoption_search", {"city": 5, "max_age": "3", "colour": "red"})
    kinds = set(validate_tool_call(call, adopt).kinds())
    assert kinds == {("TypeMismatch", "city"), ("TypeMismatch", "max_age"), ("UnknownParameter", "colour")}


def test_enum_value_checked(dog_tools):
    spec = dog_tools["dog_breed_info"]
    report = validate_tool_call(ToolCall("dog_breed_info", {"breed": "corgi"}), spec)
    assert report.kinds() == [("InvalidEnumValue", "breed")]


def test_wrong_tool(dog_tools):
    report = validate_tool_call(ToolCall("dog_breed_info", {"breed": "boxer"}), dog_tools["dog_food_calculator"])
    assert "WrongTool" in [k for k, _ in report.kinds()]


@pytest.mark.parametrize(
    "kind,value,ok",
    [
        ("integer", 3, True),
        ("integer", 3.0, True),
        ("integer", 3.5, False),
        ("integer", True, False),
        ("number", 2, True),
        ("number", float("nan"), False),
        ("boolean", False, True),
        ("boolean", 0, False),
        ("string", "", True),
        ("string", None, False),
    ],
)
def test_kind_matches(kind, value, ok):
    assert kind_matches(kind, value) is ok


_scalar = st.one_of(st.integers(), st.floats(allow_nan=False), st.booleans(), st.text(max_size=8))


@given(st.dictionaries(st.sampled_from(["city", "max_age", "extra", "x"]), _scalar, max_size=4))
def test_validation_is_total_and_reports_each_parameter_once(arguments):
    spec = ToolSpec(
        "t", "tool", "d", (ParameterSpec("city", "string"), ParameterSpec("max_age", "integer", required=False))
    )
    report = validate_tool_call(ToolCall("tool", arguments), spec)
    params = [p for _, p in report.kinds()]
    assert len(params) == len(set(params))
    if "city" in arguments and isinstance(arguments["city"], str) and set(arguments) <= {"city"}:
        assert report.ok


def test_client_dataset_rejects_bad_id():
    with pytest.raises(ValueError):
        ClientDataset("bad id", ("dogs",), ())
