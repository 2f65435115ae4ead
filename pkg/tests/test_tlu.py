import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fical.domain import ToolCall
from fical.errors import (
    BudgetTooSmall,
    ContextOverflow,
    DimMismatch,
    EmptyIndex,
    FingerprintMismatch,
    UnparseableAgentOutput,
)
from fical.federation import aggregate
from fical.gateway import MockEmbedder, MockGenerator
from fical.kcg import generate_compendium
from fical.tlu import (
    AgentConfig,
    VectorStore,
    approx_tokens,
    assemble_prompt,
    build_index,
    chunk_compendium,
    format_tool_call,
    parse_tool_call,
    retrieve,
    run_agent,
    run_agent_stuffed,
    search_vector,
    stuff_prompt,
)

from oracles import cosine_top_k


@pytest.fixture
def dog_global(dog_dataset):
    comp = generate_compendium(dog_dataset, MockGenerator("compendium-writer"))
    return aggregate([comp])


@pytest.fixture
def dog_store(dog_global):
    return build_index(chunk_compendium(dog_global), MockEmbedder(64))


def test_hand_computable_retrieval():
    store = VectorStore.from_vectors(["a", "b", "c"], np.array([[1, 0], [0, 1], [0.6, 0.8]]))
    hits = search_vector(store, np.array([1.0, 0.0]), 2)
    assert [h.chunk.chunk_id for h in hits] == ["a", "c"]
    assert [h.similarity for h in hits] == pytest.approx([1.0, 0.6])


def test_ties_go_to_smaller_id():
    store = VectorStore.from_vectors(["z", "m", "a"], np.array([[0, 1], [0, 1], [0, 1]]))
    assert [h.chunk.chunk_id for h in search_vector(store, np.array([0.0, 1.0]), 3)] == ["a", "m", "z"]


def test_fewer_results_than_k():
    store = VectorStore.from_vectors(["a"], np.array([[1.0, 0.0]]))
    assert len(search_vector(store, np.array([1.0, 0.0]), 5)) == 1
    assert search_vector(store, np.array([1.0, 0.0]), 0) == []


def test_similarity_is_scale_free():
    store = VectorStore.from_vectors(["a", "b", "z"], np.array([[3.0, 4.0], [0.0, 0.0], [-1.0, 0.0]]))
    hits = search_vector(store, np.array([10.0, 0.0]), 3)
    assert [(h.chunk.chunk_id, round(h.similarity, 12)) for h in hits] == [("a", 0.6), ("b", 0.0), ("z", -1.0)]


def test_dim_mismatch():
    store = VectorStore.from_vectors(["a"], np.array([[1.0, 0.0]]))
    with pytest.raises(DimMismatch):
        search_vector(store, np.array([1.0, 0.0, 0.0]), 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 120), st.integers(2, 16), st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_search_matches_oracle(n, dim, seed, k):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n, dim))
    vecs[rng.integers(0, n, size=n // 3)] = vecs[0]  # duplicate rows force ties
    if seed % 3 == 0:
        vecs[-1] = 0.0
    ids = [f"k{i:04d}" for i in rng.permutation(n)]
    store = VectorStore.from_vectors(ids, vecs)
    q = vecs[0] if seed % 2 else rng.normal(size=dim) * 3.0
    rows = [(c.chunk_id, c.vector.values.tolist()) for c in store.chunks]
    want = cosine_top_k(rows, q.tolist(), k)
    got = search_vector(store, q, k)
    assert [h.chunk.chunk_id for h in got] == [cid for cid, _ in want]


def test_chunks_per_tool_and_ids(dog_global):
    chunks = chunk_compendium(dog_global)
    assert len(chunks) == 12
    assert chunks[0].chunk_id == "dogclient/dog_adoption_search/description"
    assert chunks[0].text.startswith("tool: dog_adoption_search\nsection: Description\n")


def test_store_persistence(dog_store, tmp_path):
    path = dog_store.save(tmp_path / "x.fical-index")
    again = VectorStore.load(path)
    assert again == dog_store
    q = MockEmbedder(64).embed("adopt a dog").values
    assert [h.chunk.chunk_id for h in search_vector(again, q, 5)] == [
        h.chunk.chunk_id for h in search_vector(dog_store, q, 5)
    ]


def test_empty_index_and_fingerprint(dog_store):
    with pytest.raises(EmptyIndex):
        build_index([], MockEmbedder(8))
    with pytest.raises(FingerprintMismatch):
        retrieve(dog_store, "query", 3, MockEmbedder(32))


def test_retrieval_finds_the_right_tool(dog_store):
    hits = retrieve(dog_store, "daily food portion in grams for my dog", 3, MockEmbedder(64))
    assert hits[0].chunk.tool_name == "dog_food_calculator"


# -- prompts -----------------------------------------------------------------------------


def test_prompt_respects_budget(dog_store, dog_tools):
    hits = retrieve(dog_store, "adopt a dog", 12, MockEmbedder(64))
    specs = list(dog_tools.values())
    full = assemble_prompt("adopt a dog", hits, specs, 100_000)
    assert full.included == 12 and full.dropped == 0
    tight = assemble_prompt("adopt a dog", hits, specs, full.tokens - 1)
    assert tight.tokens <= full.tokens - 1 and tight.dropped >= 1
    assert tight.chunk_ids == full.chunk_ids[: tight.included]


def test_budget_too_small(dog_tools):
    with pytest.raises(BudgetTooSmall):
        assemble_prompt("q", [], list(dog_tools.values()), 10)


def test_stuffing_overflows(dog_global, dog_tools):
    with pytest.raises(ContextOverflow) as exc:
        stuff_prompt("q", dog_global, list(dog_tools.values()), 500)
    assert exc.value.required > 500
    text = stuff_prompt("q", dog_global, list(dog_tools.values()), 100_000)
    assert dog_global.to_text() in text


def test_approx_tokens():
    assert [approx_tokens(s) for s in ("", "a", "abcd", "abcde")] == [0, 1, 1, 2]


@pytest.mark.parametrize(
    "text,expected",
    [
        ('TOOL_CALL {"tool": "x", "arguments": {"a": 1}}', ("x", {"a": 1})),
        ('Sure!\nTOOL_CALL: {"tool": "x"} trailing', ("x", {})),
        ('TOOL_CALL {bad} TOOL_CALL {"tool": "y", "arguments": {}}', ("y", {})),
        ('TOOL_CALL {"tool": 3}', None),
        ('TOOL_CALL {"tool": "x", "arguments": [1]}', None),
        ("no call here", None),
    ],
)
def test_parse_tool_call(text, expected):
    call = parse_tool_call(text)
    if expected is None:
        assert call is None
    else:
        assert (call.tool_name, call.arguments) == expected


@given(
    st.from_regex(r"[a-z_]{1,10}", fullmatch=True),
    st.dictionaries(st.text(max_size=5), st.one_of(st.integers(), st.text(max_size=5), st.booleans())),
)
def test_format_parse_round_trip(name, args):
    call = parse_tool_call("noise " + format_tool_call(ToolCall(name, args)) + " more")
    assert (call.tool_name, call.arguments) == (name, args)


# -- the agent ---------------------------------------------------------------------------


def test_agent_answers_with_retrieved_tool(dog_store, dog_tools):
    ans = run_agent(
        'I want to adopt a dog in "Oslo", no older than 4 years.',
        dog_store, MockGenerator("keyword-agent"), MockEmbedder(64), dog_tools, AgentConfig(k=8),
    )
    assert ans.call.tool_name == "dog_adoption_search"
    assert ans.call.arguments == {"city": "Oslo", "max_age": 4}
    assert ans.attempts == 1 and len(ans.retrieved) == 8


def test_agent_retries_then_gives_up(dog_store, dog_tools):
    gen = MockGenerator("no-call")
    with pytest.raises(UnparseableAgentOutput) as exc:
        run_agent("q", dog_store, gen, MockEmbedder(64), dog_tools, AgentConfig(retries=2))
    assert exc.value.attempts == 3 and gen.calls == 3


def test_stuffed_agent(dog_global, dog_tools):
    ans = run_agent_stuffed(
        "Describe the beagle breed size and character.",
        dog_global, MockGenerator("keyword-agent"), dog_tools, AgentConfig(budget=100_000),
    )
    assert ans.call.tool_name == "dog_breed_info" and ans.call.arguments == {"breed": "beagle"}
