"""Hypothesis strategies shared by the property tests."""

from __future__ import annotations

from hypothesis import assume
from hypothesis import strategies as st

from fical.kcg import KnowledgeCompendium, ToolKnowledgeEntry, _is_marker

identifiers = st.from_regex(r"[a-z][a-z0-9_]{0,11}", fullmatch=True)

_line_chars = st.characters(blacklist_categories=("Cs",), blacklist_characters="\n")
_lines = st.text(_line_chars, max_size=30)
section_text = (
    st.lists(_lines, min_size=1, max_size=4)
    .map("\n".join)
    .filter(lambda t: t.strip())
)


@st.composite
def entries(draw, name=None) -> ToolKnowledgeEntry:
    tool = name if name is not None else draw(identifiers)
    texts = [draw(section_text) for _ in range(4)]
    # a drawn line may happen to look like a marker
    assume(not any(_is_marker(line) for t in texts for line in t.split("\n")))
    return ToolKnowledgeEntry(tool, *texts)


@st.composite
def entry_lists(draw, min_size=1, max_size=5) -> list[ToolKnowledgeEntry]:
    names = draw(st.lists(identifiers, min_size=min_size, max_size=max_size, unique=True))
    return [draw(entries(n)) for n in names]


@st.composite
def compendiums(draw, client_id=None) -> KnowledgeCompendium:
    cid = client_id if client_id is not None else draw(identifiers)
    return KnowledgeCompendium(cid, tuple(draw(entry_lists(max_size=3))), "2024-01-01T00:00:00+00:00", "mock:test")


@st.composite
def compendium_sets(draw, min_size=1, max_size=6) -> list[KnowledgeCompendium]:
    ids = draw(st.lists(identifiers, min_size=min_size, max_size=max_size, unique=True))
    return [draw(compendiums(cid)) for cid in ids]
