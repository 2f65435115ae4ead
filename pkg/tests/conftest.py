from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fical.demo import write_workspace  # noqa: E402
from fical.domain import load_dataset  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def dog_dataset():
    return load_dataset(FIXTURES / "dog_toolset.jsonl")


@pytest.fixture
def dog_tools(dog_dataset):
    return {t.tool_name: t for t in dog_dataset.tools}


@pytest.fixture(scope="session")
def demo_workspace(tmp_path_factory) -> Path:
    """Five clients, five toolsets, sixty instances each; returns config.toml."""
    return write_workspace(tmp_path_factory.mktemp("demo"))


@pytest.fixture
def small_workspace(tmp_path) -> Path:
    return write_workspace(tmp_path, clients=3, instances=24)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
