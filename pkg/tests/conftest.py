from pathlib import Path

import pytest

from sdoh_extract.corpus import load_corpus, load_gold

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def table_notes():
    return load_corpus(DATA / "notes.jsonl")


@pytest.fixture
def table_gold():
    return load_gold(DATA / "gold.jsonl")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
