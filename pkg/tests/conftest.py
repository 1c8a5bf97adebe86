import json

import pytest

from anylink.kb import Entity, KnowledgeBase, Mention


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture
def adams():
    return Entity.from_pairs("Q42", [("name", "Douglas Adams"), ("occupation", "author")])


@pytest.fixture
def small_kb():
    return KnowledgeBase.from_entities("kb", [
        Entity.from_pairs("e1", [("name", "Ada Lovelace"), ("field", "math")]),
        Entity.from_pairs("e2", [("name", "Alan Turing"), ("field", "computing"), ("born", "1912")]),
        Entity.from_pairs("e3", [("name", "Grace Hopper")]),
    ])


def mention(mid, gold, kb_id="kb", doc="d0", surface="x", left="", right=""):
    return Mention(mid, doc, surface, left, right, gold, kb_id)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
