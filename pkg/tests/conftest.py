import numpy as np
import pytest

from vemfuse.fixtures import generate_split_signal, random_graph, tiny_graph
from vemfuse.kg import KnowledgeGraph, TextStore, TripleSplit, augment_inverse


@pytest.fixture
def toy():
    """Augmented 6-entity, 3-relation graph with text."""
    entities = ["red apple", "green pear", "blue plum", "yellow lemon", "orange fig", "black olive"]
    relations = ["grows beside", "ripens after", "sold with"]
    train = np.array([[0, 0, 1], [1, 0, 2], [2, 1, 3], [3, 1, 4], [4, 2, 5], [5, 2, 0],
                      [0, 1, 3], [1, 2, 4]])
    valid = np.array([[2, 0, 4]])
    test = np.array([[3, 2, 1], [0, 2, 2]])
    text = TextStore(entities, relations, max_len=12)
    g = KnowledgeGraph(entities, relations, train, text)
    return augment_inverse(g, TripleSplit(train, valid, test))


@pytest.fixture(scope="session")
def split_signal():
    return generate_split_signal()


@pytest.fixture
def tiny():
    return tiny_graph()


@pytest.fixture
def rgraph():
    return random_graph(60, 12, 5, seed=3)


_acceptance: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the lines are repeated in the terminal summary."""
    def record(number: int, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _acceptance[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_acceptance):
            terminalreporter.write_line(_acceptance[n])
