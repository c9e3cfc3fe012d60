import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vemfuse.fixtures import random_graph, random_triples, write_random_dataset
from vemfuse.kg import (INVERSE_PREFIX, DatasetError, KnowledgeGraph, TripleSplit,
                        augment_inverse, degree_stats, load_dataset, neighbors,
                        relation_jaccard, sparsify, tokenize, write_text_tsv, write_triples_tsv)


def write_dataset(d, train, valid=(("a", "r", "b"),), test=(("b", "r", "c"),)):
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        write_triples_tsv(d / f"{name}.txt", rows)
    return d / "train.txt", d / "valid.txt", d / "test.txt"


def test_load_dataset_builds_vocab_in_first_seen_order(tmp_path):
    paths = write_dataset(tmp_path, [("a", "r", "b"), ("b", "s", "c"), ("a", "r", "b")],
                          valid=[("c", "r", "d")], test=[("d", "s", "a")])
    write_text_tsv(tmp_path / "e.txt", {"a": "alpha", "b": "beta", "z": "zeta"})
    g, split = load_dataset(*paths, entity_text_path=tmp_path / "e.txt")
    assert g.entities == ["a", "b", "c", "d", "z"]
    assert g.relations == ["r", "s"]
    assert split.duplicates_removed["train"] == 1
    assert len(split.train) == 2
    assert split.unseen_entities == {3, 4}
    assert g.text.entity_text[:2] == ["alpha", "beta"]
    # entity without a description falls back to its name
    assert g.text.entity_text[2] == "c"
    assert split.label_index[(0, 0)] == {1}


def test_malformed_line_reports_line_number(tmp_path):
    (tmp_path / "train.txt").write_text("a\tr\tb\nbroken line\n")
    write_dataset(tmp_path, [("a", "r", "b")])
    (tmp_path / "train.txt").write_text("a\tr\tb\n\nb\tr\n")
    with pytest.raises(DatasetError, match=r"train.txt:3"):
        load_dataset(tmp_path / "train.txt", tmp_path / "valid.txt", tmp_path / "test.txt")


def test_overlapping_splits_rejected(tmp_path):
    paths = write_dataset(tmp_path, [("a", "r", "b")], valid=[("a", "r", "b")])
    with pytest.raises(DatasetError, match="shared between train and valid"):
        load_dataset(*paths)


def test_out_of_bounds_triples_rejected():
    with pytest.raises(DatasetError):
        KnowledgeGraph(["a"], ["r"], [[0, 0, 1]])


def test_augment_inverse_mirrors_everything(toy):
    g, split = toy
    n = g.n_base_relations
    assert g.augmented and g.n_relations == 2 * n
    base = {tuple(t) for t in g.triples.tolist() if t[1] < n}
    inv = {tuple(t) for t in g.triples.tolist() if t[1] >= n}
    assert inv == {(t, r + n, h) for h, r, t in base}
    assert g.relations[n] == INVERSE_PREFIX + g.relations[0]
    assert g.text.relation_text[n + 1].startswith(INVERSE_PREFIX)
    assert len(split.test) == 4
    assert g.inverse(g.inverse(2)) == 2
    with pytest.raises(ValueError):
        augment_inverse(g, split)


def test_incident_relations_cover_both_directions(toy):
    g, _ = toy
    # entity 1 has (1, 0, 2), (1, 2, 4) and is the tail of (0, 0, 1)
    assert g.incident_relations(1) == {0, 2, 0 + 3}


def test_neighbors_match_brute_force(rgraph):
    rows = [tuple(t) for t in rgraph.triples.tolist()]
    for triple in rows[:20]:
        h, _, t = triple
        expected = {x for x in rows if x != triple and ({x[0], x[2]} & {h, t})}
        assert neighbors(rgraph, triple) == expected


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 400), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_sparsify_size_and_subset(n, frac, seed):
    rows = random_triples(n, 40, 4, seed=1)
    split = TripleSplit(rows, rows[:1], rows[:1])
    out = sparsify(split, frac, seed)
    assert len(out.train) == int(round(frac * n))
    assert set(map(tuple, out.train.tolist())) <= set(map(tuple, rows.tolist()))
    np.testing.assert_array_equal(out.valid, split.valid)
    np.testing.assert_array_equal(sparsify(split, frac, seed).train, out.train)


def test_sparsify_rejects_bad_fraction():
    rows = random_triples(10, 5, 2)
    split = TripleSplit(rows, rows[:1], rows[:1])
    for f in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            sparsify(split, f, 0)
    np.testing.assert_array_equal(sparsify(split, 1.0, 0).train, rows)


def jaccard_oracle(triples, n_rel):
    heads = [set() for _ in range(n_rel)]
    for h, r, _ in triples:
        heads[r].add(h)
    m = np.zeros((n_rel, n_rel))
    for i, j in itertools.product(range(n_rel), repeat=2):
        union = heads[i] | heads[j]
        m[i, j] = len(heads[i] & heads[j]) / len(union) if union else 0.0
    return m


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_relation_jaccard_matches_set_oracle(seed):
    g = random_graph(30, 15, 5, seed=seed)
    sim, empty = relation_jaccard(g)
    np.testing.assert_array_equal(sim, jaccard_oracle(g.triples.tolist(), 5))
    np.testing.assert_array_equal(sim, sim.T)
    for r in range(5):
        assert (sim[r, r] == 1.0) == (r not in empty)


def test_relation_jaccard_reports_empty_relations():
    g = KnowledgeGraph(["a", "b"], ["r", "s"], [[0, 0, 1]])
    sim, empty = relation_jaccard(g)
    assert empty == [1]
    assert sim[1, 1] == 0.0
    with pytest.raises(ValueError):
        relation_jaccard(KnowledgeGraph(["a"], ["r"], np.zeros((0, 3))))


def test_degree_counts_base_triples_only(toy):
    g, _ = toy
    stats = degree_stats(g)
    assert stats["n_train"] == 8
    assert stats["average_out_degree"] == pytest.approx(8 / 6)
    assert sum(stats["histogram"]["counts"]) == 6


def test_content_hash_tracks_triples(rgraph):
    h = rgraph.content_hash()
    assert rgraph.with_triples(rgraph.triples).content_hash() == h
    assert rgraph.with_triples(rgraph.triples[1:]).content_hash() != h


def test_tokenize():
    assert tokenize("The Quick-brown fox, 42!") == ["the", "quick", "brown", "fox", "42"]
    assert tokenize("  ") == []


def test_random_dataset_file_counts(tmp_path):
    paths = write_random_dataset(tmp_path, 1000, seed=0)
    assert sum(1 for _ in open(paths["train"])) == 1000
    g, split = load_dataset(paths["train"], paths["valid"], paths["test"])
    assert len(split.train) == 1000
    assert len(sparsify(split, 0.2, 7).train) == 200
