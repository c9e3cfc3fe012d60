"""Knowledge-graph data model: vocabularies, triple splits, adjacency and
relation statistics.

Triples are stored as ``(n, 3)`` int64 arrays of ``(head, relation, tail)``.
Inverse augmentation maps relation ``r`` to ``r + n_base_relations``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

INVERSE_PREFIX = "inverse of "


class DatasetError(ValueError):
    """Malformed or inconsistent dataset input."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass
class TextStore:
    entity_text: list[str]
    relation_text: list[str]
    max_len: int = 64

    def empty_counts(self) -> dict[str, int]:
        return {"entity": sum(1 for t in self.entity_text if not t.strip()),
                "relation": sum(1 for t in self.relation_text if not t.strip())}


def as_triples(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.int64)
    return arr.reshape(-1, 3)


class KnowledgeGraph:
    """Entities, relations, an indexed training triple store and text.

    The adjacency is built from ``triples`` only (the training split).  Instances
    are treated as immutable once constructed.
    """

    def __init__(self, entities: list[str], relations: list[str], triples,
                 text: TextStore | None = None, n_base_relations: int | None = None,
                 augmented: bool = False):
        self.entities = list(entities)
        self.relations = list(relations)
        self.triples = as_triples(triples)
        self.triples.setflags(write=False)
        self.augmented = augmented
        self.n_base_relations = n_base_relations if n_base_relations is not None else len(relations)
        if text is None:
            text = TextStore(list(self.entities), list(self.relations))
        self.text = text
        self._check_bounds(self.triples)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}
        self._build_index()

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def _check_bounds(self, triples: np.ndarray) -> None:
        if len(triples) == 0:
            return
        if (triples[:, [0, 2]].min() < 0 or triples[:, [0, 2]].max() >= self.n_entities
                or triples[:, 1].min() < 0 or triples[:, 1].max() >= self.n_relations):
            raise DatasetError("triple id out of bounds")

    def _build_index(self) -> None:
        self.out_edges: dict[int, list[tuple[int, int]]] = defaultdict(list)
        self.tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.by_entity: dict[int, list[int]] = defaultdict(list)
        for i, (h, r, t) in enumerate(self.triples.tolist()):
            self.out_edges[h].append((r, t))
            self.tails[(h, r)].add(t)
            self.by_entity[h].append(i)
            if t != h:
                self.by_entity[t].append(i)
        self._triple_set = set(map(tuple, self.triples.tolist()))

    def __contains__(self, triple) -> bool:
        return tuple(int(x) for x in triple) in self._triple_set

    def inverse(self, r: int) -> int:
        if not self.augmented:
            raise ValueError("graph has no inverse relations")
        n = self.n_base_relations
        return r + n if r < n else r - n

    def incident_relations(self, e: int) -> set[int]:
        """Relations leaving ``e`` (on an augmented graph this covers both directions)."""
        return {r for r, _ in self.out_edges.get(e, ())}

    def iter_adjacency(self) -> Iterable[tuple[int, int, int]]:
        for h, edges in self.out_edges.items():
            for r, t in edges:
                yield h, r, t

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.triples).tobytes())
        h.update(json.dumps([self.entities, self.relations]).encode())
        return h.hexdigest()

    def with_triples(self, triples) -> "KnowledgeGraph":
        return KnowledgeGraph(self.entities, self.relations, triples, self.text,
                              self.n_base_relations, self.augmented)


@dataclass
class TripleSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    label_index: dict[tuple[int, int], set[int]] = field(default_factory=dict)
    unseen_entities: set[int] = field(default_factory=set)
    duplicates_removed: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.train = as_triples(self.train)
        self.valid = as_triples(self.valid)
        self.test = as_triples(self.test)
        if not self.label_index:
            self.rebuild_index()

    def rebuild_index(self) -> None:
        idx: dict[tuple[int, int], set[int]] = defaultdict(set)
        for part in (self.train, self.valid, self.test):
            for h, r, t in part.tolist():
                idx[(h, r)].add(t)
        self.label_index = dict(idx)

    def check_disjoint(self) -> None:
        sets = {name: set(map(tuple, getattr(self, name).tolist()))
                for name in ("train", "valid", "test")}
        for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
            leak = sets[a] & sets[b]
            if leak:
                raise DatasetError(f"{len(leak)} triples shared between {a} and {b}")


# ----------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------
def read_triples_tsv(path: str | Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise DatasetError("expected head<TAB>relation<TAB>tail", str(path), lineno)
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def read_text_tsv(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            name, sep, text = line.partition("\t")
            if not sep:
                raise DatasetError("expected name<TAB>text", str(path), lineno)
            out[name] = text
    return out


def write_triples_tsv(path: str | Path, rows: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in rows:
            fh.write(f"{h}\t{r}\t{t}\n")


def write_text_tsv(path: str | Path, mapping: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in mapping.items():
            fh.write(f"{k}\t{v}\n")


def _dedup(rows: list[tuple[str, str, str]]) -> tuple[list[tuple[str, str, str]], int]:
    seen = set()
    out = []
    for row in rows:
        if row not in seen:
            seen.add(row)
            out.append(row)
    return out, len(rows) - len(out)


def load_dataset(train_path, valid_path, test_path, entity_text_path=None,
                 relation_text_path=None, max_len: int = 64
                 ) -> tuple[KnowledgeGraph, TripleSplit]:
    """Load TSV splits and optional text files into a graph and a split.

    Vocabularies are the union over all splits and text files, ordered by
    first appearance (train first).  Entities that never occur in train are
    recorded in ``split.unseen_entities``.
    """
    raw = {"train": read_triples_tsv(train_path),
           "valid": read_triples_tsv(valid_path),
           "test": read_triples_tsv(test_path)}
    dups = {}
    for name in raw:
        raw[name], dups[name] = _dedup(raw[name])
        if dups[name]:
            log.warning("%s: removed %d duplicate triples", name, dups[name])
    ent_text = read_text_tsv(entity_text_path) if entity_text_path else {}
    rel_text = read_text_tsv(relation_text_path) if relation_text_path else {}

    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    for name in ("train", "valid", "test"):
        for h, r, t in raw[name]:
            ent_ids.setdefault(h, len(ent_ids))
            ent_ids.setdefault(t, len(ent_ids))
            rel_ids.setdefault(r, len(rel_ids))
    for e in ent_text:
        ent_ids.setdefault(e, len(ent_ids))
    for r in rel_text:
        rel_ids.setdefault(r, len(rel_ids))
    entities = list(ent_ids)
    relations = list(rel_ids)

    def encode(rows):
        return np.array([(ent_ids[h], rel_ids[r], ent_ids[t]) for h, r, t in rows],
                        dtype=np.int64).reshape(-1, 3)

    parts = {name: encode(rows) for name, rows in raw.items()}
    train_ents = set(parts["train"][:, [0, 2]].reshape(-1).tolist())
    unseen = set(range(len(entities))) - train_ents
    text = TextStore([ent_text.get(e, e) if ent_text else e for e in entities],
                     [rel_text.get(r, r) if rel_text else r for r in relations],
                     max_len=max_len)
    graph = KnowledgeGraph(entities, relations, parts["train"], text)
    split = TripleSplit(parts["train"], parts["valid"], parts["test"],
                        unseen_entities=unseen, duplicates_removed=dups)
    split.check_disjoint()
    return graph, split


# ----------------------------------------------------------------------
# transformations
# ----------------------------------------------------------------------
def _mirror(triples: np.ndarray, n_rel: int) -> np.ndarray:
    if len(triples) == 0:
        return triples.copy()
    return np.stack([triples[:, 2], triples[:, 1] + n_rel, triples[:, 0]], axis=1)


def augment_inverse(graph: KnowledgeGraph, split: TripleSplit
                    ) -> tuple[KnowledgeGraph, TripleSplit]:
    """Add ``(t, r + |R|, h)`` for every ``(h, r, t)`` in the graph and each split."""
    if graph.augmented:
        raise ValueError("graph is already inverse-augmented")
    n_rel = graph.n_relations
    relations = graph.relations + [f"{INVERSE_PREFIX}{r}" for r in graph.relations]
    rel_text = graph.text.relation_text + [f"{INVERSE_PREFIX}{t}" for t in graph.text.relation_text]
    text = TextStore(list(graph.text.entity_text), rel_text, graph.text.max_len)

    def both(t):
        return np.concatenate([t, _mirror(t, n_rel)], axis=0)

    new_graph = KnowledgeGraph(graph.entities, relations, both(graph.triples), text,
                               n_base_relations=n_rel, augmented=True)
    new_split = TripleSplit(both(split.train), both(split.valid), both(split.test),
                            unseen_entities=set(split.unseen_entities),
                            duplicates_removed=dict(split.duplicates_removed))
    return new_graph, new_split


def neighbors(graph: KnowledgeGraph, triple) -> set[tuple[int, int, int]]:
    """Stored triples sharing at least one entity with ``triple`` (excluding itself)."""
    h, r, t = (int(x) for x in triple)
    idx = set(graph.by_entity.get(h, ())) | set(graph.by_entity.get(t, ()))
    out = {tuple(graph.triples[i].tolist()) for i in idx}
    out.discard((h, r, t))
    return out


def sparsify(split: TripleSplit, fraction: float, seed: int) -> TripleSplit:
    """Keep a uniform random ``round(fraction * |train|)`` subset of train."""
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(split.train)
    k = int(round(fraction * n))
    if k == n:
        train = split.train.copy()
    else:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(n, size=k, replace=False))
        train = split.train[keep]
    out = TripleSplit(train, split.valid.copy(), split.test.copy(),
                      unseen_entities=set(split.unseen_entities),
                      duplicates_removed=dict(split.duplicates_removed))
    return out


def relation_jaccard(graph: KnowledgeGraph, relations: Iterable[int] | None = None
                     ) -> tuple[np.ndarray, list[int]]:
    """Jaccard similarity of the head-entity sets of each pair of relations.

    Returns the matrix and the list of relations whose head set is empty
    (their row and column, diagonal included, are zero).
    """
    rels = list(range(graph.n_relations)) if relations is None else list(relations)
    if len(graph.triples) == 0:
        raise ValueError("graph is empty")
    pos = {r: i for i, r in enumerate(rels)}
    mask = np.zeros((len(rels), graph.n_entities), dtype=bool)
    for h, r, _ in graph.triples.tolist():
        if r in pos:
            mask[pos[r], h] = True
    m = mask.astype(np.int64)
    inter = m @ m.T
    sizes = m.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    empty = [rels[i] for i in np.flatnonzero(sizes == 0)]
    return sim, empty


def degree_stats(graph: KnowledgeGraph, bins: int = 10) -> dict:
    """Average out-degree ``|T_train| / |E|`` over base (non-inverse) triples."""
    triples = graph.triples
    if graph.augmented:
        triples = triples[triples[:, 1] < graph.n_base_relations]
    n = max(graph.n_entities, 1)
    counts = np.bincount(triples[:, 0], minlength=graph.n_entities) if len(triples) else np.zeros(graph.n_entities, int)
    hist, edges = np.histogram(counts, bins=bins)
    return {"n_entities": graph.n_entities,
            "n_relations": graph.n_base_relations,
            "n_train": int(len(triples)),
            "average_out_degree": len(triples) / n,
            "histogram": {"counts": hist.tolist(), "edges": edges.tolist()}}


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lower-cased alphanumeric tokens; whitespace and punctuation split."""
    return _TOKEN_RE.findall(text.lower())
