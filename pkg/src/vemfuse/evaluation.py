"""Filtered ranking evaluation (MRR, Hits@k) in both directions, with the
RANDOM tie protocol by default, plus per-relation improvement counts and
top-k dumps.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kg import KnowledgeGraph, TripleSplit

HITS_AT = (1, 3, 10)


@dataclass
class RankResult:
    head: int
    relation: int
    target: int
    rank: int
    top_k: list[tuple[int, float]] = field(default_factory=list)

    @property
    def query(self) -> tuple[int, int]:
        return self.head, self.relation


@dataclass
class Metrics:
    mrr: float
    hits_at: dict[int, float]
    n_queries: int
    forward: dict | None = None
    backward: dict | None = None
    encoder_forwards: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hits_at"] = {str(k): v for k, v in self.hits_at.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def query_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def filtered_rank(scores, target: int, valid_others: Iterable[int] = (),
                  tie_policy: str = "random", seed: int | np.random.Generator = 0) -> float:
    """Rank of ``target`` after removing ``valid_others`` from the candidates.

    ``random`` places the target uniformly among equal-scored candidates;
    ``expected`` returns ``1 + greater + ties / 2``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    others = np.fromiter((int(o) for o in valid_others), dtype=np.int64)
    if target in set(others.tolist()):
        raise ValueError("target is among the filtered entities")
    keep = np.ones(len(s), dtype=bool)
    keep[others] = False
    keep[target] = False
    cand = s[keep]
    st = s[target]
    greater = int(np.count_nonzero(cand > st))
    ties = int(np.count_nonzero(cand == st))
    if tie_policy == "expected":
        return 1.0 + greater + ties / 2.0
    if tie_policy == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return float(1 + greater + (int(rng.integers(ties + 1)) if ties else 0))
    if tie_policy == "optimistic":
        return float(1 + greater)
    raise ValueError(f"unknown tie policy {tie_policy!r}")


def metrics_from_ranks(ranks: Sequence[float]) -> tuple[float, dict[int, float]]:
    r = np.asarray(ranks, dtype=np.float64)
    if len(r) == 0:
        return 0.0, {k: 0.0 for k in HITS_AT}
    return float(np.mean(1.0 / r)), {k: float(np.mean(r <= k)) for k in HITS_AT}


def eval_triples(graph: KnowledgeGraph, split: TripleSplit, which: str) -> np.ndarray:
    """Evaluation triples covering both directions."""
    if which not in ("dev", "valid", "test"):
        raise ValueError(f"unknown split {which!r}")
    part = split.valid if which in ("dev", "valid") else split.test
    if graph.augmented:
        return part
    n = graph.n_relations
    mirror = np.stack([part[:, 2], part[:, 1] + n, part[:, 0]], axis=1)
    return np.concatenate([part, mirror])


def evaluate(model, graph: KnowledgeGraph, split: TripleSplit, which: str = "test",
             tie_policy: str = "random", seed: int = 0, batch_size: int = 256,
             triples: np.ndarray | None = None, top_k: int = 0,
             limit: int | None = None) -> tuple[Metrics, list[RankResult]]:
    """Filtered ranks for every evaluation triple in both directions.

    When the graph is inverse-augmented the split already holds both
    directions; otherwise mirrors are created with ids offset by |R|.  Tie
    breaking draws from a generator seeded by ``(seed, query index)`` so the
    result does not depend on batching.
    """
    trip = eval_triples(graph, split, which) if triples is None else np.asarray(triples).reshape(-1, 3)
    if limit is not None and len(trip) > limit:
        pick = np.sort(np.random.default_rng(seed).choice(len(trip), size=limit, replace=False))
        trip = trip[pick]
    model.invalidate()
    start = getattr(model, "forward_count", 0)
    results: list[RankResult] = []
    n_base = graph.n_base_relations
    for b in range(0, len(trip), batch_size):
        chunk = trip[b:b + batch_size]
        scores = np.asarray(model.score_queries(chunk[:, 0], chunk[:, 1]), dtype=np.float64)
        for j, (h, r, t) in enumerate(chunk.tolist()):
            i = b + j
            others = split.label_index.get((h, r), set()) - {t}
            rank = filtered_rank(scores[j], t, others, tie_policy, query_rng(seed, i))
            tops = []
            if top_k:
                order = np.lexsort((np.arange(len(scores[j])), -scores[j]))[:top_k]
                tops = [(int(e), float(scores[j, e])) for e in order]
            results.append(RankResult(h, r, t, rank, tops))
    model.invalidate()
    ranks = [res.rank for res in results]
    mrr, hits = metrics_from_ranks(ranks)
    fwd = [res.rank for res in results if res.relation < n_base]
    bwd = [res.rank for res in results if res.relation >= n_base]
    sub = {}
    for name, rs in (("forward", fwd), ("backward", bwd)):
        m, h = metrics_from_ranks(rs)
        sub[name] = {"mrr": m, "hits_at": {str(k): v for k, v in h.items()}, "n_queries": len(rs)}
    metrics = Metrics(mrr, hits, len(ranks), sub["forward"], sub["backward"],
                      getattr(model, "forward_count", 0) - start)
    return metrics, results


def improvement_diff(before: Sequence[RankResult], after: Sequence[RankResult],
                     other_after: Sequence[RankResult] | None = None,
                     base_relations: int | None = None) -> dict[int, int] | tuple[dict[int, int], dict[int, int]]:
    """Per-relation counts of queries whose rank strictly improved.

    With ``other_after`` (a second method started from the same ``before``),
    queries improved by both methods are dropped and a pair of count maps is
    returned.  ``base_relations`` folds inverse relations onto their base id.
    """
    def key(res):
        return (res.head, res.relation, res.target)

    def improved(b, a):
        if [key(x) for x in b] != [key(x) for x in a]:
            raise ValueError("rank streams cover different queries")
        return {key(x) for x, y in zip(b, a) if y.rank < x.rank}

    def rel(k):
        r = k[1]
        return r % base_relations if base_relations else r

    first = improved(before, after)
    if other_after is None:
        c = Counter(rel(k) for k in first)
        return dict(sorted(c.items()))
    second = improved(before, other_after)
    shared = first & second
    c1 = Counter(rel(k) for k in first - shared)
    c2 = Counter(rel(k) for k in second - shared)
    return dict(sorted(c1.items())), dict(sorted(c2.items()))


def dump_topk(model, graph: KnowledgeGraph, split: TripleSplit, queries, k: int = 5,
              filtered: bool = False) -> list[dict]:
    """Top-``k`` entities per ``(h, r, t)`` query, score-descending (ties by id),
    with the gold answer's filtered rank (expected tie policy)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    model.invalidate()
    scores = np.asarray(model.score_queries(q[:, 0], q[:, 1]), dtype=np.float64)
    model.invalidate()
    out = []
    for (h, r, t), s in zip(q.tolist(), scores):
        others = split.label_index.get((h, r), set()) - {t}
        order = np.lexsort((np.arange(len(s)), -s))
        if filtered:
            order = np.array([e for e in order if e not in others])
        top = [{"entity": int(e), "name": graph.entities[e], "score": float(s[e])}
               for e in order[:k]]
        out.append({"head": graph.entities[h], "relation": graph.relations[r],
                    "answer": graph.entities[t],
                    "rank": filtered_rank(s, t, others, "expected"), "top": top})
    return out


# ----------------------------------------------------------------------
# export
# ----------------------------------------------------------------------
def write_metrics(path: str | Path, metrics: Metrics) -> None:
    Path(path).write_text(metrics.to_json() + "\n")


def write_ranks(path: str | Path, results: Sequence[RankResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({"head": r.head, "relation": r.relation, "target": r.target,
                                 "rank": r.rank, "top_k": r.top_k}) + "\n")


def read_ranks(path: str | Path) -> list[RankResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            out.append(RankResult(d["head"], d["relation"], d["target"], d["rank"],
                                  [tuple(x) for x in d.get("top_k", [])]))
    return out


def write_matrix_csv(path: str | Path, matrix: np.ndarray, labels: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(labels))
        for name, row in zip(labels, np.asarray(matrix)):
            w.writerow([name] + [f"{v:.6g}" for v in row])


def write_counts_csv(path: str | Path, counts: dict[int, int] | Sequence[dict[int, int]],
                     relation_names: Sequence[str], columns: Sequence[str] = ("improved",)) -> None:
    maps = [counts] if isinstance(counts, dict) else list(counts)
    rels = sorted(set().union(*[m.keys() for m in maps])) if maps else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["relation"] + list(columns))
        for r in rels:
            w.writerow([relation_names[r]] + [m.get(r, 0) for m in maps])
