"""Graph densification.

1. Generate unobserved queries ``(e, r, ?)``: pick a random entity, then the
   unconnected relation whose embedding is most cosine-similar to one of the
   relations already incident to ``e``.
2. Attach ``M`` neighbour queries at the same head (same selection rule, new
   relations each time), label them with samples from the text model, and
   lay the resulting triples plus mirrors over the graph as a temporary
   overlay.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .kg import KnowledgeGraph
from .structure import GraphOverlay


class DensifyError(RuntimeError):
    pass


@dataclass
class GeneratedQuery:
    head: int
    relation: int
    similarity_score: float
    neighbor_slots: int = 0


@dataclass
class DensifyStats:
    generated: int = 0
    overlay_edges: int = 0
    neighbors: int = 0
    mean_confidence: float = float("nan")
    isolated_resamples: int = 0
    saturated_skips: int = 0
    short_neighbor_sets: int = 0
    ground_truth_labels: int = 0
    dropped_base_duplicates: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def relation_cosine(emb: np.ndarray) -> np.ndarray:
    e = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    unit = e / np.maximum(norms, 1e-12)
    return unit @ unit.T


def _rank_candidates(cos: np.ndarray, incident: list[int], candidates: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Candidates ordered by max cosine to the incident set, ties by smaller id."""
    score = cos[np.ix_(candidates, incident)].max(axis=1)
    order = np.lexsort((candidates, -score))
    return candidates[order], score[order]


def _pick(candidates: np.ndarray, scores: np.ndarray, rng: np.random.Generator,
          mode: str) -> int:
    if mode == "argmax":
        return 0
    w = np.exp(scores - scores.max())
    return int(rng.choice(len(candidates), p=w / w.sum()))


def generate_queries(graph: KnowledgeGraph, relation_emb: np.ndarray, N: int,
                     rng: np.random.Generator, stats: DensifyStats | None = None,
                     mode: str = "argmax", max_retries: int | None = None
                     ) -> list[GeneratedQuery]:
    """``N`` draws of ``(e, r, ?)`` with ``r`` never incident to ``e`` in the graph."""
    stats = stats if stats is not None else DensifyStats()
    cos = relation_cosine(relation_emb)
    all_rel = np.arange(graph.n_relations)
    retries = max_retries if max_retries is not None else 100 * max(N, 1)
    out: list[GeneratedQuery] = []
    for _ in range(N):
        for _attempt in range(retries + 1):
            e = int(rng.integers(graph.n_entities))
            r1 = sorted(graph.incident_relations(e))
            if r1:
                break
            stats.isolated_resamples += 1
        else:
            raise DensifyError("could not find an entity with incident relations")
        r2 = np.setdiff1d(all_rel, r1)
        if len(r2) == 0:
            stats.saturated_skips += 1
            continue
        cands, scores = _rank_candidates(cos, r1, r2)
        i = _pick(cands, scores, rng, mode)
        r = int(cands[i])
        if r in graph.incident_relations(e):
            raise AssertionError("generated a relation already incident to the head")
        out.append(GeneratedQuery(e, r, float(scores[i])))
    stats.generated += len(out)
    return out


def neighbor_relations(query: GeneratedQuery, graph: KnowledgeGraph,
                       relation_emb: np.ndarray, M: int, rng: np.random.Generator,
                       mode: str = "argmax", cos: np.ndarray | None = None) -> list[int]:
    """Up to ``M`` further unconnected relations for the query's head entity."""
    if M <= 0:
        return []
    cos = relation_cosine(relation_emb) if cos is None else cos
    r1 = sorted(graph.incident_relations(query.head))
    cands = np.setdiff1d(np.arange(graph.n_relations), r1 + [query.relation])
    chosen: list[int] = []
    while cands.size and len(chosen) < M:
        ranked, scores = _rank_candidates(cos, r1, cands)
        r = int(ranked[_pick(ranked, scores, rng, mode)])
        chosen.append(r)
        cands = cands[cands != r]
    return chosen


def sample_labels(probs: np.ndarray, rng: np.random.Generator, top_k: int = 10
                  ) -> tuple[np.ndarray, np.ndarray]:
    """One categorical draw per row, restricted to the row's ``top_k`` entries.

    Returns the sampled ids and their (unrestricted) probabilities.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    k = min(top_k, probs.shape[1])
    labels = np.empty(len(probs), dtype=np.int64)
    conf = np.empty(len(probs))
    for i, row in enumerate(probs):
        top = np.argsort(-row, kind="stable")[:k]
        w = row[top]
        total = w.sum()
        w = w / total if total > 0 else np.full(k, 1.0 / k)
        j = int(top[rng.choice(k, p=w)])
        labels[i] = j
        conf[i] = row[j]
    return labels, conf


def sample_neighbors(query: GeneratedQuery, graph: KnowledgeGraph, relation_emb: np.ndarray,
                     text_model, M: int, rng: np.random.Generator, temperature: float = 1.0,
                     top_k: int = 10, stats: DensifyStats | None = None,
                     mode: str = "argmax") -> list[tuple[int, int, int, float]]:
    """Labelled neighbour triples ``(e, r_j, t_j, confidence)`` for one query."""
    out = sample_neighbors_batch([query], graph, relation_emb, text_model, M, rng,
                                 temperature, top_k, stats, mode)
    return out[0]


def sample_neighbors_batch(queries: list[GeneratedQuery], graph: KnowledgeGraph,
                           relation_emb: np.ndarray, text_model, M: int,
                           rng: np.random.Generator, temperature: float = 1.0,
                           top_k: int = 10, stats: DensifyStats | None = None,
                           mode: str = "argmax") -> list[list[tuple[int, int, int, float]]]:
    """Neighbour sampling for many queries with a single text-model pass."""
    stats = stats if stats is not None else DensifyStats()
    if M < 0:
        raise ValueError("M must be nonnegative")
    cos = relation_cosine(relation_emb)
    slots: list[tuple[int, int, int]] = []
    for qi, q in enumerate(queries):
        rels = neighbor_relations(q, graph, relation_emb, M, rng, mode, cos)
        if len(rels) < M:
            stats.short_neighbor_sets += 1
        q.neighbor_slots = len(rels)
        slots.extend((qi, q.head, r) for r in rels)
    result: list[list[tuple[int, int, int, float]]] = [[] for _ in queries]
    if not slots:
        return result
    heads = np.array([s[1] for s in slots])
    rels = np.array([s[2] for s in slots])
    known = [sorted(graph.tails.get((h, r), ())) for h, r in zip(heads.tolist(), rels.tolist())]
    need = [i for i, k in enumerate(known) if not k]
    labels = np.empty(len(slots), dtype=np.int64)
    conf = np.ones(len(slots))
    if need:
        probs = text_model.predict_q(heads[need], rels[need], temperature)
        lab, c = sample_labels(probs, rng, top_k)
        labels[need] = lab
        conf[need] = c
    for i, k in enumerate(known):
        if k:
            labels[i] = k[int(rng.integers(len(k)))]
            stats.ground_truth_labels += 1
    for (qi, h, r), t, c in zip(slots, labels.tolist(), conf.tolist()):
        result[qi].append((h, r, t, c))
    stats.neighbors += len(slots)
    return result


def build_overlay(graph: KnowledgeGraph, neighbors: list[list[tuple]],
                  stats: DensifyStats | None = None) -> GraphOverlay:
    """Overlay of every sampled neighbour triple and its mirror, deduplicated,
    with base training triples removed.  The base graph is never touched."""
    stats = stats if stats is not None else DensifyStats()
    seen: dict[tuple[int, int, int], float] = {}
    for group in neighbors:
        for item in group:
            h, r, t = int(item[0]), int(item[1]), int(item[2])
            c = float(item[3]) if len(item) > 3 else 1.0
            pairs = [(h, r, t)]
            if graph.augmented:
                pairs.append((t, graph.inverse(r), h))
            for trip in pairs:
                if trip in graph:
                    stats.dropped_base_duplicates += 1
                    continue
                if trip not in seen:
                    seen[trip] = c
    triples = np.array(list(seen), dtype=np.int64).reshape(-1, 3)
    overlay = GraphOverlay(triples, np.array(list(seen.values()), dtype=np.float64))
    stats.overlay_edges += len(overlay)
    if len(overlay):
        stats.mean_confidence = float(np.mean(overlay.confidence))
    return overlay


@dataclass
class DensifiedBatch:
    queries: list[GeneratedQuery]
    overlay: GraphOverlay
    stats: DensifyStats = field(default_factory=DensifyStats)

    @property
    def heads(self) -> np.ndarray:
        return np.array([q.head for q in self.queries], dtype=np.int64)

    @property
    def relations(self) -> np.ndarray:
        return np.array([q.relation for q in self.queries], dtype=np.int64)


def densify(graph: KnowledgeGraph, struct_model, text_model, N: int, M: int,
            rng: np.random.Generator, temperature: float = 1.0, top_k: int = 10,
            mode: str = "argmax") -> DensifiedBatch:
    """Generate ``N`` unobserved queries and their labelled-neighbour overlay."""
    stats = DensifyStats()
    emb = struct_model.relation_embedding()
    queries = generate_queries(graph, emb, N, rng, stats, mode)
    neigh = sample_neighbors_batch(queries, graph, emb, text_model, M, rng,
                                   temperature, top_k, stats, mode)
    overlay = build_overlay(graph, neigh, stats)
    return DensifiedBatch(queries, overlay, stats)
