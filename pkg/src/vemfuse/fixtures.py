"""Deterministic synthetic datasets.

The split-signal generator builds a graph in which one family of held-out
triples follows from path patterns in the training graph (chain rules
``c = p ∘ q`` over hidden groups) while another follows only from tokens in
the head's name (token rules: an attribute word fixes the answer set).
Non-attribute names are drawn from a small shared pool of filler words, so
the text of a structure-rule head says nothing about its group.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kg import KnowledgeGraph, TextStore, TripleSplit, write_text_tsv, write_triples_tsv

_SYLLABLES = ("ka", "lo", "mi", "ru", "te", "va", "no", "si", "pe", "du", "zo", "bi")
ATTRIBUTE_WORDS = (
    ("crimson", "azure", "amber", "jade", "violet", "ochre"),
    ("north", "south", "east", "west", "upper", "lower"),
    ("iron", "glass", "stone", "wood", "clay", "silk"),
)


def filler_words(n: int, rng: np.random.Generator) -> list[str]:
    """``n`` distinct pronounceable pseudo-words."""
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        w = "".join(rng.choice(_SYLLABLES, size=3))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass
class SyntheticSpec:
    """Recipe for :func:`generate_split_signal`.

    Entity budget: ``n_entities`` is filled by group anchors, token-rule
    targets, and the remaining items, shared equally between structure
    items and token items.
    """
    n_entities: int = 200
    n_relations: int = 8
    chain_rules: int = 2
    token_rules: int = 2
    groups: int = 6
    anchors_per_group: int = 3
    peers_per_item: int = 3
    attribute_values: int = 4
    targets_per_value: int = 3
    filler_pool: int = 8
    heldout_heads: float = 0.3
    split: tuple[float, float, float] = (0.5, 0.25, 0.25)
    seed: int = 0

    def validate(self) -> None:
        if self.n_relations != 3 * self.chain_rules + self.token_rules:
            raise ValueError("n_relations must equal 3 * chain_rules + token_rules")
        if self.chain_rules < 1 or self.token_rules < 1:
            raise ValueError("need at least one chain rule and one token rule")
        if self.token_rules > len(ATTRIBUTE_WORDS):
            raise ValueError(f"at most {len(ATTRIBUTE_WORDS)} token rules")
        if not 1 <= self.attribute_values <= len(ATTRIBUTE_WORDS[0]):
            raise ValueError("attribute_values out of range")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError("split fractions must be three nonnegatives summing to 1")
        if not 0 <= self.heldout_heads < 1:
            raise ValueError("heldout_heads must lie in [0, 1)")
        if self.peers_per_item < 1 or self.targets_per_value < 1:
            raise ValueError("peers_per_item and targets_per_value must be positive")
        if self.n_items < 2 * max(self.groups, self.attribute_values) * 2:
            raise ValueError("too few entities for the requested groups and rules")

    @property
    def n_anchors(self) -> int:
        return self.chain_rules * self.groups * self.anchors_per_group

    @property
    def n_targets(self) -> int:
        return self.token_rules * self.attribute_values * self.targets_per_value

    @property
    def n_items(self) -> int:
        return self.n_entities - self.n_anchors - self.n_targets


@dataclass
class SplitSignal:
    graph: KnowledgeGraph
    split: TripleSplit
    tags: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __iter__(self):
        return iter((self.graph, self.split, self.tags))


def _split_rows(rows: list[tuple[int, int, int]], heldout: set[int], fractions,
                rng: np.random.Generator) -> tuple[list, list, list]:
    """Per-triple split, except held-out heads whose rows all leave train."""
    train, valid, test = [], [], []
    f_train, f_valid, _ = fractions
    eval_share = f_valid / max(1 - f_train, 1e-12)
    by_head: dict[int, list] = {}
    for row in rows:
        by_head.setdefault(row[0], []).append(row)
    for h in sorted(by_head):
        group = by_head[h]
        if h in heldout:
            for row in group:
                (valid if rng.random() < eval_share else test).append(row)
            continue
        order = rng.permutation(len(group))
        # keep at least one answer in train so the query stays observed
        for rank, i in enumerate(order):
            u = rng.random()
            if rank == 0 or u < f_train:
                train.append(group[i])
            elif u < f_train + f_valid:
                valid.append(group[i])
            else:
                test.append(group[i])
    return train, valid, test


def generate_split_signal(spec: SyntheticSpec | None = None) -> SplitSignal:
    """Graph, split and tags for the split-signal fixture.

    ``tags[part]["structure"]`` / ``tags[part]["text"]`` hold the base-direction
    triples of ``part`` ("valid" or "test") inferable from graph paths and
    from name tokens respectively.  The two sets are disjoint by construction.
    """
    spec = spec or SyntheticSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    fill = filler_words(spec.filler_pool + spec.n_entities, rng)
    pool, unique = fill[:spec.filler_pool], fill[spec.filler_pool:]

    n_items = spec.n_items
    n_struct = n_items // 2
    n_tok = n_items - n_struct
    struct_items = list(range(n_struct))
    tok_items = list(range(n_struct, n_items))
    anchor_base = n_items
    target_base = anchor_base + spec.n_anchors

    def noise_name() -> str:
        return " ".join(rng.choice(pool, size=2, replace=False))

    names = [""] * spec.n_entities
    texts = [""] * spec.n_entities
    for i, e in enumerate(struct_items):
        names[e] = f"item_s{i:03d}"
        texts[e] = noise_name()
    attrs = rng.integers(spec.attribute_values, size=(n_tok, spec.token_rules))
    for i, e in enumerate(tok_items):
        names[e] = f"item_t{i:03d}"
        words = [ATTRIBUTE_WORDS[k][attrs[i, k]] for k in range(spec.token_rules)]
        texts[e] = " ".join([noise_name().split()[0]] + words)
    for a in range(spec.n_anchors):
        names[anchor_base + a] = f"anchor{a:03d}"
        texts[anchor_base + a] = f"{unique[a]} post"
    for t in range(spec.n_targets):
        names[target_base + t] = f"target{t:03d}"
        texts[target_base + t] = f"{unique[spec.n_anchors + t]} place"

    rel_names, rel_texts = [], []
    for k in range(spec.chain_rules):
        rel_names += [f"peer_{k}", f"post_{k}", f"reach_{k}"]
        rel_texts += [f"works with {unique[-1 - k]}", f"stationed at {unique[-1 - k]}",
                      f"reaches {unique[-1 - k]} post"]
    for k in range(spec.token_rules):
        rel_names.append(f"visits_{k}")
        rel_texts.append(f"visits {unique[-10 - k]} place")

    group = rng.integers(spec.groups, size=n_struct)
    members = [np.flatnonzero(group == g) for g in range(spec.groups)]
    support: list[tuple[int, int, int]] = []
    structure_rows: list[tuple[int, int, int]] = []
    for k in range(spec.chain_rules):
        p, q, c = 3 * k, 3 * k + 1, 3 * k + 2
        first_anchor = anchor_base + k * spec.groups * spec.anchors_per_group
        post = {}
        for i, e in enumerate(struct_items):
            g = group[i]
            post[e] = first_anchor + g * spec.anchors_per_group + int(rng.integers(spec.anchors_per_group))
            support.append((e, q, post[e]))
        for i, e in enumerate(struct_items):
            mates = members[group[i]]
            mates = mates[mates != i]
            if len(mates) == 0:
                continue
            peers = rng.choice(mates, size=min(spec.peers_per_item, len(mates)), replace=False)
            reached = set()
            for j in sorted(peers.tolist()):
                support.append((e, p, struct_items[j]))
                reached.add(post[struct_items[j]])
            structure_rows += [(e, c, a) for a in sorted(reached)]

    text_rows: list[tuple[int, int, int]] = []
    for k in range(spec.token_rules):
        r = 3 * spec.chain_rules + k
        for i, e in enumerate(tok_items):
            v = attrs[i, k]
            first = target_base + (k * spec.attribute_values + v) * spec.targets_per_value
            text_rows += [(e, r, first + j) for j in range(spec.targets_per_value)]

    n_hold_s = int(round(spec.heldout_heads * n_struct))
    n_hold_t = int(round(spec.heldout_heads * n_tok))
    held = set(rng.choice(struct_items, size=n_hold_s, replace=False).tolist())
    held |= set(rng.choice(tok_items, size=n_hold_t, replace=False).tolist())
    s_train, s_valid, s_test = _split_rows(structure_rows, held, spec.split, rng)
    t_train, t_valid, t_test = _split_rows(text_rows, held, spec.split, rng)

    # token items need some incident edge; tie each to a random structure item
    link_rel = 0
    for e in tok_items:
        support.append((e, link_rel, int(rng.choice(struct_items))))

    def arr(rows):
        return np.array(sorted(rows), dtype=np.int64).reshape(-1, 3)

    train = arr(support + s_train + t_train)
    valid = arr(s_valid + t_valid)
    test = arr(s_test + t_test)
    text = TextStore(texts, rel_texts, max_len=16)
    graph = KnowledgeGraph(names, rel_names, train, text)
    split = TripleSplit(train, valid, test)
    split.check_disjoint()
    tags = {"valid": {"structure": arr(s_valid), "text": arr(t_valid)},
            "test": {"structure": arr(s_test), "text": arr(t_test)}}
    return SplitSignal(graph, split, tags)


def check_split_signal(data: SplitSignal, minimum: int = 50) -> dict[str, int]:
    """Generator self-check: tag sets disjoint and each ``>= minimum`` test queries."""
    counts = {}
    for part, sets in data.tags.items():
        a = set(map(tuple, sets["structure"].tolist()))
        b = set(map(tuple, sets["text"].tolist()))
        if a & b:
            raise AssertionError(f"{part}: tag sets overlap")
        counts[f"{part}_structure"] = len(a)
        counts[f"{part}_text"] = len(b)
    if min(counts["test_structure"], counts["test_text"]) < minimum:
        raise AssertionError(f"tagged test subsets too small: {counts}")
    return counts


def write_split_signal(data: SplitSignal, directory: str | Path) -> dict[str, Path]:
    """TSV files in the loader's format (train/valid/test, entity and relation text)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = data.graph
    paths = {}
    for part in ("train", "valid", "test"):
        rows = getattr(data.split, part)
        paths[part] = d / f"{part}.txt"
        write_triples_tsv(paths[part], [(g.entities[h], g.relations[r], g.entities[t])
                                        for h, r, t in rows.tolist()])
    paths["entity_text"] = d / "entity2text.txt"
    write_text_tsv(paths["entity_text"], dict(zip(g.entities, g.text.entity_text)))
    paths["relation_text"] = d / "relation2text.txt"
    write_text_tsv(paths["relation_text"], dict(zip(g.relations, g.text.relation_text)))
    return paths


# ----------------------------------------------------------------------
# small fixtures
# ----------------------------------------------------------------------
def tiny_graph() -> tuple[KnowledgeGraph, TripleSplit, np.ndarray]:
    """Five entities, two relations, one unobserved query ``(0, 1, ?)``.

    Small enough that the joint over unobserved labels can be enumerated.
    """
    entities = ["ash", "birch", "cedar", "dogwood", "elm"]
    relations = ["shades", "grows near"]
    train = np.array([[0, 0, 1], [1, 0, 2], [2, 1, 3], [3, 1, 4], [1, 1, 4]])
    valid = np.array([[4, 0, 3]])
    test = np.array([[0, 1, 2]])
    text = TextStore([f"{e} tree" for e in entities], relations, max_len=8)
    graph = KnowledgeGraph(entities, relations, train, text)
    return graph, TripleSplit(train, valid, test), np.array([[0, 1]])


def random_triples(n_triples: int, n_entities: int, n_relations: int, seed: int = 0
                   ) -> np.ndarray:
    """``n_triples`` distinct random triples without self-loops, sorted."""
    rng = np.random.default_rng(seed)
    if n_triples > n_entities * (n_entities - 1) * n_relations:
        raise ValueError("more triples requested than possible")
    seen: set[tuple[int, int, int]] = set()
    while len(seen) < n_triples:
        h, t = rng.integers(n_entities, size=2)
        if h == t:
            continue
        seen.add((int(h), int(rng.integers(n_relations)), int(t)))
    return np.array(sorted(seen), dtype=np.int64)


def random_graph(n_triples: int, n_entities: int, n_relations: int, seed: int = 0
                 ) -> KnowledgeGraph:
    rows = random_triples(n_triples, n_entities, n_relations, seed)
    return KnowledgeGraph([f"e{i}" for i in range(n_entities)],
                          [f"r{i}" for i in range(n_relations)], rows)


def write_random_dataset(directory: str | Path, n_train: int, n_entities: int = 100,
                         n_relations: int = 10, n_eval: int = 50, seed: int = 0) -> dict[str, Path]:
    """Raw TSV splits of random triples (names ``e<i>`` / ``r<j>``)."""
    rows = random_triples(n_train + 2 * n_eval, n_entities, n_relations, seed)
    order = np.random.default_rng(seed + 1).permutation(len(rows))
    parts = {"train": rows[order[:n_train]], "valid": rows[order[n_train:n_train + n_eval]],
             "test": rows[order[n_train + n_eval:]]}
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, part in parts.items():
        paths[name] = d / f"{name}.txt"
        write_triples_tsv(paths[name], [(f"e{h}", f"r{r}", f"e{t}") for h, r, t in part.tolist()])
    return paths
