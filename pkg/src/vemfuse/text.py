"""Text-based predictor: ``[CLS] head-text [SEP] relation-text [SEP]`` is
embedded, passed through one optional self-attention block, pooled, and
classified over all entities with an untied output matrix.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .kg import INVERSE_PREFIX, KnowledgeGraph, TextStore, tokenize
from .structure import glorot

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, INV = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[INV]"
SPECIALS = (PAD, UNK, CLS, SEP, INV)


class Vocab:
    def __init__(self, tokens: list[str]):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, t in enumerate(self.itos):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok, _, idx = line.rstrip("\n").partition("\t")
                pairs.append((int(idx), tok))
        itos = [t for _, t in sorted(pairs)]
        if tuple(itos[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocab file does not start with the reserved specials")
        return cls(itos[len(SPECIALS):])


def _strip_inverse(text: str) -> tuple[bool, str]:
    if text.startswith(INVERSE_PREFIX):
        return True, text[len(INVERSE_PREFIX):]
    return False, text


def build_vocab(text_store: TextStore, min_count: int = 1) -> Vocab:
    """Tokens with frequency >= ``min_count``, ordered by (-count, token)."""
    counts: Counter[str] = Counter()
    for t in text_store.entity_text:
        counts.update(tokenize(t))
    seen = set()
    for t in text_store.relation_text:
        _, base = _strip_inverse(t)
        if base in seen:
            continue
        seen.add(base)
        counts.update(tokenize(base))
    kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                  key=lambda tok: (-counts[tok], tok))
    return Vocab(kept)


@dataclass
class AssemblyStats:
    empty: int = 0
    truncated: int = 0


def assemble_input(head: int, rel: int, text_store: TextStore, vocab: Vocab,
                   stats: AssemblyStats | None = None) -> list[int]:
    """Token ids for ``[CLS] d(h) [SEP] d(r) [SEP]``, truncated to ``max_len``.

    The relation segment gives up tokens only when it is longer than a
    quarter of ``max_len``; otherwise the head segment absorbs the cut.
    """
    max_len = text_store.max_len
    head_tokens = [vocab.id(t) for t in tokenize(text_store.entity_text[head])]
    inverse, base = _strip_inverse(text_store.relation_text[rel])
    rel_tokens = ([vocab.id(INV)] if inverse else []) + [vocab.id(t) for t in tokenize(base)]
    if not head_tokens and not rel_tokens and stats is not None:
        stats.empty += 1
    budget = max_len - 3
    if budget < 0:
        raise ValueError("max_len must be at least 3")
    if len(head_tokens) + len(rel_tokens) > budget:
        if stats is not None:
            stats.truncated += 1
        rel_keep = len(rel_tokens)
        if rel_keep > max_len // 4:
            rel_keep = min(rel_keep, max(max_len // 4, budget - len(head_tokens)))
        rel_keep = min(rel_keep, budget)
        rel_tokens = rel_tokens[:rel_keep]
        head_tokens = head_tokens[:budget - len(rel_tokens)]
    return ([vocab.id(CLS)] + head_tokens + [vocab.id(SEP)] + rel_tokens
            + [vocab.id(SEP)])


@dataclass
class TextConfig:
    dim: int = 64
    attention: bool = True
    pooling: str = "mean"
    min_count: int = 1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.pooling not in ("cls", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


class TextModel:
    """Sequence encoder over assembled query text with an entity classifier.

    ``forward_count`` counts encoded sequences; one query costs exactly one
    forward no matter how many entities are scored.
    """

    tag = "text"

    def __init__(self, graph: KnowledgeGraph, config: TextConfig | None = None,
                 vocab: Vocab | None = None):
        self.graph = graph
        self.text = graph.text
        self.config = config or TextConfig()
        self.vocab = vocab if vocab is not None else build_vocab(graph.text, self.config.min_count)
        self.n_entities = graph.n_entities
        self.max_len = graph.text.max_len
        self.stats = AssemblyStats()
        self.forward_count = 0
        self._inputs: dict[tuple[int, int], list[int]] = {}
        self.params: dict[str, Tensor] = {}
        self.init_params(self.config.seed)

    def init_params(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)
        dt = np.dtype(cfg.dtype)
        d = cfg.dim
        p = {"token_emb": glorot(rng, (len(self.vocab), d), dt),
             "positional_emb": glorot(rng, (self.max_len, d), dt),
             "entity_out": glorot(rng, (self.n_entities, d), dt)}
        if cfg.attention:
            for w in ("W_q", "W_k", "W_v", "W_o"):
                p[w] = glorot(rng, (d, d), dt)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def invalidate(self) -> None:
        pass

    def config_dict(self) -> dict:
        return asdict(self.config)

    # -- inputs ---------------------------------------------------------
    def input_ids(self, head: int, rel: int) -> list[int]:
        key = (int(head), int(rel))
        ids = self._inputs.get(key)
        if ids is None:
            ids = assemble_input(key[0], key[1], self.text, self.vocab, self.stats)
            self._inputs[key] = ids
        return ids

    def batch_ids(self, heads, rels) -> tuple[np.ndarray, np.ndarray]:
        seqs = [self.input_ids(h, r) for h, r in zip(np.asarray(heads).tolist(),
                                                     np.asarray(rels).tolist())]
        width = max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), self.vocab.pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
            mask[i, :len(s)] = True
        return ids, mask

    # -- forward --------------------------------------------------------
    def encode(self, heads, rels) -> Tensor:
        """Pooled query vectors, shape (batch, dim)."""
        ids, mask = self.batch_ids(heads, rels)
        b, width = ids.shape
        self.forward_count += b
        p = self.params
        h = dm.take(p["token_emb"], ids) + p["positional_emb"][:width]
        dt = h.dtype
        if self.config.attention:
            d = h.shape[-1]
            q = h @ p["W_q"]
            k = h @ p["W_k"]
            v = h @ p["W_v"]
            scores = (q @ dm.swapaxes(k, 1, 2)) * (1.0 / np.sqrt(d))
            bias = np.where(mask[:, None, :], 0.0, -1e9).astype(dt)
            att = dm.softmax(scores + bias, axis=-1)
            h = h + (att @ v) @ p["W_o"]
        if self.config.pooling == "cls":
            return h[:, 0, :]
        m = mask.astype(dt)[:, :, None]
        return dm.tsum(h * m, axis=1) * (1.0 / m.sum(axis=1))

    def logits(self, heads, rels, overlay=None) -> Tensor:
        """Logits over all entities; ``overlay`` is ignored (text has no graph)."""
        return self.encode(heads, rels) @ dm.transpose(self.params["entity_out"])

    def predict_q(self, heads, rels, temperature: float = 1.0) -> np.ndarray:
        out = self.logits(heads, rels).data
        return dm.softmax_T(out.astype(np.float64), temperature)

    def score_queries(self, heads, rels) -> np.ndarray:
        return self.logits(heads, rels).data
