"""Structure-based predictor: composition-based relational message passing
followed by a bilinear-diagonal (DistMult) decoder over all entities.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .kg import KnowledgeGraph

COMPOSITIONS = ("subtract", "multiply", "ccorr")


@dataclass
class GraphOverlay:
    """Temporary densification edges layered over the base graph.

    ``triples`` already contains the inverse mirror of every sampled edge.
    ``confidence`` holds the text model's probability for each sampled label
    (1.0 for ground-truth labels), aligned with ``triples``.
    """
    triples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.triples)


@dataclass
class StructConfig:
    dim: int = 64
    layers: int = 1
    composition: str = "subtract"
    activation: str = "tanh"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"unknown composition {self.composition!r}")
        if self.activation not in ("tanh", "identity", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")


def glorot(rng: np.random.Generator, shape: tuple[int, int], dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def compose(x: Tensor, r: Tensor, op: str) -> Tensor:
    if op == "subtract":
        return x - r
    if op == "multiply":
        return x * r
    if op == "ccorr":
        return dm.ccorr(x, r)
    raise ValueError(f"unknown composition {op!r}")


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "tanh":
        return dm.tanh(x)
    if name == "relu":
        return dm.relu(x)
    return x


class StructureModel:
    """Relational GNN encoder plus DistMult scorer.

    Parameters live in ``self.params`` (name -> Tensor).  The graph passed at
    construction supplies the base edges; an overlay adds edges per call.
    """

    tag = "structure"

    def __init__(self, graph: KnowledgeGraph, config: StructConfig | None = None):
        self.graph = graph
        self.config = config or StructConfig()
        self.n_entities = graph.n_entities
        self.n_relations = graph.n_relations
        self.n_base = graph.n_base_relations
        self.params: dict[str, Tensor] = {}
        self.init_params(self.config.seed)
        self._base_edges = np.asarray(graph.triples, dtype=np.int64).reshape(-1, 3)
        self._cache = None

    # -- parameters -----------------------------------------------------
    def init_params(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)
        dt = np.dtype(cfg.dtype)
        d = cfg.dim
        p = {"entity_emb": glorot(rng, (self.n_entities, d), dt),
             "relation_emb": glorot(rng, (self.n_relations, d), dt)}
        for layer in range(cfg.layers):
            for w in ("W_in", "W_out", "W_self", "W_rel"):
                p[f"{w}_{layer}"] = glorot(rng, (d, d), dt)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
        self._cache = None

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
        self._cache = None

    def invalidate(self) -> None:
        self._cache = None

    def config_dict(self) -> dict:
        return asdict(self.config)

    # -- forward --------------------------------------------------------
    def _edges(self, overlay: GraphOverlay | None) -> np.ndarray:
        if overlay is None or len(overlay) == 0:
            return self._base_edges
        extra = np.asarray(overlay.triples, dtype=np.int64).reshape(-1, 3)
        if extra.size and (extra[:, [0, 2]].max() >= self.n_entities
                           or extra[:, 1].max() >= self.n_relations or extra.min() < 0):
            raise ValueError("overlay references unknown ids")
        return np.concatenate([self._base_edges, extra], axis=0)

    def encode(self, overlay: GraphOverlay | None = None) -> tuple[Tensor, Tensor]:
        """Entity and relation representations after message passing."""
        cfg = self.config
        x = self.params["entity_emb"]
        z = self.params["relation_emb"]
        if x.shape[1] != z.shape[1]:
            raise ValueError("entity and relation dimensions differ")
        edges = self._edges(overlay)
        n = self.n_entities
        src, rel, dst = edges[:, 0], edges[:, 1], edges[:, 2]
        groups = []
        for name, mask in (("W_in", rel < self.n_base), ("W_out", rel >= self.n_base)):
            idx = np.flatnonzero(mask)
            if len(idx) == 0:
                continue
            deg = np.bincount(dst[idx], minlength=n).astype(x.dtype)
            norm = (1.0 / deg[dst[idx]])[:, None].astype(x.dtype)
            groups.append((name, src[idx], rel[idx], dst[idx], norm))
        for layer in range(cfg.layers):
            w_self = self.params[f"W_self_{layer}"]
            if w_self.shape[0] != x.shape[1]:
                raise ValueError("dimension mismatch between embeddings and layer weights")
            agg = x @ w_self
            for name, s, r, t, norm in groups:
                msg = compose(dm.take(x, s), dm.take(z, r), cfg.composition)
                msg = (msg @ self.params[f"{name}_{layer}"]) * norm
                agg = agg + dm.index_add(msg, t, n)
            x = _activate(agg, cfg.activation)
            z = z @ self.params[f"W_rel_{layer}"]
        return x, z

    def score(self, heads, rels, x: Tensor, z: Tensor) -> Tensor:
        """DistMult logits ``sum_k x_h[k] z_r[k] x_t[k]`` for every tail."""
        q = dm.take(x, heads) * dm.take(z, rels)
        return q @ dm.transpose(x)

    def logits(self, heads, rels, overlay: GraphOverlay | None = None) -> Tensor:
        x, z = self.encode(overlay)
        return self.score(np.asarray(heads), np.asarray(rels), x, z)

    def predict_p(self, heads, rels, overlay: GraphOverlay | None = None,
                  temperature: float = 1.0) -> np.ndarray:
        out = self.logits(heads, rels, overlay).data
        return dm.softmax_T(out.astype(np.float64), temperature)

    def relation_embedding(self, r: int | None = None) -> np.ndarray:
        """Input-layer relation embeddings (one row, or the full matrix)."""
        emb = self.params["relation_emb"].data
        if r is None:
            return emb
        if not 0 <= r < self.n_relations:
            raise IndexError(f"relation id {r} out of range")
        return emb[r]

    def score_queries(self, heads, rels) -> np.ndarray:
        """Evaluation scores; the graph is encoded once and cached."""
        if self._cache is None:
            x, z = self.encode(None)
            self._cache = (Tensor(x.data), Tensor(z.data))
        x, z = self._cache
        return self.score(np.asarray(heads), np.asarray(rels), x, z).data
