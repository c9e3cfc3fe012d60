"""Pre-training, the alternating E/M fusion loop, and checkpoints.

Randomness is split into named sub-streams derived from one seed, so that
turning a loss term off never shifts the random draws of another subsystem.
"""
from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import losses as L
from .densify import densify
from .evaluation import evaluate
from .kg import KnowledgeGraph, TripleSplit

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, where: str, components: dict):
        super().__init__(f"non-finite loss in {where}: {components}")
        self.where = where
        self.components = components


@dataclass
class TrainConfig:
    lr_struct: float = 0.005
    lr_text: float = 0.005
    batch_size: int = 64
    pretrain_epochs: int = 100
    fusion_epochs: int = 30
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 10
    dev_subsample: int = 2000
    label_smoothing: float = 0.1
    tie_policy: str = "expected"

    def __post_init__(self):
        for name in ("lr_struct", "lr_text", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.pretrain_epochs < 0 or self.fusion_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named purpose, e.g. ``stream(7, "shuffle", "text")``."""
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng([seed, *keys])


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **record) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def of(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("kind") == kind]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "RunLog":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# ----------------------------------------------------------------------
# training queries
# ----------------------------------------------------------------------
@dataclass
class QuerySet:
    heads: np.ndarray
    rels: np.ndarray
    labels: list[list[int]]

    def __len__(self) -> int:
        return len(self.heads)

    def batches(self, batch_size: int, rng: np.random.Generator | None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for b in range(0, len(order), batch_size):
            idx = order[b:b + batch_size]
            yield self.heads[idx], self.rels[idx], [self.labels[i] for i in idx]


def train_queries(triples: np.ndarray) -> QuerySet:
    """Group triples into ``(h, r) -> tails`` queries, sorted by ``(h, r)``."""
    groups: dict[tuple[int, int], list[int]] = {}
    for h, r, t in np.asarray(triples).tolist():
        groups.setdefault((h, r), []).append(t)
    keys = sorted(groups)
    return QuerySet(np.array([k[0] for k in keys], dtype=np.int64),
                    np.array([k[1] for k in keys], dtype=np.int64),
                    [sorted(set(groups[k])) for k in keys])


def _check(where: str, **components) -> dict:
    vals = {k: float(v) for k, v in components.items()}
    if not all(np.isfinite(v) for v in vals.values()):
        raise NonFiniteLoss(where, vals)
    return vals


def make_optimizer(model, cfg: TrainConfig) -> dm.Adam:
    lr = cfg.lr_struct if model.tag == "structure" else cfg.lr_text
    return dm.Adam(model.parameters(), lr=lr, grad_clip=cfg.grad_clip)


def supervised_step(model, opt: dm.Adam, heads, rels, labels, smoothing: float) -> float:
    opt.zero_grad()
    loss = L.supervised_loss(model.logits(heads, rels), labels, smoothing)
    dm.backward(loss)
    opt.step()
    return loss.item()


def train_epoch(model, opt: dm.Adam, queries: QuerySet, cfg: TrainConfig,
                rng: np.random.Generator) -> list[float]:
    """One supervised pass; returns per-step losses."""
    out = []
    for heads, rels, labels in queries.batches(cfg.batch_size, rng):
        loss = supervised_step(model, opt, heads, rels, labels, cfg.label_smoothing)
        _check("supervised", loss=loss)
        out.append(loss)
    return out


def dev_mrr(model, graph, split, cfg: TrainConfig, full: bool = False) -> float:
    limit = None if full else cfg.dev_subsample
    metrics, _ = evaluate(model, graph, split, "dev", cfg.tie_policy,
                          stream_seed(cfg.seed, "tie"), limit=limit)
    return metrics.mrr


def stream_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(2 ** 31))


def pretrain(model, graph: KnowledgeGraph, split: TripleSplit, cfg: TrainConfig,
             epochs: int | None = None, keep_best: bool = True, log_: RunLog | None = None
             ) -> RunLog:
    """Supervised training on all training queries (both directions).

    The model is left holding the best-dev-MRR parameters when ``keep_best``
    (evaluated every ``eval_every`` epochs and at the end).
    """
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    runlog = log_ if log_ is not None else RunLog()
    queries = train_queries(split.train)
    rng = stream(cfg.seed, "shuffle", model.tag)
    opt = make_optimizer(model, cfg)
    best = (-1.0, None)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = train_epoch(model, opt, queries, cfg, rng)
        rec = dict(kind="pretrain", model=model.tag, epoch=epoch,
                   loss=float(np.mean(losses)), wall=time.perf_counter() - t0)
        if keep_best and ((cfg.eval_every and epoch % cfg.eval_every == 0) or epoch == epochs):
            mrr = dev_mrr(model, graph, split, cfg)
            rec["dev_mrr"] = mrr
            if mrr > best[0]:
                best = (mrr, model.state_dict())
        runlog.append(**rec)
    if keep_best and best[1] is not None:
        model.load_state_dict(best[1])
    return runlog


def continue_training(model, graph, split, cfg: TrainConfig, epochs: int,
                      runlog: RunLog | None = None) -> RunLog:
    """Independent continued training with a fresh optimizer (the fusion baseline)."""
    runlog = runlog if runlog is not None else RunLog()
    queries = train_queries(split.train)
    rng = stream(cfg.seed, "shuffle", model.tag)
    opt = make_optimizer(model, cfg)
    for epoch in range(1, epochs + 1):
        losses = train_epoch(model, opt, queries, cfg, rng)
        runlog.append(kind="continue", model=model.tag, epoch=epoch,
                      loss=float(np.mean(losses)), step_losses=losses)
    return runlog


# ----------------------------------------------------------------------
# fusion
# ----------------------------------------------------------------------
@dataclass
class FusionState:
    """Optimizers and random streams that persist across fusion rounds."""
    opt_struct: dm.Adam
    opt_text: dm.Adam
    shuffle_struct: np.random.Generator
    shuffle_text: np.random.Generator
    densify_e: np.random.Generator
    densify_m: np.random.Generator
    queries: QuerySet


def init_fusion(struct, text, split: TripleSplit, tcfg: TrainConfig) -> FusionState:
    return FusionState(make_optimizer(struct, tcfg), make_optimizer(text, tcfg),
                       stream(tcfg.seed, "shuffle", struct.tag),
                       stream(tcfg.seed, "shuffle", text.tag),
                       stream(tcfg.seed, "densify", "e"),
                       stream(tcfg.seed, "densify", "m"),
                       train_queries(split.train))


def _vem_needed(weight: float, fcfg: L.FusionConfig) -> bool:
    return weight > 0 and fcfg.N > 0


def e_step(struct, text, graph: KnowledgeGraph, split: TripleSplit, fcfg: L.FusionConfig,
           tcfg: TrainConfig, state: FusionState | None = None) -> dict:
    """One epoch updating the text model; the structure model is only read."""
    state = state or init_fusion(struct, text, split, tcfg)
    steps = []
    dens = []
    for heads, rels, labels in state.queries.batches(tcfg.batch_size, state.shuffle_text):
        opt = state.opt_text
        opt.zero_grad()
        logits = text.logits(heads, rels)
        sup = L.supervised_loss(logits, labels, fcfg.label_smoothing)
        total = sup
        comp = {"sup": sup.item(), "vem": 0.0, "ml": 0.0}
        if fcfg.alpha_s > 0:
            p = struct.predict_p(heads, rels, None, fcfg.st_ml_t)
            ml = L.ml_loss_text(p, logits, fcfg, fcfg.kl_reduction)
            total = total + fcfg.alpha_s * ml
            comp["ml"] = ml.item()
        if _vem_needed(fcfg.alpha_t, fcfg):
            batch = densify(graph, struct, text, fcfg.N, fcfg.M, state.densify_e,
                            fcfg.tx_vem_t, fcfg.top_k, fcfg.relation_sampling)
            if batch.queries:
                p = struct.predict_p(batch.heads, batch.relations, batch.overlay, fcfg.st_vem_t)
                vem = L.vem_e_loss(text.logits(batch.heads, batch.relations), p, fcfg,
                                   fcfg.kl_reduction)
                total = total + fcfg.alpha_t * vem
                comp["vem"] = vem.item()
            dens.append(batch.stats.to_dict())
        comp["total"] = total.item()
        _check("e_step", **comp)
        dm.backward(total)
        opt.step()
        steps.append(comp)
    return _summarise(steps, dens)


def m_step(struct, text, graph: KnowledgeGraph, split: TripleSplit, fcfg: L.FusionConfig,
           tcfg: TrainConfig, state: FusionState | None = None) -> dict:
    """One epoch updating the structure model; the text model is only read."""
    state = state or init_fusion(struct, text, split, tcfg)
    steps = []
    dens = []
    for heads, rels, labels in state.queries.batches(tcfg.batch_size, state.shuffle_struct):
        opt = state.opt_struct
        opt.zero_grad()
        logits = struct.logits(heads, rels)
        sup = L.supervised_loss(logits, labels, fcfg.label_smoothing)
        total = sup
        comp = {"sup": sup.item(), "vem": 0.0, "ml": 0.0}
        if fcfg.beta_s > 0:
            q = text.predict_q(heads, rels, fcfg.tx_ml_t)
            ml = L.ml_loss_struct(q, logits, fcfg, fcfg.kl_reduction)
            total = total + fcfg.beta_s * ml
            comp["ml"] = ml.item()
        if _vem_needed(fcfg.beta_t, fcfg):
            batch = densify(graph, struct, text, fcfg.N, fcfg.M, state.densify_m,
                            fcfg.tx_vem_t, fcfg.top_k, fcfg.relation_sampling)
            if batch.queries:
                q = text.predict_q(batch.heads, batch.relations, fcfg.tx_vem_t)
                p_logits = struct.logits(batch.heads, batch.relations, batch.overlay)
                vem = L.vem_m_loss(q, p_logits, fcfg, fcfg.kl_reduction)
                total = total + fcfg.beta_t * vem
                comp["vem"] = vem.item()
            dens.append(batch.stats.to_dict())
        comp["total"] = total.item()
        _check("m_step", **comp)
        dm.backward(total)
        opt.step()
        steps.append(comp)
    return _summarise(steps, dens)


def _summarise(steps: list[dict], dens: list[dict]) -> dict:
    out = {k: float(np.mean([s[k] for s in steps])) if steps else 0.0
           for k in ("sup", "vem", "ml", "total")}
    out["step_sup"] = [s["sup"] for s in steps]
    out["step_total"] = [s["total"] for s in steps]
    if dens:
        out["overlay_edges"] = float(np.mean([d["overlay_edges"] for d in dens]))
        out["generated"] = float(np.mean([d["generated"] for d in dens]))
        conf = [d["mean_confidence"] for d in dens if np.isfinite(d["mean_confidence"])]
        out["mean_confidence"] = float(np.mean(conf)) if conf else float("nan")
    return out


@dataclass
class FusionResult:
    chosen: str
    dev_mrr: dict[str, float]
    log: RunLog


def fuse(struct, text, graph: KnowledgeGraph, split: TripleSplit, fcfg: L.FusionConfig,
         tcfg: TrainConfig, rounds: int | None = None, runlog: RunLog | None = None
         ) -> FusionResult:
    """Alternate E-steps (text) and M-steps (structure) for ``rounds`` rounds.

    Both models are updated in place.  The returned tag names the model
    with the higher full-dev MRR at the end.
    """
    rounds = tcfg.fusion_epochs if rounds is None else rounds
    runlog = runlog if runlog is not None else RunLog()
    state = init_fusion(struct, text, split, tcfg)
    for rnd in range(1, rounds + 1):
        t0 = time.perf_counter()
        e = e_step(struct, text, graph, split, fcfg, tcfg, state)
        m = m_step(struct, text, graph, split, fcfg, tcfg, state)
        rec = dict(kind="fuse", round=rnd, e=e, m=m, wall=time.perf_counter() - t0)
        if tcfg.eval_every and rnd % tcfg.eval_every == 0 and rnd != rounds:
            rec["dev_mrr"] = {mdl.tag: dev_mrr(mdl, graph, split, tcfg) for mdl in (struct, text)}
        runlog.append(**rec)
    final = {mdl.tag: dev_mrr(mdl, graph, split, tcfg, full=True) for mdl in (struct, text)}
    chosen = max(final, key=lambda k: (final[k], k == "structure"))
    runlog.append(kind="select", dev_mrr=final, chosen=chosen)
    return FusionResult(chosen, final, runlog)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
def save_model(model, prefix: str | Path, extra: dict | None = None) -> None:
    meta = {"tag": model.tag, "config": model.config_dict(), **(extra or {})}
    dm.save_checkpoint(prefix, model.state_dict(), meta)


def load_model_state(model, prefix: str | Path) -> dict:
    arrays, meta = dm.load_checkpoint(prefix)
    if meta.get("tag") not in (None, model.tag):
        raise ValueError(f"checkpoint holds a {meta.get('tag')} model, not {model.tag}")
    model.load_state_dict(arrays)
    return meta
