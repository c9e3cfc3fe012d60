"""Training objectives for fusing a structure model and a text model.

Naming follows the direction of knowledge flow.  The text model is the
variational distribution ``q`` and the structure model is ``p``:

* ``ml_loss_text``   KL(p || q) on observed queries, trains q
* ``ml_loss_struct`` KL(q || p) on observed queries, trains p
* ``vem_e_loss``     KL(q || p_overlay) on generated queries, trains q
* ``vem_m_loss``     -E_q[log p_overlay] on generated queries, trains p

Teachers are always detached: they enter as constant probability arrays.
Students enter as logits and are normalised with a tempered log-softmax.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import EPS, Tensor

# "elementwise" divides the per-query sum by |E| as well, which puts KL terms
# on the same per-logit scale as the entity-averaged supervised BCE.
REDUCTIONS = ("sum", "mean", "elementwise")
TEMPERATURE_NAMES = ("tx_vem_s", "tx_vem_t", "st_vem_s", "st_vem_t",
                     "tx_ml_s", "tx_ml_t", "st_ml_s", "st_ml_t")


@dataclass
class FusionConfig:
    alpha_t: float = 1.0
    alpha_s: float = 1.0
    beta_t: float = 1.0
    beta_s: float = 1.0
    tx_vem_s: float = 1.0
    tx_vem_t: float = 1.0
    st_vem_s: float = 1.0
    st_vem_t: float = 1.0
    tx_ml_s: float = 1.0
    tx_ml_t: float = 1.0
    st_ml_s: float = 1.0
    st_ml_t: float = 1.0
    N: int = 32
    M: int = 8
    label_smoothing: float = 0.1
    top_k: int = 10
    scale_by_t2: bool = False
    relation_sampling: str = "argmax"
    kl_reduction: str = "elementwise"

    def __post_init__(self):
        for w in ("alpha_t", "alpha_s", "beta_t", "beta_s"):
            if getattr(self, w) < 0:
                raise ValueError(f"{w} must be nonnegative")
        for t in TEMPERATURE_NAMES:
            if getattr(self, t) <= 0:
                raise ValueError(f"temperature {t} must be positive")
        if self.N < 0 or self.M < 0:
            raise ValueError("N and M must be nonnegative")
        if not 0 <= self.label_smoothing < 0.5:
            raise ValueError("label_smoothing must lie in [0, 0.5)")
        if self.relation_sampling not in ("argmax", "softmax"):
            raise ValueError("relation_sampling must be 'argmax' or 'softmax'")
        if self.kl_reduction not in REDUCTIONS:
            raise ValueError(f"kl_reduction must be one of {REDUCTIONS}")

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "FusionConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def temperatures(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TEMPERATURE_NAMES}


# Joint-learning settings reported per benchmark.
PRESETS: dict[str, dict] = {
    "fb15k-237_20": dict(M=4, alpha_t=1.0, alpha_s=1.0, beta_t=6.0, beta_s=4.0),
    "wn18rr": dict(M=4, tx_ml_t=2.0, st_ml_t=2.0, alpha_t=1.0, alpha_s=1.0,
                   beta_t=1.0, beta_s=1.0),
    "cn-100k": dict(M=8, tx_vem_t=5.0, tx_ml_t=5.0, alpha_t=1.0, alpha_s=1.0,
                    beta_t=4.0, beta_s=1.0),
}


def preset(name: str, **overrides) -> FusionConfig:
    key = name.lower()
    if key not in PRESETS:
        raise KeyError(f"no preset {name!r}; choose from {sorted(PRESETS)}")
    return FusionConfig(**{**PRESETS[key], **overrides})


# ----------------------------------------------------------------------
# supervised
# ----------------------------------------------------------------------
def smoothed_targets(label_sets: Sequence[Sequence[int]], n_entities: int,
                     smoothing: float, dtype=np.float32) -> np.ndarray:
    """Multi-hot targets: 1 - eps on labels, eps / |E| elsewhere."""
    y = np.full((len(label_sets), n_entities), smoothing / n_entities, dtype=dtype)
    for i, labels in enumerate(label_sets):
        if len(labels) == 0:
            raise ValueError("empty label set")
        y[i, list(labels)] = 1.0 - smoothing
    return y


def supervised_loss(logits: Tensor, label_sets, smoothing: float = 0.1) -> Tensor:
    """Binary cross-entropy against smoothed multi-hot targets, mean over entities
    (and over the batch for 2-d logits)."""
    single = logits.ndim == 1
    if single:
        label_sets = [label_sets]
        logits = dm.reshape(logits, (1, -1))
    y = smoothed_targets(label_sets, logits.shape[1], smoothing, logits.dtype)
    return dm.mean(dm.bce_with_logits(logits, y))


# ----------------------------------------------------------------------
# distribution matching
# ----------------------------------------------------------------------
def _teacher(p) -> np.ndarray:
    arr = p.data if isinstance(p, Tensor) else np.asarray(p)
    return np.asarray(arr)


def _reduce(per_query: Tensor, reduction: str, width: int = 1) -> Tensor:
    if reduction == "sum":
        return dm.tsum(per_query)
    if reduction not in ("mean", "elementwise"):
        raise ValueError(f"unknown reduction {reduction!r}")
    n = per_query.shape[0]
    if n == 0:
        return dm.tsum(per_query)
    scale = 1.0 / (n * (width if reduction == "elementwise" else 1))
    return dm.tsum(per_query) * scale


def _student_logp(student_logits: Tensor, temperature: float) -> Tensor:
    return dm.log_softmax(student_logits, axis=-1, temperature=temperature)


def forward_kl(teacher_probs, student_logits: Tensor, student_t: float = 1.0,
               reduction: str = "mean") -> Tensor:
    """KL(teacher || student) per row; the teacher is a constant."""
    p = _teacher(teacher_probs).astype(student_logits.dtype)
    if p.shape != student_logits.shape:
        raise ValueError(f"misaligned distributions {p.shape} vs {student_logits.shape}")
    logq = _student_logp(student_logits, student_t)
    with np.errstate(divide="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
    per = Tensor(plogp.astype(student_logits.dtype)) - dm.tsum(logq * p, axis=-1)
    return _reduce(per, reduction, student_logits.shape[-1])


def reverse_kl(student_logits: Tensor, teacher_probs, student_t: float = 1.0,
               reduction: str = "sum", eps: float = EPS) -> Tensor:
    """KL(student || teacher) per row; the teacher is a constant floored at eps."""
    p = _teacher(teacher_probs)
    if p.shape != student_logits.shape:
        raise ValueError(f"misaligned distributions {p.shape} vs {student_logits.shape}")
    logp = np.log(np.maximum(p, eps)).astype(student_logits.dtype)
    logq = _student_logp(student_logits, student_t)
    q = dm.exp(logq)
    per = dm.tsum(q * (logq - logp), axis=-1)
    return _reduce(per, reduction, student_logits.shape[-1])


def ml_loss_text(p_teacher, q_logits: Tensor, cfg: FusionConfig | None = None,
                 reduction: str = "mean") -> Tensor:
    """Text model mimics the structure model on observed queries: KL(p || q).

    ``p_teacher`` is the structure distribution already tempered with st_ml_t;
    the student uses tx_ml_s.
    """
    cfg = cfg or FusionConfig()
    loss = forward_kl(p_teacher, q_logits, cfg.tx_ml_s, reduction)
    return loss * cfg.tx_ml_s ** 2 if cfg.scale_by_t2 else loss


def ml_loss_struct(q_teacher, p_logits: Tensor, cfg: FusionConfig | None = None,
                   reduction: str = "mean") -> Tensor:
    """Structure model mimics the text model on observed queries: KL(q || p).

    ``q_teacher`` is tempered with tx_ml_t; the student uses st_ml_s.
    """
    cfg = cfg or FusionConfig()
    loss = forward_kl(q_teacher, p_logits, cfg.st_ml_s, reduction)
    return loss * cfg.st_ml_s ** 2 if cfg.scale_by_t2 else loss


def vem_e_loss(q_logits: Tensor, p_teacher, cfg: FusionConfig | None = None,
               reduction: str = "sum") -> Tensor:
    """E-step loss over generated queries: sum_m KL(q_m || p_m(overlay)).

    The text model is the student (tx_vem_s); ``p_teacher`` comes from the
    structure model under the densified graph, tempered with st_vem_t.
    """
    cfg = cfg or FusionConfig()
    if q_logits.shape[0] != _teacher(p_teacher).shape[0]:
        raise ValueError("generated query lists are misaligned")
    if q_logits.shape[0] == 0:
        return Tensor(np.zeros((), dtype=q_logits.dtype))
    return reverse_kl(q_logits, p_teacher, cfg.tx_vem_s, reduction)


def vem_m_loss(q_teacher, p_logits: Tensor, cfg: FusionConfig | None = None,
               reduction: str = "sum", eps: float = EPS) -> Tensor:
    """M-step loss over generated queries: -sum_n sum_y q_n(y) log p_n(y).

    The expectation over the label is exact (both vectors are materialised);
    ``q_teacher`` is tempered with tx_vem_t and the student uses st_vem_s.
    """
    cfg = cfg or FusionConfig()
    q = _teacher(q_teacher).astype(p_logits.dtype)
    if q.shape != p_logits.shape:
        raise ValueError(f"generated query lists are misaligned {q.shape} vs {p_logits.shape}")
    if q.shape[0] == 0:
        return Tensor(np.zeros((), dtype=p_logits.dtype))
    logp = _student_logp(p_logits, cfg.st_vem_s)
    if eps:
        logp = dm.log(dm.clamp_min(dm.exp(logp), eps))
    per = -dm.tsum(logp * q, axis=-1)
    return _reduce(per, reduction, p_logits.shape[-1])


def combined_e_objective(sup_loss, vem_e, ml_q, cfg: FusionConfig):
    """Text-side objective: supervised + alpha_t * VEM + alpha_s * mutual."""
    return sup_loss + cfg.alpha_t * vem_e + cfg.alpha_s * ml_q


def combined_m_objective(sup_loss, vem_m, ml_p, cfg: FusionConfig):
    """Structure-side objective: supervised + beta_t * VEM + beta_s * mutual."""
    return sup_loss + cfg.beta_t * vem_m + cfg.beta_s * ml_p


# ----------------------------------------------------------------------
# exact ELBO bookkeeping on enumerable graphs
# ----------------------------------------------------------------------
@dataclass
class ElboReport:
    log_likelihood: float
    elbo: float
    kl: float
    residual: float
    per_triple_identity: list[float] = field(default_factory=list)
    n_configurations: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


MAX_CONFIGURATIONS = 10 ** 6


def joint_log_prob(struct_model, observed: np.ndarray, unobserved_queries: np.ndarray,
                   labels: Sequence[int]) -> tuple[float, float]:
    """``(log p(Y_U), log p(Y_L | Y_U))`` for one labelling of the unobserved queries.

    The joint factorises as a prior over each unobserved label given the base
    graph, times the observed labels predicted with the unobserved triples
    (and their mirrors) layered onto the graph.
    """
    from .structure import GraphOverlay

    x, z = struct_model.encode(None)
    base = dm.log_softmax(struct_model.score(unobserved_queries[:, 0],
                                             unobserved_queries[:, 1], x, z)).data
    log_prior = float(sum(base[i, y] for i, y in enumerate(labels)))
    graph = struct_model.graph
    extra = []
    for (h, r), y in zip(unobserved_queries.tolist(), labels):
        extra.append((h, r, y))
        if graph.augmented:
            extra.append((y, graph.inverse(r), h))
    overlay = GraphOverlay(np.array(extra, dtype=np.int64).reshape(-1, 3),
                           np.ones(len(extra)))
    x, z = struct_model.encode(overlay)
    obs = dm.log_softmax(struct_model.score(observed[:, 0], observed[:, 1], x, z)).data
    log_lik = float(sum(obs[i, t] for i, t in enumerate(observed[:, 2].tolist())))
    return log_prior, log_lik


def elbo_diagnostic(struct_model, observed, unobserved_queries, q_dists=None,
                    text_model=None) -> ElboReport:
    """Exact log-likelihood, ELBO and posterior KL by enumerating all labellings.

    ``q_dists`` (one distribution per unobserved query) defaults to the text
    model's predictions; the joint over unobserved labels is their product.
    Everything is computed in float64.
    """
    observed = np.asarray(observed, dtype=np.int64).reshape(-1, 3)
    uq = np.asarray(unobserved_queries, dtype=np.int64).reshape(-1, 2)
    n_ent = struct_model.n_entities
    n_conf = n_ent ** len(uq)
    if n_conf > MAX_CONFIGURATIONS:
        raise ValueError(f"{n_conf} configurations exceed the enumeration bound")
    if q_dists is None:
        if text_model is None:
            raise ValueError("need q_dists or a text model")
        q_dists = text_model.predict_q(uq[:, 0], uq[:, 1])
    q_dists = np.asarray(q_dists, dtype=np.float64).reshape(len(uq), n_ent)

    configs = list(itertools.product(range(n_ent), repeat=len(uq)))
    log_joint = np.empty(len(configs))
    for i, labels in enumerate(configs):
        lp, ll = joint_log_prob(struct_model, observed, uq, labels)
        log_joint[i] = lp + ll
    q_joint = np.array([np.prod([q_dists[j, y] for j, y in enumerate(c)]) for c in configs])

    m = log_joint.max()
    log_lik = float(m + np.log(np.exp(log_joint - m).sum()))
    log_post = log_joint - log_lik
    support = q_joint > 0
    log_q = np.log(np.where(support, q_joint, 1.0))
    elbo = float(np.sum(np.where(support, q_joint * (log_joint - log_q), 0.0)))
    kl = float(np.sum(np.where(support, q_joint * (log_q - log_post), 0.0)))
    residual = abs(log_lik - (elbo + kl))

    # per-query identity KL(q||p) + H(q) + E_q[ln p] = 0 against the posterior marginals
    post = np.exp(log_post)
    identity = []
    for j in range(len(uq)):
        marg = np.zeros(n_ent)
        for c, w in zip(configs, post):
            marg[c[j]] += w
        qj = q_dists[j]
        e_logp = float(np.sum(np.where(qj > 0, qj * np.log(np.maximum(marg, EPS)), 0.0)))
        identity.append(dm.kl_div(qj, marg) + dm.entropy(qj) + e_logp)
    return ElboReport(log_lik, elbo, kl, residual, identity, len(configs))


def exact_posterior(struct_model, observed, unobserved_queries) -> np.ndarray:
    """Posterior p(Y_U | Y_L) over all labellings (flattened, row-major)."""
    observed = np.asarray(observed, dtype=np.int64).reshape(-1, 3)
    uq = np.asarray(unobserved_queries, dtype=np.int64).reshape(-1, 2)
    configs = list(itertools.product(range(struct_model.n_entities), repeat=len(uq)))
    lj = np.array([sum(joint_log_prob(struct_model, observed, uq, c)) for c in configs])
    lj -= lj.max()
    post = np.exp(lj)
    return post / post.sum()
