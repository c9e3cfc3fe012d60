"""Finite-difference checks of every training loss on small float64 models,
and a look at what the teacher side receives from a mimicry loss.

    python3 demos/gradient_checks.py
"""
import numpy as np

from vemfuse import diffmath as dm
from vemfuse import losses as L
from vemfuse.fixtures import tiny_graph
from vemfuse.kg import augment_inverse
from vemfuse.structure import StructConfig, StructureModel
from vemfuse.text import TextConfig, TextModel

graph, split, _ = tiny_graph()
graph, split = augment_inverse(graph, split)
st = StructureModel(graph, StructConfig(dim=6, dtype="float64"))
tx = TextModel(graph, TextConfig(dim=6, dtype="float64"))

heads, rels = graph.triples[:4, 0], graph.triples[:4, 1]
labels = [[int(t)] for t in graph.triples[:4, 2]]
teacher = dm.softmax_T(np.random.default_rng(0).normal(size=(4, graph.n_entities)))

checks = {
    "supervised (structure)": (lambda: L.supervised_loss(st.logits(heads, rels), labels), st),
    "supervised (text)": (lambda: L.supervised_loss(tx.logits(heads, rels), labels), tx),
    "mutual, text student": (lambda: L.ml_loss_text(teacher, tx.logits(heads, rels)), tx),
    "mutual, structure student": (lambda: L.ml_loss_struct(teacher, st.logits(heads, rels)), st),
    "E-step": (lambda: L.vem_e_loss(tx.logits(heads, rels), teacher), tx),
    "M-step": (lambda: L.vem_m_loss(teacher, st.logits(heads, rels)), st),
}
for name, (fn, model) in checks.items():
    err = dm.finite_diff_check(fn, model.parameters())
    print(f"{name:28s} max relative error {err:.1e}")

# hand the teacher over still attached to its graph: nothing flows back
dm.zero_grad(st.parameters() + tx.parameters())
dm.backward(L.ml_loss_text(dm.softmax(st.logits(heads, rels), -1), tx.logits(heads, rels)))
print("teacher gradients all empty:", all(p.grad is None for p in st.parameters()))
