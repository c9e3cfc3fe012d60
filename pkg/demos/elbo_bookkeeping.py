"""Exact likelihood, lower bound and posterior gap on a graph small enough
to enumerate every labelling of the unobserved query.

    python3 demos/elbo_bookkeeping.py
"""
import numpy as np

from vemfuse import losses as L
from vemfuse.fixtures import tiny_graph
from vemfuse.kg import augment_inverse
from vemfuse.structure import StructConfig, StructureModel
from vemfuse.text import TextConfig, TextModel

graph, split, unobserved = tiny_graph()
graph, split = augment_inverse(graph, split)
st = StructureModel(graph, StructConfig(dim=6, dtype="float64"))
tx = TextModel(graph, TextConfig(dim=6, dtype="float64"))

rep = L.elbo_diagnostic(st, split.train, unobserved, text_model=tx)
print(f"log p(observed)   {rep.log_likelihood:.6f}")
print(f"lower bound       {rep.elbo:.6f}")
print(f"KL(q || posterior) {rep.kl:.6f}")
print(f"residual          {rep.residual:.1e}")

# the bound is tight when q is the exact posterior
post = L.exact_posterior(st, split.train, unobserved)
tight = L.elbo_diagnostic(st, split.train, unobserved, q_dists=post.reshape(1, -1))
print(f"with q = posterior: gap {tight.log_likelihood - tight.elbo:.1e}")
print("posterior over tails:", np.round(post, 3))
