"""Generate unobserved queries on the split-signal fixture, label their
neighbours with the text model and lay them over the graph.

    python3 demos/densify_queries.py
"""
import numpy as np

from vemfuse.densify import densify
from vemfuse.fixtures import generate_split_signal
from vemfuse.kg import augment_inverse
from vemfuse.structure import StructConfig, StructureModel
from vemfuse.text import TextConfig, TextModel

data = generate_split_signal()
graph, split = augment_inverse(data.graph, data.split)
st = StructureModel(graph, StructConfig(dim=16))
tx = TextModel(graph, TextConfig(dim=16))
before = graph.content_hash()

batch = densify(graph, st, tx, N=8, M=3, rng=np.random.default_rng(0))
for q in batch.queries[:5]:
    print(f"({graph.entities[q.head]}, {graph.relations[q.relation]}, ?)  "
          f"similarity {q.similarity_score:.2f}, {q.neighbor_slots} neighbours")
print("overlay edges:", len(batch.overlay))
print("stats:", batch.stats.to_dict())
print("base graph untouched:", graph.content_hash() == before)
