"""Write the split-signal fixture to disk, load it back, sparsify the
training set and look at relation overlap.

    python3 demos/dataset_tools.py
"""
import tempfile
from pathlib import Path

import numpy as np

from vemfuse import degree_stats, load_dataset, relation_jaccard, sparsify
from vemfuse.fixtures import check_split_signal, generate_split_signal, write_split_signal

data = generate_split_signal()
print("tagged subset sizes:", check_split_signal(data))

with tempfile.TemporaryDirectory() as tmp:
    paths = write_split_signal(data, Path(tmp))
    graph, split = load_dataset(paths["train"], paths["valid"], paths["test"],
                                paths["entity_text"], paths["relation_text"])

print(f"{graph.n_entities} entities, {graph.n_relations} relations, "
      f"{len(split.train)} train / {len(split.valid)} valid / {len(split.test)} test")
print("entity 0 text:", repr(graph.text.entity_text[0]))

sparse = sparsify(split, 0.2, seed=0)
print(f"sparsified train: {len(split.train)} -> {len(sparse.train)}")
print("average out-degree:", degree_stats(graph)["average_out_degree"])

sim, empty = relation_jaccard(graph)
np.set_printoptions(precision=2, suppress=True)
print("head-set Jaccard between relations:")
for name, row in zip(graph.relations, sim):
    print(f"  {name:10s}", row)
