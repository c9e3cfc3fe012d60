"""Filtered ranks under the three tie policies, and a full evaluation of a
briefly trained structure model.

    python3 demos/ranking_protocols.py
"""
import numpy as np

from vemfuse.evaluation import evaluate, filtered_rank
from vemfuse.fixtures import generate_split_signal
from vemfuse.kg import augment_inverse
from vemfuse.structure import StructConfig, StructureModel
from vemfuse.trainer import TrainConfig, pretrain

# entity 2 is the answer; entity 0 is another known answer and is filtered out
scores = np.array([5.0, 3.0, 3.0, 3.0, 1.0])
for policy in ("optimistic", "expected", "random"):
    ranks = [filtered_rank(scores, 2, {0}, policy, seed) for seed in range(1000)]
    print(f"{policy:10s} mean rank {np.mean(ranks):.3f}")

data = generate_split_signal()
graph, split = augment_inverse(data.graph, data.split)
model = StructureModel(graph, StructConfig(dim=32))
pretrain(model, graph, split, TrainConfig(pretrain_epochs=20, lr_struct=0.01))
metrics, results = evaluate(model, graph, split, "test", "expected")
print(metrics.to_json())
