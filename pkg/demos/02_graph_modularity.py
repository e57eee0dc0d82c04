"""
Modularity of soft partitions on a kNN graph
============================================

Two well separated point clouds give a kNN graph with two communities.  The
partition that follows the clouds scores high modularity, a random soft
partition scores near zero.
"""

import numpy as np
import torch

from freecsl import knn_adjacency, modularity_matrix
from freecsl.cse import modularity

rng = np.random.default_rng(0)
points = np.vstack([rng.normal(0, 1, (20, 2)), rng.normal(8, 1, (20, 2))])
graph = knn_adjacency(points, 3)
b = modularity_matrix(graph)

print("edges:", graph.edge_count, " max |row sum of B|:", np.abs(b.sum(1)).max())

truth = np.repeat(np.eye(2), 20, axis=0)
noise = rng.dirichlet(np.ones(2), size=40)
print("modularity, cloud partition :", round(float(modularity(truth, b, graph.edge_count)), 3))
print("modularity, random partition:", round(float(modularity(noise, b, graph.edge_count)), 3))
