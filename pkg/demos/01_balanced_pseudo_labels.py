"""
Balanced pseudo-labels from prototype scores
============================================

Soft assignments follow the scores directly; Sinkhorn labels are pushed to use
every prototype equally often, which is what stops one cluster from absorbing
the batch.
"""

import numpy as np
import torch

from freecsl import sinkhorn_labels, soft_assign
from freecsl.fusion import unit_rows

rng = np.random.default_rng(0)

# 12 codes that all lean towards prototype 0
prototypes = np.eye(3)
codes = unit_rows(np.array([1.0, 0.2, 0.1]) + 0.3 * rng.normal(size=(12, 3)))

p = soft_assign(torch.tensor(codes), prototypes, 0.1)
q = sinkhorn_labels(torch.tensor(codes) / 0.1, prototypes, alpha=0.5, iters=50)

print("soft assignment column mass :", np.round(p.sum(0).numpy(), 2))
print("sinkhorn label column mass  :", np.round(q.sum(0).numpy(), 2))

# larger alpha flattens the labels towards uniform
for alpha in (0.05, 0.5, 5.0):
    q = sinkhorn_labels(torch.tensor(codes) / 0.1, prototypes, alpha=alpha, iters=50)
    print(f"alpha={alpha:<5} mean max label = {q.max(1).values.mean():.3f}")
