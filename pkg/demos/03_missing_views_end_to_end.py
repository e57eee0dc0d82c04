"""
Clustering two views with half the instances missing one view
=============================================================

Train on Gaussian blobs where 50% of instances lack a view, then compare the
learned consensus against filling the gaps by neighbour transfer.  Writes a
similarity heatmap of the consensus codes next to this script.
"""

import os
import time
from dataclasses import replace

import numpy as np
import torch

from freecsl import MaskSpec, TrainConfig, evaluate, fit, impute_baseline, make_blobs, normalize, predict
from freecsl.evaluation import consensus_rate, save_similarity, similarity_matrix
from freecsl.train import consensus, epoch_targets, paired_semantics

torch.set_num_threads(1)

rate, seed = 0.5, 0
data = normalize(make_blobs(seed=seed, mask_spec=MaskSpec(rate, seed)))
print(f"N={data.n} views={data.n_views} complete={int(data.mask.all(1).sum())}")

config = TrainConfig(warmup_epochs=50, finetune_epochs=50, batch_size=128, seed=seed)
t0 = time.time()
state, reports = fit(data, config)
print(f"trained in {time.time() - t0:.0f}s; last epoch {reports[-1]}")

ours = evaluate(predict(state, data), data.labels, data.n_clusters)
print("consensus clustering :", ours)

# neighbour-transfer imputation on a model trained without the contrastive term
plain, _ = fit(data, replace(config, use_cc=False))
print("latent imputation    :", evaluate(impute_baseline(plain, data, "ILR"), data.labels, 3))

protos, _ = epoch_targets(state, data, config, config.warmup_epochs + config.finetune_epochs)
h0, h1 = paired_semantics(state, data)
print(f"paired codes agreeing on a prototype: {consensus_rate(h0, h1, protos.prototypes):.3f}")

stem = os.path.join(os.path.dirname(os.path.abspath(__file__)), "consensus_similarity")
sim = similarity_matrix(consensus(state, data), order_by=data.labels)
print("heatmap:", save_similarity(sim, stem))
