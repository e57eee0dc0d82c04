"""Consensus semantic learning for incomplete multi-view clustering."""

from .csl import CslConfig, sinkhorn_labels, soft_assign, swapped_kd_pair, total_cc_loss
from .cse import CseConfig, ViewGraph, kl_modularity_loss, knn_adjacency, modularity_matrix, t_dist_labels
from .data import MaskSpec, MultiViewDataset, generate_mask, load_dataset, make_blobs, normalize
from .evaluation import MetricReport, ari, clustering_accuracy, evaluate, nmi, semantic_consensus
from .fusion import PrototypeSet, completeness_weights, consensus_prototypes, fuse, kmeans
from .nets import Architecture, ModelState, init_params, load_checkpoint, save_checkpoint
from .train import TrainConfig, fit, finetune, impute_baseline, predict, warmup

__version__ = "0.1.0"
