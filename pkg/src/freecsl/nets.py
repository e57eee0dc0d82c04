"""Network parameters and forward passes.

Every view owns an autoencoder and a two-layer residual GCN; the contrastive
head and the cluster classifier are shared across views.  ``ModelState`` is a
plain ``torch.nn.Module`` so optimizers and autograd work on it directly.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"  # relu | none | softmax

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be positive")
        if self.activation not in ("relu", "none", "softmax"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Architecture:
    view_dims: tuple
    n_clusters: int
    latent_dim: int = 64
    hidden: tuple = (500, 500, 2000)
    head_dim: int = 64
    gcn_dims: tuple = (128, 64)

    def __post_init__(self):
        object.__setattr__(self, "view_dims", tuple(int(d) for d in self.view_dims))
        object.__setattr__(self, "hidden", tuple(int(d) for d in self.hidden))
        object.__setattr__(self, "gcn_dims", tuple(int(d) for d in self.gcn_dims))
        if self.head_dim != self.latent_dim:
            # the contrastive head is square
            raise ValueError("head_dim must equal latent_dim")
        if len(self.gcn_dims) != 2:
            raise ValueError("the graph branch has exactly two aggregation layers")

    def encoder_layers(self, v: int) -> list:
        dims = (self.view_dims[v],) + self.hidden + (self.latent_dim,)
        return [LayerSpec(a, b, "relu" if i < len(dims) - 2 else "none")
                for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def decoder_layers(self, v: int) -> list:
        dims = (self.latent_dim,) + self.hidden[::-1] + (self.view_dims[v],)
        return [LayerSpec(a, b, "relu" if i < len(dims) - 2 else "none")
                for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def gcn_layers(self) -> list:
        g1, g2 = self.gcn_dims
        return [LayerSpec(self.latent_dim, g1, "relu"), LayerSpec(g1, g2, "none")]


class ShapeError(ValueError):
    pass


class GraphConv(nn.Module):
    """One residual aggregation layer: act(A_norm Z W + Z W_s)."""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        self.weight = nn.Linear(spec.in_dim, spec.out_dim, bias=False)
        self.skip = nn.Linear(spec.in_dim, spec.out_dim, bias=False)

    def forward(self, z, a_norm):
        return graph_conv(z, a_norm, self.weight.weight.T, self.skip.weight.T, self.spec.activation)


def graph_conv(z, a_norm, w, w_skip, activation="relu"):
    out = a_norm @ (z @ w) + z @ w_skip
    return F.relu(out) if activation == "relu" else out


def normalize_adjacency(adj: torch.Tensor) -> torch.Tensor:
    """D^-1/2 A D^-1/2 with zero scaling for isolated nodes."""
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"adjacency must be square, got {tuple(adj.shape)}")
    if not torch.equal(adj, adj.T):
        raise ValueError("adjacency must be symmetric")
    if torch.any(torch.diagonal(adj) != 0):
        raise ValueError("adjacency must have a zero diagonal")
    deg = adj.sum(dim=1)
    inv_sqrt = torch.where(deg > 0, deg.clamp_min(1e-300).rsqrt(), torch.zeros_like(deg))
    return inv_sqrt[:, None] * adj * inv_sqrt[None, :]


def _mlp(specs: Sequence[LayerSpec]) -> nn.ModuleList:
    return nn.ModuleList(nn.Linear(s.in_dim, s.out_dim) for s in specs)


def _run_mlp(layers: nn.ModuleList, x):
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = F.relu(x)
    return x


class ModelState(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        V = len(arch.view_dims)
        self.encoders = nn.ModuleList(_mlp(arch.encoder_layers(v)) for v in range(V))
        self.decoders = nn.ModuleList(_mlp(arch.decoder_layers(v)) for v in range(V))
        self.head = nn.Linear(arch.latent_dim, arch.head_dim)
        self.gcns = nn.ModuleList(
            nn.ModuleList(GraphConv(s) for s in arch.gcn_layers()) for _ in range(V)
        )
        self.classifier = nn.Linear(arch.gcn_dims[-1], arch.n_clusters)

    @property
    def n_views(self) -> int:
        return len(self.arch.view_dims)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def as_tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(x, dtype=self.dtype)

    def _check_finite(self, module: nn.Module, what: str) -> None:
        for name, p in module.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"non-finite parameter in {what}.{name}")

    def encode(self, x, view: int) -> torch.Tensor:
        """Latent codes for observed rows of ``view``."""
        x = self.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.arch.view_dims[view]:
            raise ShapeError(f"view {view} expects width {self.arch.view_dims[view]}, got {tuple(x.shape)}")
        self._check_finite(self.encoders[view], f"encoder[{view}]")
        return _run_mlp(self.encoders[view], x)

    def decode(self, z, view: int) -> torch.Tensor:
        z = self.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.arch.latent_dim:
            raise ShapeError(f"decoder expects width {self.arch.latent_dim}, got {tuple(z.shape)}")
        self._check_finite(self.decoders[view], f"decoder[{view}]")
        return _run_mlp(self.decoders[view], z)

    def contrastive_head(self, z) -> torch.Tensor:
        """Unit-norm semantic codes.  A row that maps to zero becomes the uniform unit vector."""
        h = self.head(self.as_tensor(z))
        norm = h.norm(dim=1, keepdim=True)
        uniform = torch.full_like(h, 1.0 / math.sqrt(h.shape[1]))
        return torch.where(norm > 0, h / norm.clamp_min(1e-30), uniform)

    def gcn_forward(self, z, adjacency, view: int) -> torch.Tensor:
        a_norm = normalize_adjacency(self.as_tensor(adjacency))
        z = self.as_tensor(z)
        if z.shape[0] != a_norm.shape[0]:
            raise ShapeError(f"{z.shape[0]} node features for a graph with {a_norm.shape[0]} nodes")
        for layer in self.gcns[view]:
            z = layer(z, a_norm)
        return z

    def node_logits(self, z, adjacency, view: int) -> torch.Tensor:
        return self.classifier(self.gcn_forward(z, adjacency, view))

    def autoencoder_parameters(self):
        for module in (self.encoders, self.decoders):
            yield from module.parameters()


def init_params(arch: Architecture, seed: int = 0, dtype=torch.float32) -> ModelState:
    """Fresh state: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero."""
    state = ModelState(arch).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in state.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                bound = math.sqrt(6.0 / p.shape[1])
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return state


@dataclass
class GradientTape:
    loss: float
    grads: Dict[str, torch.Tensor] = field(default_factory=dict)


def backward(loss: torch.Tensor, state: ModelState) -> GradientTape:
    """Gradients of a scalar loss with respect to every parameter of ``state``.

    Parameters the loss does not touch get explicit zeros.
    """
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(float(loss))
    if loss.numel() != 1:
        raise ShapeError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    names, params = zip(*state.named_parameters())
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        grads = (None,) * len(params)
    return GradientTape(
        loss=float(loss.detach()),
        grads={n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)},
    )


# -- checkpoints --------------------------------------------------------------
# A checkpoint is an uncompressed numpy .npz archive holding
#   __version__  int, CHECKPOINT_VERSION
#   __arch__     JSON string of the Architecture fields
#   __dtype__    "float32" | "float64"
#   one array per parameter, keyed by its state_dict name, e.g.
#   encoders.0.0.weight (out_dim, in_dim), gcns.1.0.skip.weight, classifier.bias
# Arrays are stored in state_dict order.

def save_checkpoint(state: ModelState, path: str) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in state.state_dict().items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__arch__"] = np.array(json.dumps(asdict(state.arch)))
    arrays["__dtype__"] = np.array(str(state.dtype).replace("torch.", ""))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> ModelState:
    with np.load(path, allow_pickle=False) as archive:
        version = int(archive["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = Architecture(**json.loads(str(archive["__arch__"])))
        dtype = getattr(torch, str(archive["__dtype__"]))
        state = ModelState(arch).to(dtype)
        tensors = {k: torch.from_numpy(archive[k].copy()) for k in state.state_dict()}
    state.load_state_dict(tensors)
    return state
