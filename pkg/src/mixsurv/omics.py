"""Per-block omics encoder: linear bottleneck followed by a top-k mixture of experts."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .numerics import DTYPE


@dataclass
class MoeRouting:
    """Selected experts (``indices``, shape N×top_k) and their renormalised weights."""

    indices: torch.Tensor
    weights: torch.Tensor
    gate_probs: torch.Tensor

    def dense_weights(self, n_experts: int) -> torch.Tensor:
        dense = torch.zeros(self.indices.shape[0], n_experts, dtype=self.weights.dtype)
        return dense.scatter(1, self.indices, self.weights)


class Expert(nn.Module):
    """Two-layer perceptron with a residual path: h + W2 relu(W1 h + b1) + b2."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim, dtype=DTYPE)
        self.fc2 = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, h):
        return h + self.fc2(torch.relu(self.fc1(h)))


def top_k_route(logits: torch.Tensor, top_k: int) -> MoeRouting:
    """Keep the ``top_k`` largest logits per row (ties go to the lower index) and
    softmax over the kept ones only."""
    n_experts = logits.shape[-1]
    if top_k > n_experts or top_k < 1:
        raise ValueError(f"top_k={top_k} must lie in [1, {n_experts}]")
    order = torch.argsort(-logits.detach(), dim=-1, stable=True)
    idx = order[:, :top_k]
    kept = torch.gather(logits, 1, idx)
    return MoeRouting(idx, torch.softmax(kept, dim=-1), torch.softmax(logits, dim=-1))


def load_balance_loss(gate_probs: torch.Tensor) -> torch.Tensor:
    """E * sum_e P_e * P_e, with P_e the batch-mean gate probability of expert e.

    Bounded below by 1 (uniform routing) for any batch.
    """
    if gate_probs.shape[0] == 0:
        return gate_probs.new_zeros(())
    mean_prob = gate_probs.mean(dim=0)
    return gate_probs.shape[1] * torch.sum(mean_prob * mean_prob)


class OmicsBlockEncoder(nn.Module):
    def __init__(self, d_in: int, d_pre: int = 256, n_experts: int = 4, top_k: int = 2,
                 dropout: float = 0.1, ln_eps: float = 1e-5):
        super().__init__()
        if top_k > n_experts or top_k < 1:
            raise ValueError(f"top_k={top_k} must lie in [1, n_experts={n_experts}]")
        if d_pre >= d_in:
            warnings.warn(f"bottleneck width {d_pre} is not smaller than input width {d_in}", stacklevel=2)
        self.d_in, self.d_pre, self.top_k = d_in, d_pre, top_k
        self.pre = nn.Linear(d_in, d_pre, dtype=DTYPE)
        self.norm = nn.LayerNorm(d_pre, eps=ln_eps, dtype=DTYPE)
        self.drop = nn.Dropout(dropout)
        self.experts = nn.ModuleList(Expert(d_pre) for _ in range(n_experts))
        self.gate = nn.Linear(d_pre, n_experts, dtype=DTYPE)
        self.default = nn.Parameter(torch.zeros(d_pre, dtype=DTYPE))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"omics block has {x.shape[-1]} features, encoder expects {self.d_in}")
        return self.drop(torch.relu(self.norm(self.pre(x))))

    def moe(self, h: torch.Tensor):
        routing = top_k_route(self.gate(h), self.top_k)
        outputs = torch.stack([f(h) for f in self.experts], dim=1)  # N x E x d
        weights = routing.dense_weights(self.n_experts)
        z = torch.einsum("ne,ned->nd", weights, outputs)
        return z, routing, load_balance_loss(routing.gate_probs)

    def forward(self, x: torch.Tensor, present: torch.Tensor | None = None):
        n = x.shape[0]
        if present is None:
            present = torch.ones(n, dtype=torch.bool)
        z = self.default.expand(n, self.d_pre).clone()
        aux = x.new_zeros(())
        if bool(present.any()):
            zp, _, aux = self.moe(self.bottleneck(x[present]))
            z = z.index_put((present.nonzero(as_tuple=True)[0],), zp)
        return z, aux


class OmicsEncoder(nn.Module):
    """One bottleneck+MoE encoder per omics sub-block."""

    def __init__(self, block_dims: Sequence[int], d_pre: int = 256, n_experts: int = 4,
                 top_k: int = 2, dropout: float = 0.1):
        super().__init__()
        self.blocks = nn.ModuleList(OmicsBlockEncoder(d, d_pre, n_experts, top_k, dropout) for d in block_dims)
        self.d_pre = d_pre

    @property
    def out_dim(self) -> int:
        return self.d_pre * len(self.blocks)

    def forward(self, xs: Sequence[torch.Tensor], present: Sequence[torch.Tensor]):
        """Returns the per-block embeddings z^(s) and the summed auxiliary loss."""
        if len(xs) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} omics blocks, got {len(xs)}")
        zs, total = [], None
        for enc, x, p in zip(self.blocks, xs, present):
            z, aux = enc(x, p)
            zs.append(z)
            total = aux if total is None else total + aux
        return zs, total
