"""Modality embeddings, pairwise cross-attention and fused patient representation."""
from __future__ import annotations

import math

import torch
from torch import nn

from .numerics import DTYPE

MODS = ("C", "P", "O")
PAIRS = (("C", "P"), ("C", "O"), ("P", "C"), ("P", "O"), ("O", "C"), ("O", "P"))


class FeedForwardBlock(nn.Module):
    """Post-norm feed-forward sublayer: LayerNorm(x + W2 dropout(relu(W1 x)))."""

    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, dim, dtype=DTYPE)
        self.drop = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(dim, dtype=DTYPE)

    def forward(self, x):
        return self.norm(x + self.drop(self.fc2(self.drop(torch.relu(self.fc1(x))))))


class ModalityEmbed(nn.Module):
    """MLP_r (two linear layers with ReLU) followed by a per-modality encoder.

    A single-token modality makes self-attention the identity on the value path,
    so the encoder keeps only its feed-forward sublayers.
    """

    def __init__(self, d_in: int, dim: int, n_layers: int = 2, dropout: float = 0.1):
        super().__init__()
        self.d_in = d_in
        self.fc1 = nn.Linear(d_in, dim, dtype=DTYPE)
        self.fc2 = nn.Linear(dim, dim, dtype=DTYPE)
        self.layers = nn.ModuleList(FeedForwardBlock(dim, 2 * dim, dropout) for _ in range(n_layers))

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"modality has {x.shape[-1]} features, embedding expects {self.d_in}")
        z = self.fc2(torch.relu(self.fc1(x)))
        for layer in self.layers:
            z = layer(z)
        return z


def multihead_attention(q_tokens, kv_tokens, w_q, w_k, w_v, n_heads: int):
    """Scaled dot-product attention, tokens shaped (N, L, D). Returns (output, weights).

    Weights have shape (N, heads, Lq, Lk); each row is a probability vector.
    """
    n, lq, dim = q_tokens.shape
    if dim % n_heads:
        raise ValueError(f"embedding dim {dim} is not divisible by {n_heads} heads")
    dk = dim // n_heads
    lk = kv_tokens.shape[1]
    q = (q_tokens @ w_q).reshape(n, lq, n_heads, dk).transpose(1, 2)
    k = (kv_tokens @ w_k).reshape(n, lk, n_heads, dk).transpose(1, 2)
    v = (kv_tokens @ w_v).reshape(n, lk, n_heads, dk).transpose(1, 2)
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dk), dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(n, lq, dim)
    return out, weights


class CrossAttentionPair(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"embedding dim {dim} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        scale = 1.0 / math.sqrt(dim)
        self.w_q = nn.Parameter(torch.empty(dim, dim, dtype=DTYPE).uniform_(-scale, scale))
        self.w_k = nn.Parameter(torch.empty(dim, dim, dtype=DTYPE).uniform_(-scale, scale))
        self.w_v = nn.Parameter(torch.empty(dim, dim, dtype=DTYPE).uniform_(-scale, scale))

    def forward(self, query, kv, return_weights: bool = False):
        out, weights = multihead_attention(query.unsqueeze(1), kv.unsqueeze(1),
                                           self.w_q, self.w_k, self.w_v, self.n_heads)
        out = out.squeeze(1)
        return (out, weights) if return_weights else out


class FusionEncoder(nn.Module):
    """Embeds clinical, paraclinical and omics inputs, averages the six
    pairwise cross-attentions and appends demographics verbatim."""

    def __init__(self, d_clinical: int, d_paraclinical: int, d_omics: int, dim: int = 64,
                 n_heads: int = 4, n_layers: int = 2, dropout: float = 0.1):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"embedding dim {dim} is not divisible by {n_heads} heads")
        self.dim = dim
        self.embed = nn.ModuleDict({
            "C": ModalityEmbed(d_clinical, dim, n_layers, dropout),
            "P": ModalityEmbed(d_paraclinical, dim, n_layers, dropout),
            "O": ModalityEmbed(d_omics, dim, n_layers, dropout),
        })
        self.attn = nn.ModuleDict({r + n: CrossAttentionPair(dim, n_heads) for r, n in PAIRS})

    def pair_outputs(self, emb: dict) -> dict:
        return {r + n: self.attn[r + n](emb[r], emb[n]) for r, n in PAIRS}

    def fuse(self, emb: dict, demographics: torch.Tensor) -> torch.Tensor:
        pairs = self.pair_outputs(emb)
        fused = sum(pairs[r + n] for r, n in PAIRS) / len(PAIRS)
        return torch.cat([fused, demographics], dim=-1)

    def forward(self, clinical, paraclinical, omics, demographics):
        emb = {"C": self.embed["C"](clinical), "P": self.embed["P"](paraclinical),
               "O": self.embed["O"](omics)}
        return self.fuse(emb, demographics)
