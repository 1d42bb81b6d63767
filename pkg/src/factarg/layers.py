"""Transformer building blocks shared by the grounder, tagger and generator.

Everything is written out explicitly (no ``nn.TransformerEncoder``) so the
attention masks behave exactly as the models need and gradients can be
checked against finite differences in float64.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, memory=None, key_mask=None, causal=False, attn_mask=None):
        """
        x: [B, Lq, D]; memory: [B, Lk, D] (defaults to x)
        key_mask: [B, Lk] bool, True where the key may be attended to
        attn_mask: [B, Lq, Lk] bool, per query-key permission
        """
        memory = x if memory is None else memory
        B, Lq, D = x.shape
        Lk = memory.shape[1]
        h, dh = self.heads, D // self.heads
        q = self.q(x).view(B, Lq, h, dh).transpose(1, 2)
        k = self.k(memory).view(B, Lk, h, dh).transpose(1, 2)
        v = self.v(memory).view(B, Lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)  # B, h, Lq, Lk
        allowed = torch.ones(B, 1, Lq, Lk, dtype=torch.bool, device=x.device)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        if attn_mask is not None:
            allowed = allowed & attn_mask[:, None]
        if causal:
            allowed = allowed & torch.ones(Lq, Lk, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~allowed, float("-inf"))
        # rows with no admissible key (padding queries) get zero attention instead of NaN
        empty = ~allowed.any(-1, keepdim=True)
        attn = torch.softmax(scores.masked_fill(empty, 0.0), dim=-1).masked_fill(empty, 0.0)
        ctx = (attn @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim)

    def forward(self, x, key_mask=None, attn_mask=None):
        x = x + self.attn(self.norm1(x), key_mask=key_mask, attn_mask=attn_mask)
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim)

    def forward(self, y, memory, memory_mask=None, self_mask=None):
        y = y + self.self_attn(self.norm1(y), key_mask=self_mask, causal=True)
        y = y + self.cross_attn(self.norm2(y), memory=memory, key_mask=memory_mask)
        return y + self.ff(self.norm3(y))


class TransformerEncoder(nn.Module):
    """Token + learned position (+ optional segment) embeddings followed by encoder layers.

    Positions are supplied by the caller so segments can restart their numbering.
    """

    def __init__(self, vocab_size: int, dim: int, layers: int, heads: int,
                 max_positions: int = 256, segments: int = 0, embedding: nn.Embedding | None = None):
        super().__init__()
        self.embed = embedding if embedding is not None else nn.Embedding(vocab_size, dim)
        self.pos = nn.Embedding(max_positions, dim)
        self.segment = nn.Embedding(segments, dim) if segments else None
        self.layers = nn.ModuleList(EncoderLayer(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids, mask, positions=None, segments=None, attn_mask=None):
        if positions is None:
            positions = torch.arange(ids.shape[1], device=ids.device).expand_as(ids)
        x = self.embed(ids) + self.pos(positions)
        if self.segment is not None and segments is not None:
            x = x + self.segment(segments)
        for layer in self.layers:
            x = layer(x, key_mask=mask, attn_mask=attn_mask)
        return self.norm(x)


class SelectiveAttention(nn.Module):
    """Self-attention stack restricted to participating positions.

    Excluded positions act neither as keys nor as queries: their outputs are
    zeroed after every layer, so nothing they hold can reach a participating
    position.
    """

    def __init__(self, dim: int, layers: int = 2, heads: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, participate):
        keep = participate.unsqueeze(-1).to(x.dtype)
        x = x * keep
        for layer in self.layers:
            x = layer(x, key_mask=participate) * keep
        return self.norm(x) * keep


def masked_mean(x, mask):
    m = mask.unsqueeze(-1).to(x.dtype)
    return (x * m).sum(1) / m.sum(1).clamp_min(1.0)
