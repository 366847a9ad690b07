"""Transformer encoder producing multi-level tokens and the VQ-conditioned decoder.

Tokens are ``(B, N, C)`` tensors. The encoder follows the post-norm vanilla
layout. The decoder keeps the three residual steps of a VQ decoder layer
(self-attention, cross-attention over quantized tokens, feed-forward) exactly,
and normalizes only the input of each sublayer.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)
        self.record = False
        self.last_weights: Tensor | None = None

    def forward(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        B, Nq, C = query.shape
        Nk = key.shape[1]
        h, dh = self.heads, C // self.heads
        q = self.q_proj(query).view(B, Nq, h, dh).transpose(1, 2)
        k = self.k_proj(key).view(B, Nk, h, dh).transpose(1, 2)
        v = self.v_proj(value).view(B, Nk, h, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        if self.record:
            self.last_weights = attn.detach()
        out = self.dropout(attn) @ v
        return self.out_proj(out.transpose(1, 2).reshape(B, Nq, C))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int = 4, ffn_mult: int = 4, dropout: float = 0.1):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.ffn = FeedForward(dim, ffn_mult * dim, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ffn(x))


class Encoder(nn.Module):
    """Cascade of ``num_layers`` encoder layers; returns every intermediate output."""

    def __init__(self, num_tokens: int, dim: int, num_layers: int, heads: int = 4, dropout: float = 0.1):
        super().__init__()
        self.num_tokens = num_tokens
        self.dim = dim
        self.pos_embed = nn.Parameter(torch.zeros(num_tokens, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, 4, dropout) for _ in range(num_layers))

    def forward(self, h0: Tensor) -> list[Tensor]:
        if h0.shape[-2:] != (self.num_tokens, self.dim):
            raise ConfigurationError(
                f"encoder expects (*, {self.num_tokens}, {self.dim}) tokens, got {tuple(h0.shape)}"
            )
        h = h0 + self.pos_embed
        outs = []
        for layer in self.layers:
            h = layer(h)
            outs.append(h)
        return outs

    encode = forward


class DecoderLayer(nn.Module):
    """``q = MSA(d) + d``, ``d~ = MCA(q, z) + q``, ``d = FFN(d~) + d~``."""

    def __init__(self, dim: int, heads: int = 4, ffn_mult: int = 4, dropout: float = 0.1):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads, dropout)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout)
        self.ffn = FeedForward(dim, ffn_mult * dim, dropout)
        self.norm_sa = nn.LayerNorm(dim)
        self.norm_ca = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def forward(self, d_next: Tensor, z: Tensor, key_pos: Tensor | None = None) -> Tensor:
        if d_next.shape != z.shape:
            raise ConfigurationError(f"decoder inputs disagree: {tuple(d_next.shape)} vs {tuple(z.shape)}")
        x = self.norm_sa(d_next)
        q = self.self_attn(x, x, x) + d_next
        # values are the quantized tokens themselves; position enters through the keys only
        keys = z if key_pos is None else z + key_pos
        d_tilde = self.cross_attn(self.norm_ca(q), keys, z) + q
        return self.ffn(self.norm_ffn(d_tilde)) + d_tilde


class Decoder(nn.Module):
    """Folds decoder layers from learned queries down through levels L..1."""

    def __init__(self, num_tokens: int, dim: int, num_layers: int, heads: int = 4, dropout: float = 0.1):
        super().__init__()
        self.num_tokens = num_tokens
        self.dim = dim
        self.query_embed = nn.Parameter(torch.zeros(num_tokens, dim))
        self.key_pos_embed = nn.Parameter(torch.zeros(num_tokens, dim))
        nn.init.trunc_normal_(self.query_embed, std=0.02)
        nn.init.trunc_normal_(self.key_pos_embed, std=0.02)
        # layers[l - 1] consumes z^l
        self.layers = nn.ModuleList(DecoderLayer(dim, heads, 4, dropout) for _ in range(num_layers))

    def decode_layer(self, d_next: Tensor, z_l: Tensor, layer: int) -> Tensor:
        if not 1 <= layer <= len(self.layers):
            raise ConfigurationError(f"decoder layer {layer} outside 1..{len(self.layers)}")
        return self.layers[layer - 1](d_next, z_l, self.key_pos_embed)

    def forward(self, z_list: list[Tensor]) -> Tensor:
        if len(z_list) != len(self.layers):
            raise ConfigurationError(f"expected {len(self.layers)} quantized levels, got {len(z_list)}")
        batch = z_list[0].shape[:-2]
        d = self.query_embed.expand(*batch, -1, -1)
        for layer in range(len(self.layers), 0, -1):
            d = self.decode_layer(d, z_list[layer - 1], layer)
        return d

    decode = forward
