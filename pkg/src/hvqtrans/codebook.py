"""Prototype codebooks: nearest-prototype quantization and EMA re-estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, InputError, InternalError


@dataclass
class QuantizationResult:
    quantized: Tensor
    indices: Tensor
    sq_distances: Tensor


class Codebook(nn.Module):
    """K prototype vectors for one (class, layer) pair.

    With ``learnable=False`` (the default) the entries are a buffer re-estimated by
    :func:`ema_update`; otherwise they are an ``nn.Parameter`` trained by gradient.
    """

    def __init__(
        self,
        num_entries: int,
        dim: int,
        decay: float = 0.99,
        laplace_eps: float = 1e-5,
        class_id: int = 0,
        layer_id: int = 0,
        learnable: bool = False,
        dtype: torch.dtype | None = None,
    ):
        super().__init__()
        if num_entries < 1 or dim < 1:
            raise ConfigurationError(f"codebook needs K>=1 and C>=1, got K={num_entries}, C={dim}")
        if not 0.0 < decay <= 1.0:
            raise ConfigurationError(f"decay must lie in (0, 1], got {decay}")
        self.num_entries = num_entries
        self.dim = dim
        self.decay = decay
        self.laplace_eps = laplace_eps
        self.class_id = class_id
        self.layer_id = layer_id
        self.learnable = learnable

        entries = torch.zeros(num_entries, dim, dtype=dtype)
        if learnable:
            self.entries = nn.Parameter(entries)
        else:
            self.register_buffer("entries", entries)
        self.register_buffer("ema_cluster_size", torch.zeros(num_entries, dtype=dtype))
        self.register_buffer("ema_embed_sum", torch.zeros(num_entries, dim, dtype=dtype))
        self.register_buffer("initialized", torch.tensor(False))

    @property
    def K(self) -> int:
        return self.num_entries

    def extra_repr(self) -> str:
        return f"K={self.num_entries}, C={self.dim}, class={self.class_id}, layer={self.layer_id}"

    @torch.no_grad()
    def set_entries(self, entries: Tensor) -> None:
        """Overwrite the prototypes and make the EMA accumulators consistent with them."""
        if entries.shape != (self.num_entries, self.dim):
            raise ConfigurationError(
                f"expected entries of shape {(self.num_entries, self.dim)}, got {tuple(entries.shape)}"
            )
        self.entries.data.copy_(entries)
        self.ema_cluster_size.fill_(1.0)
        self.ema_embed_sum.copy_(self.entries.data)
        self.initialized.fill_(True)

    @torch.no_grad()
    def init_from_tokens(self, tokens: Tensor, generator: torch.Generator | None = None) -> None:
        """Data-dependent init: K token rows, sampled with replacement only if N < K."""
        tokens = tokens.reshape(-1, self.dim)
        n = tokens.shape[0]
        if n == 0:
            raise InputError("cannot initialize a codebook from zero tokens")
        if n >= self.num_entries:
            idx = torch.randperm(n, generator=generator)[: self.num_entries]
        else:
            idx = torch.randint(n, (self.num_entries,), generator=generator)
        self.set_entries(tokens[idx].to(self.entries.dtype))


def _check_tokens(tokens: Tensor, dim: int) -> None:
    if tokens.shape[-1] != dim:
        raise ConfigurationError(f"token width {tokens.shape[-1]} does not match codebook width {dim}")
    if not torch.isfinite(tokens).all():
        raise InputError("tokens contain non-finite values")


def nearest_indices(tokens: Tensor, entries: Tensor) -> Tensor:
    """argmin_j ||tokens[i] - entries[j]||^2 over the last axis; first index wins ties."""
    flat = tokens.reshape(-1, tokens.shape[-1])
    d2 = (
        flat.pow(2).sum(1, keepdim=True)
        - 2.0 * flat @ entries.t()
        + entries.pow(2).sum(1)[None, :]
    )
    # torch.argmin returns the first minimal index
    return d2.argmin(dim=1).reshape(tokens.shape[:-1])


def quantize(tokens: Tensor, book: Codebook) -> QuantizationResult:
    """Replace every token row by its nearest prototype (no gradient path)."""
    _check_tokens(tokens, book.dim)
    entries = book.entries.detach()
    with torch.no_grad():
        indices = nearest_indices(tokens.detach().to(entries.dtype), entries)
        quantized = entries[indices]
        sq = (tokens.detach().to(entries.dtype) - quantized).pow(2).sum(-1)
    return QuantizationResult(quantized=quantized, indices=indices, sq_distances=sq)


@torch.no_grad()
def ema_update(book: Codebook, tokens: Tensor, indices: Tensor) -> Codebook:
    """One exponential-moving-average step with Laplace-smoothed cluster sizes.

    Mutates ``book`` in place and returns it.
    """
    K = book.num_entries
    tokens = tokens.detach().reshape(-1, book.dim).to(book.ema_embed_sum.dtype)
    indices = indices.reshape(-1)
    if indices.numel() != tokens.shape[0]:
        raise InternalError("indices and tokens disagree in length")
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= K):
        raise InternalError(f"codebook index out of range [0, {K})")

    gamma = book.decay
    counts = torch.bincount(indices, minlength=K).to(tokens.dtype)
    sums = torch.zeros_like(book.ema_embed_sum).index_add_(0, indices, tokens)

    book.ema_cluster_size.mul_(gamma).add_((1.0 - gamma) * counts)
    book.ema_embed_sum.mul_(gamma).add_((1.0 - gamma) * sums)

    total = book.ema_cluster_size.sum()
    if total > 0:
        eps = book.laplace_eps
        smoothed = (book.ema_cluster_size + eps) * total / (total + K * eps)
        book.entries.data.copy_(book.ema_embed_sum / smoothed[:, None])
    return book


@torch.no_grad()
def restart_dead_entries(
    book: Codebook, tokens: Tensor, threshold: float = 1e-3, generator: torch.Generator | None = None
) -> int:
    """Re-seed entries whose EMA cluster size fell below ``threshold``. Returns how many."""
    dead = (book.ema_cluster_size < threshold).nonzero().flatten()
    if dead.numel() == 0:
        return 0
    tokens = tokens.detach().reshape(-1, book.dim).to(book.entries.dtype)
    pick = torch.randint(tokens.shape[0], (dead.numel(),), generator=generator)
    book.entries.data[dead] = tokens[pick]
    book.ema_embed_sum[dead] = tokens[pick]
    book.ema_cluster_size[dead] = 1.0
    return int(dead.numel())


def usage_stats(indices, K: int) -> tuple[float, float]:
    """Perplexity of the empirical assignment distribution and the fraction of unused entries."""
    idx = torch.as_tensor(indices).reshape(-1).long()
    if idx.numel() == 0:
        return 0.0, 1.0
    counts = torch.bincount(idx, minlength=K).double()
    p = counts / counts.sum()
    nz = p[p > 0]
    entropy = float(-(nz * nz.log()).sum())
    dead = float((counts == 0).sum()) / K
    return math.exp(entropy), dead
