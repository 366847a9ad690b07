"""Hierarchical quantization of encoder tokens.

The top encoder output is quantized into a global token grid ``theta``. Every
level ``l`` then fuses lower-level tokens with a higher-level signal through a
learned affine map and quantizes the result against that level's codebook.
Which signals are fused is set by the mode:

``plain``     h^l                 -> z^l
``adjacent``  [h^{l-1}, h^l]      -> z^l
``global``    [h^{l-1}, theta]    -> z^l

``theta`` uses the level-L codebook, the same one ``z^L`` is quantized with.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor, nn

from .codebook import Codebook, _check_tokens, nearest_indices, quantize
from .errors import ConfigurationError

MODES = ("plain", "adjacent", "global")


def straight_through(x: Tensor, q: Tensor) -> Tensor:
    """Forward value ``q``; backward gradient copied unchanged onto ``x``."""
    return x + (q - x).detach()


def quantize_grouped(tokens: Tensor, books: Sequence[Codebook], groups: Tensor) -> tuple[Tensor, Tensor]:
    """Quantize each image of a ``(B, N, C)`` batch against the codebook its group selects.

    Returns the selected prototypes (differentiable w.r.t. learnable entries)
    and the ``(B, N)`` indices.
    """
    B, N, _ = tokens.shape
    _check_tokens(tokens, books[0].dim)
    indices = torch.zeros(B, N, dtype=torch.long, device=tokens.device)
    selected = torch.zeros_like(tokens)
    for g in torch.unique(groups).tolist():
        sel = groups == g
        book = books[g]
        with torch.no_grad():
            idx = nearest_indices(tokens[sel].detach().to(book.entries.dtype), book.entries.detach())
        indices[sel] = idx
        selected = selected.index_put((sel.nonzero().flatten(),), book.entries[idx].to(tokens.dtype))
    return selected, indices


def global_quantize(h_L: Tensor, book_L: Codebook) -> Tensor:
    """Token-wise nearest level-L prototype of the top encoder output (straight-through)."""
    res = quantize(h_L, book_L)
    return straight_through(h_L, res.quantized.to(h_L.dtype))


def fusion_input(mode: str, h_prev: Tensor | None, h_cur: Tensor | None, theta: Tensor | None) -> Tensor:
    if mode == "plain":
        if h_cur is None:
            raise ConfigurationError("plain mode needs the current-level tokens")
        return h_cur
    if mode == "adjacent":
        if h_prev is None or h_cur is None:
            raise ConfigurationError("adjacent mode needs both h^{l-1} and h^l")
        return torch.cat([h_prev, h_cur], dim=-1)
    if mode == "global":
        if h_prev is None or theta is None:
            raise ConfigurationError("global mode needs h^{l-1} and theta")
        return torch.cat([h_prev, theta], dim=-1)
    raise ConfigurationError(f"unknown hierarchy mode {mode!r}; expected one of {MODES}")


@dataclass
class HierarchyOutput:
    theta: Tensor | None
    theta_indices: Tensor | None
    theta_prototypes: Tensor | None
    fused: list[Tensor] = field(default_factory=list)  # u^l, pre-quantization
    quantized: list[Tensor] = field(default_factory=list)  # z^l (straight-through)
    prototypes: list[Tensor] = field(default_factory=list)  # selected e^l
    indices: list[Tensor] = field(default_factory=list)


class HierarchicalQuantizer(nn.Module):
    """Fusion maps for ``num_layers`` levels plus the level-wise quantization pass."""

    def __init__(self, dim: int, num_layers: int, mode: str = "global"):
        super().__init__()
        if mode not in MODES:
            raise ConfigurationError(f"unknown hierarchy mode {mode!r}; expected one of {MODES}")
        if num_layers < 1:
            raise ConfigurationError("need at least one level")
        self.dim = dim
        self.num_layers = num_layers
        self.mode = mode
        width = dim if mode == "plain" else 2 * dim
        self.fusion = nn.ModuleList(nn.Linear(width, dim) for _ in range(num_layers))

    @property
    def L(self) -> int:
        return self.num_layers

    def fuse(self, layer: int, h_prev: Tensor | None, h_cur: Tensor | None, theta: Tensor | None) -> Tensor:
        x = fusion_input(self.mode, h_prev, h_cur, theta)
        fmap = self.fusion[layer - 1]
        if x.shape[-1] != fmap.in_features:
            raise ConfigurationError(
                f"level {layer} fusion expects width {fmap.in_features}, got {x.shape[-1]}"
            )
        return fmap(x)

    def forward(
        self,
        hs: Sequence[Tensor],
        books: Sequence[Sequence[Codebook]] | None,
        groups: Tensor,
        use_vq: bool = True,
        init_hook=None,
    ) -> HierarchyOutput:
        """``hs`` holds h^0..h^L; ``books[l-1][g]`` is group g's level-l codebook.

        ``init_hook(layer, tokens)`` runs before a level's codebooks are first used
        (data-dependent initialization during training).
        """
        L = self.num_layers
        if len(hs) != L + 1:
            raise ConfigurationError(f"expected {L + 1} token grids h^0..h^L, got {len(hs)}")
        out = HierarchyOutput(theta=None, theta_indices=None, theta_prototypes=None)

        theta = None
        if self.mode == "global":
            if use_vq:
                if init_hook is not None:
                    init_hook(L, hs[L])
                e, idx = quantize_grouped(hs[L], books[L - 1], groups)
                theta = straight_through(hs[L], e.detach())
                out.theta_indices = idx
                out.theta_prototypes = e
            else:
                theta = hs[L]
            out.theta = theta

        for layer in range(1, L + 1):
            u = self.fuse(layer, hs[layer - 1], hs[layer], theta)
            out.fused.append(u)
            if use_vq:
                if init_hook is not None:
                    init_hook(layer, u)
                e, idx = quantize_grouped(u, books[layer - 1], groups)
                out.quantized.append(straight_through(u, e.detach()))
                out.prototypes.append(e)
                out.indices.append(idx)
            else:
                out.quantized.append(u)
        return out


def fuse_quantize(
    h_prev: Tensor | None,
    theta: Tensor | None,
    layer: int,
    cfg: HierarchicalQuantizer,
    book_l: Codebook,
    h_cur: Tensor | None = None,
) -> Tensor:
    """Quantize level ``layer``'s fused tokens against ``book_l`` (straight-through)."""
    u = cfg.fuse(layer, h_prev, h_cur, theta)
    res = quantize(u, book_l)
    return straight_through(u, res.quantized.to(u.dtype))
