"""Full model: encoder, hierarchical quantization, decoder and switched experts."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .codebook import Codebook
from .config import ModelConfig
from .errors import ConfigurationError
from .hierarchy import HierarchicalQuantizer, HierarchyOutput
from .switching import Switch, select
from .transformer import Decoder, Encoder


@dataclass
class ModelOutput:
    h0: Tensor  # normalized backbone tokens, the reconstruction target
    hs: list[Tensor]  # h^0..h^L
    hier: HierarchyOutput
    d0: Tensor
    h0_tilde: Tensor
    logits: Tensor
    route: Tensor  # per-image switch decision
    codebook_group: Tensor
    expert_group: Tensor


class HVQTrans(nn.Module):
    def __init__(self, cfg: ModelConfig, num_classes: int, num_tokens: int):
        super().__init__()
        if num_classes < 1:
            raise ConfigurationError("need at least one class")
        self.cfg = cfg
        self.num_classes = num_classes
        self.num_tokens = num_tokens
        C, L = cfg.dim, cfg.layers
        self.encoder = Encoder(num_tokens, C, L, cfg.heads, cfg.dropout)
        self.hierarchy = HierarchicalQuantizer(C, L, cfg.hierarchy)
        groups = num_classes if cfg.switch_codebook else 1
        self.codebooks = nn.ModuleList(
            nn.ModuleList(
                Codebook(cfg.K, C, cfg.decay, cfg.laplace_eps, class_id=g, layer_id=l, learnable=not cfg.ema)
                for g in range(groups)
            )
            for l in range(1, L + 1)
        )
        self.decoder = Decoder(num_tokens, C, L, cfg.heads, cfg.dropout)
        self.switch = Switch(C, num_classes, num_classes if cfg.switch_expert else 1)
        self.register_buffer("feat_mean", torch.zeros(C))
        self.register_buffer("feat_std", torch.ones(C))

    @property
    def L(self) -> int:
        return self.cfg.layers

    def books(self, layer: int) -> list[Codebook]:
        return list(self.codebooks[layer - 1])

    @torch.no_grad()
    def set_feature_stats(self, tokens: Tensor) -> None:
        flat = tokens.reshape(-1, tokens.shape[-1]).double()
        self.feat_mean.copy_(flat.mean(0).to(self.feat_mean.dtype))
        self.feat_std.copy_(flat.std(0).clamp_min(1e-6).to(self.feat_std.dtype))

    def normalize(self, raw: Tensor) -> Tensor:
        return (raw - self.feat_mean) / self.feat_std

    def forward(self, raw_tokens: Tensor, route: Tensor | None = None, init_codebooks: bool = False) -> ModelOutput:
        """``raw_tokens`` are backbone tokens ``(B, N, C)``.

        ``route`` overrides the classifier's argmax (teacher forcing, codebook init).
        """
        h0 = self.normalize(raw_tokens)
        logits = self.switch.logits(h0)
        if route is None:
            route = select(logits)
        zeros = torch.zeros_like(route)
        cb_group = route if self.cfg.switch_codebook else zeros
        ex_group = route if self.cfg.switch_expert else zeros

        hs = [h0] + self.encoder(h0)
        hook = self._init_hook(cb_group) if init_codebooks else None
        books = [self.books(l) for l in range(1, self.L + 1)]
        hier = self.hierarchy(hs, books, cb_group, use_vq=self.cfg.vq, init_hook=hook)
        d0 = self.decoder(hier.quantized)
        h0_tilde = self.switch.reconstruct_batch(d0, ex_group)
        return ModelOutput(h0, hs, hier, d0, h0_tilde, logits, route, cb_group, ex_group)

    def _init_hook(self, groups: Tensor):
        def hook(layer: int, tokens: Tensor) -> None:
            for g, book in enumerate(self.books(layer)):
                sel = groups == g
                if not bool(book.initialized) and bool(sel.any()):
                    book.init_from_tokens(tokens[sel].detach())

        return hook

    def selected_entries(self, layer: int, groups: Tensor) -> Tensor:
        """``(B, K, C)`` stack of the codebook each image is routed to."""
        stacked = torch.stack([b.entries for b in self.books(layer)])
        return stacked[groups]

    def codebooks_initialized(self) -> bool:
        return all(bool(b.initialized) for level in self.codebooks for b in level)
