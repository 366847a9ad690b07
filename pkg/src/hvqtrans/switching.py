"""Per-image switch: a classifier picks one class codebook and one reconstruction expert."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InternalError


class Expert(nn.Module):
    """Token-wise residual MLP ``x + W2 gelu(W1 x)``."""

    def __init__(self, dim: int, hidden_mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_mult * dim)
        self.fc2 = nn.Linear(hidden_mult * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.fc2(F.gelu(self.fc1(x)))

    @torch.no_grad()
    def make_identity(self) -> None:
        self.fc2.weight.zero_()
        self.fc2.bias.zero_()


def select(p: Tensor) -> Tensor:
    """Argmax over the last axis; the lowest index wins ties."""
    return p.argmax(dim=-1)


class Switch(nn.Module):
    def __init__(self, dim: int, num_classes: int, num_experts: int | None = None):
        super().__init__()
        self.num_classes = num_classes
        self.classifier = nn.Linear(dim, num_classes)
        self.experts = nn.ModuleList(Expert(dim) for _ in range(num_experts or num_classes))

    @property
    def M(self) -> int:
        return self.num_classes

    def logits(self, h0: Tensor) -> Tensor:
        return self.classifier(h0.mean(dim=-2))

    def classify(self, h0: Tensor) -> Tensor:
        return torch.softmax(self.logits(h0), dim=-1)

    select = staticmethod(select)

    def reconstruct(self, d0: Tensor, m: int) -> Tensor:
        if not 0 <= m < len(self.experts):
            raise InternalError(f"expert index {m} outside [0, {len(self.experts)})")
        return self.experts[m](d0)

    def reconstruct_batch(self, d0: Tensor, m: Tensor) -> Tensor:
        """Route each image of ``(B, N, C)`` through its own expert only."""
        out = torch.zeros_like(d0)
        for g in torch.unique(m).tolist():
            sel = (m == g).nonzero().flatten()
            out = out.index_put((sel,), self.reconstruct(d0[sel], g))
        return out
