"""Prototype-oriented optimal transport between image tokens and codebook entries.

The solver works in the log domain on the dual potentials so that small
regularization weights do not underflow. All functions accept leading batch
dimensions: a cost of shape ``(..., N, K)`` yields one plan per batch element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ConfigurationError, InputError


@dataclass
class TransportPlan:
    plan: Tensor
    # keeps its autograd graph so the loss can differentiate through it
    cost: Tensor
    epsilon: float
    iterations_used: int
    converged: bool

    def transport_cost(self) -> Tensor:
        return (self.plan * self.cost).sum(dim=(-2, -1))


def cost_matrix(tokens: Tensor, entries: Tensor) -> Tensor:
    """Pairwise Euclidean distances, shape ``(..., N, K)``."""
    if tokens.shape[-1] != entries.shape[-1]:
        raise ConfigurationError(
            f"token width {tokens.shape[-1]} does not match prototype width {entries.shape[-1]}"
        )
    if entries.dim() < tokens.dim():
        entries = entries.expand(*tokens.shape[:-2], *entries.shape[-2:])
    # exact pairwise differences, no |a|^2 - 2ab + |b|^2 cancellation
    return torch.cdist(tokens, entries.to(tokens.dtype), compute_mode="donot_use_mm_for_euclid_dist")


@torch.no_grad()
def _solve(cost: Tensor, epsilon: float, max_iter: int, tol: float, check_every: int) -> tuple[Tensor, int, bool]:
    n, k = cost.shape[-2], cost.shape[-1]
    log_a = -math.log(n)
    log_b = -math.log(k)
    a, b = 1.0 / n, 1.0 / k
    scaled = -cost / epsilon
    f = torch.zeros(cost.shape[:-1], dtype=cost.dtype, device=cost.device)
    g = torch.zeros(cost.shape[:-2] + (k,), dtype=cost.dtype, device=cost.device)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = log_a - torch.logsumexp(scaled + g[..., None, :], dim=-1)
        g = log_b - torch.logsumexp(scaled + f[..., :, None], dim=-2)
        if it % check_every and it != max_iter:
            continue
        # columns are exact after the g-step; only the rows can be off
        row = torch.logsumexp(scaled + f[..., :, None] + g[..., None, :], dim=-1).exp()
        if float((row - a).abs().max()) < tol:
            converged = True
            break

    plan = torch.exp(scaled + f[..., :, None] + g[..., None, :])
    if not converged:
        col_err = float((plan.sum(-2) - b).abs().max())
        row_err = float((plan.sum(-1) - a).abs().max())
        converged = max(col_err, row_err) < tol
    return plan, it, converged


def sinkhorn(
    cost: Tensor, epsilon: float = 0.05, max_iter: int = 100, tol: float = 1e-6, check_every: int = 1
) -> TransportPlan:
    """Entropic OT with uniform marginals: rows sum to 1/N, columns to 1/K.

    Minimizes ``<M, C> + epsilon * sum M ln M``. The marginal violation is
    measured every ``check_every`` iterations. Running out of iterations is not
    an error; the returned plan carries ``converged=False``.
    """
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    if max_iter < 1:
        raise ConfigurationError(f"max_iter must be >= 1, got {max_iter}")
    if cost.dim() < 2:
        raise ConfigurationError("cost must have at least two dimensions")
    c = cost.detach()
    if not torch.isfinite(c).all():
        raise InputError("cost matrix contains non-finite values")
    if (c < 0).any():
        raise InputError("cost matrix must be nonnegative")
    plan, iters, converged = _solve(c, epsilon, max_iter, tol, max(1, check_every))
    return TransportPlan(plan=plan, cost=cost, epsilon=epsilon, iterations_used=iters, converged=converged)


def pot_loss(plan: TransportPlan) -> Tensor:
    """Transport cost plus the unweighted plan entropy term, per batch element.

    The plan is a constant of the backward pass; gradients reach only the cost.
    """
    m = plan.plan.detach()
    entropy = torch.special.xlogy(m, m).sum(dim=(-2, -1))
    return (m * plan.cost).sum(dim=(-2, -1)) + entropy


def pot_score(plan: TransportPlan) -> Tensor:
    """Row-wise transport cost: one dissimilarity value per token."""
    return (plan.plan.detach() * plan.cost).sum(dim=-1)
