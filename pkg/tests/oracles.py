"""Independent reference implementations used by the tests."""

from __future__ import annotations

import itertools

import numpy as np
import torch
from scipy.optimize import linprog


def exact_ot(C: np.ndarray) -> float:
    """Exact OT cost with uniform marginals (rows 1/N, cols 1/K) by linear programming."""
    n, k = C.shape
    A_eq, b_eq = [], []
    for i in range(n):
        row = np.zeros((n, k))
        row[i] = 1
        A_eq.append(row.ravel())
        b_eq.append(1 / n)
    for j in range(k):
        col = np.zeros((n, k))
        col[:, j] = 1
        A_eq.append(col.ravel())
        b_eq.append(1 / k)
    res = linprog(C.ravel(), A_eq=np.array(A_eq), b_eq=np.array(b_eq), bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun)


def exact_ot_square(C: np.ndarray) -> float:
    """Vertex enumeration for N == K: the optimum sits on a permutation matrix."""
    n = C.shape[0]
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


def pairwise_auroc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def central_difference(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Gradient of scalar ``f`` at ``x`` (float64) by central differences."""
    g = torch.zeros_like(x)
    with torch.no_grad():
        _fill(f, x, g, h)
    return g


def _fill(f, x, g, h):
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f(flat.reshape(x.shape)))
        flat[i] = old - h
        fm = float(f(flat.reshape(x.shape)))
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))
