import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hvqtrans.errors import ConfigurationError, InputError
from hvqtrans.pot import cost_matrix, pot_loss, pot_score, sinkhorn, TransportPlan

from oracles import exact_ot


def T(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_cost_matrix_examples():
    assert cost_matrix(T([[0, 0]]), T([[3, 4]])).tolist() == [[5.0]]
    e = torch.randn(4, 3, dtype=torch.float64)
    assert torch.all(cost_matrix(e, e).diagonal() == 0)
    a, b = torch.randn(5, 3, dtype=torch.float64), torch.randn(7, 3, dtype=torch.float64)
    assert torch.allclose(cost_matrix(a, b), cost_matrix(b, a).T, atol=1e-12)
    with pytest.raises(ConfigurationError):
        cost_matrix(torch.zeros(2, 3), torch.zeros(2, 4))


def test_forced_plan():
    p = sinkhorn(T([[2.5]]))
    assert p.plan.tolist() == [[1.0]]
    assert p.transport_cost().item() == pytest.approx(2.5)


def test_constant_cost_uniform_plan():
    p = sinkhorn(torch.full((3, 5), 1.7, dtype=torch.float64))
    assert torch.allclose(p.plan, torch.full((3, 5), 1 / 15, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(pot_score(p), torch.full((3,), 1.7 / 3, dtype=torch.float64), atol=1e-12)


def test_two_by_two_against_lp():
    C = T([[0, 1], [1, 0]])
    p = sinkhorn(C, epsilon=0.01, max_iter=1000)
    np.testing.assert_allclose(p.plan.numpy(), [[0.5, 0], [0, 0.5]], atol=0.01)
    assert exact_ot(C.numpy()) == pytest.approx(0.0, abs=1e-12)
    assert p.transport_cost().item() < 0.02
    assert pot_score(p).abs().max().item() < 0.02


def test_errors():
    with pytest.raises(ConfigurationError):
        sinkhorn(T([[1.0]]), epsilon=0.0)
    with pytest.raises(InputError):
        sinkhorn(T([[-1.0]]))
    with pytest.raises(InputError):
        sinkhorn(T([[math.inf]]))


def test_non_convergence_is_flag():
    C = torch.rand(20, 30, dtype=torch.float64, generator=torch.Generator().manual_seed(0)) * 10
    p = sinkhorn(C, epsilon=0.001, max_iter=2)
    assert not p.converged and p.iterations_used == 2


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 30), k=st.integers(1, 40), seed=st.integers(0, 10_000),
       eps=st.sampled_from([0.05, 0.1, 0.5]))
def test_marginals(n, k, seed, eps):
    g = torch.Generator().manual_seed(seed)
    C = torch.rand(n, k, generator=g, dtype=torch.float64)
    p = sinkhorn(C, epsilon=eps, max_iter=5000)
    assert p.converged
    assert (p.plan >= 0).all()
    assert torch.allclose(p.plan.sum(1), torch.full((n,), 1 / n, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(p.plan.sum(0), torch.full((k,), 1 / k, dtype=torch.float64), atol=1e-6)
    assert p.plan.sum().item() == pytest.approx(1.0, abs=1e-6)


def test_epsilon_monotonicity():
    g = torch.Generator().manual_seed(1)
    for _ in range(5):
        C = torch.rand(6, 9, generator=g, dtype=torch.float64)
        costs = [sinkhorn(C, e, max_iter=20000, tol=1e-10).transport_cost().item() for e in (1.0, 0.1, 0.01)]
        assert costs[0] >= costs[1] - 1e-8 and costs[1] >= costs[2] - 1e-8


def test_batched_equals_unbatched():
    g = torch.Generator().manual_seed(2)
    C = torch.rand(3, 5, 7, generator=g, dtype=torch.float64)
    batched = sinkhorn(C, max_iter=500).plan
    for b in range(3):
        assert torch.allclose(batched[b], sinkhorn(C[b], max_iter=500).plan, atol=1e-6)


def test_pot_loss_examples():
    plan = TransportPlan(T([[1.0]]), T([[3.0]]), 0.05, 1, True)
    assert pot_loss(plan).item() == pytest.approx(3.0)
    uni = TransportPlan(torch.full((2, 2), 0.25, dtype=torch.float64), torch.full((2, 2), 2.0, dtype=torch.float64), 0.05, 1, True)
    assert pot_loss(uni).item() == pytest.approx(2.0 - math.log(4))
    diag = TransportPlan(T([[0.5, 0], [0, 0.5]]), torch.zeros(2, 2, dtype=torch.float64), 0.05, 1, True)
    assert pot_loss(diag).item() == pytest.approx(-math.log(2))


def test_pot_loss_gradient_only_through_cost():
    tokens = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    entries = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    C = cost_matrix(tokens, entries)
    p = sinkhorn(C)
    assert not p.plan.requires_grad
    pot_loss(p).backward()
    M = p.plan
    # d<M,C>/dC = M; chain through the distance
    diff = tokens.detach()[:, None] - entries.detach()[None]
    dist = diff.norm(dim=-1, keepdim=True)
    g_entries = -(M[..., None] * diff / dist).sum(0)
    assert torch.allclose(entries.grad, g_entries, atol=1e-10)


def test_pot_score_rows_sum_to_transport_cost():
    C = torch.rand(8, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    p = sinkhorn(C)
    assert pot_score(p).sum().item() == pytest.approx(p.transport_cost().item(), rel=1e-12)


def test_zero_cost_row_scores_zero():
    tokens = T([[0, 0], [5, 5]])
    entries = T([[0, 0], [5, 5]])
    p = sinkhorn(cost_matrix(tokens, entries), epsilon=0.01, max_iter=1000)
    assert pot_score(p).abs().max().item() < 1e-6
