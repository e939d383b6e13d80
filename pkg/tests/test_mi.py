import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from unifactor.errors import ContractError, NumericError
from unifactor.experiments import calibrate, gaussian_mi, gaussian_pairs, true_ratio_scores
from unifactor.factorization import FactorSet
from unifactor.mi import (
    Critic,
    FactorBatch,
    critic_score,
    directed_infonce,
    infonce,
    infonce_from_scores,
    layer_mean,
    nce_club,
    nce_club_from_scores,
    ortho_penalty,
)

cos1 = Critic("cosine", tau=1.0)


def test_cosine_scores():
    Z = torch.randn(5, 7, dtype=torch.float64)
    s = critic_score(Z, Z, cos1)
    assert torch.allclose(s.diagonal(), torch.ones(5, dtype=torch.float64))
    E = torch.eye(4, dtype=torch.float64)
    s = critic_score(E, E.roll(1, 0), cos1)
    assert torch.count_nonzero(s.diagonal()) == 0


def test_bilinear_identity_is_dot_product():
    c = Critic("bilinear", d_z=3, tau=1.0, init="identity").double()
    A = np.random.default_rng(0).normal(size=(4, 3))
    B = np.random.default_rng(1).normal(size=(4, 3))
    s = critic_score(torch.tensor(A), torch.tensor(B), c).detach().numpy()
    for i, j in itertools.product(range(4), range(4)):
        assert s[i, j] == pytest.approx(sum(A[i, k] * B[j, k] for k in range(3)), abs=1e-12)


def test_zero_norm_raises():
    Z = torch.randn(3, 4)
    Z[1] = 0
    with pytest.raises(NumericError):
        critic_score(Z, torch.randn(3, 4), cos1)


def test_shape_mismatch_and_small_batch():
    with pytest.raises(ContractError):
        critic_score(torch.randn(3, 4), torch.randn(2, 4), cos1)
    with pytest.raises(ContractError):
        infonce(torch.randn(1, 4), torch.randn(1, 4), cos1)
    with pytest.raises(ContractError):
        nce_club(torch.randn(1, 4), torch.randn(1, 4), cos1)


def test_factor_batch_contract():
    FactorBatch(torch.zeros(2, 3), [0, 1])
    with pytest.raises(ContractError):
        FactorBatch(torch.zeros(2, 3), [4, 4])
    with pytest.raises(ContractError):
        FactorBatch(torch.zeros(2, 3), [0])


def test_infonce_oracles():
    loss, low = infonce_from_scores(torch.full((6, 6), 0.3, dtype=torch.float64))
    assert float(loss) == pytest.approx(math.log(6), abs=1e-14) and abs(float(low)) < 1e-14
    s = torch.tensor([[1.0, -1.0], [-1.0, 1.0]], dtype=torch.float64)
    loss, _ = infonce_from_scores(s)
    assert float(loss) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert float(loss) == pytest.approx(0.12693, abs=1e-5)


def test_infonce_is_stable_for_large_scores():
    s = torch.tensor([[1000.0, 0.0], [0.0, 1000.0]], dtype=torch.float64)
    loss, _ = infonce_from_scores(s)
    assert torch.isfinite(loss) and float(loss) < 1e-300 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31))
def test_infonce_bounds_and_permutation(B, d, seed):
    g = torch.Generator().manual_seed(seed)
    A = torch.randn(B, d, generator=g, dtype=torch.float64)
    C = torch.randn(B, d, generator=g, dtype=torch.float64)
    crit = Critic("cosine", tau=0.1)
    loss, low = infonce(A, C, crit)
    assert float(loss) >= 0 and float(low) <= math.log(B) + 1e-12
    perm = torch.randperm(B, generator=g)
    loss_p, _ = infonce(A[perm], C[perm], crit)
    assert float(loss_p) == pytest.approx(float(loss), abs=1e-12)


def test_directed_infonce_value_and_stop_gradient():
    A = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    Bt = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    crit = Critic("cosine", tau=0.1)
    d = directed_infonce(A, Bt.detach(), crit)
    assert torch.equal(d, infonce(A, Bt, crit)[0])
    # even without an explicit detach by the caller, the target receives nothing
    directed_infonce(A, Bt, crit).backward()
    assert Bt.grad is None
    assert A.grad is not None and A.grad.abs().sum() > 0
    Z = torch.randn(5, 4, dtype=torch.float64)
    total = directed_infonce(Z, Z, crit) + directed_infonce(Z, Z, crit)
    assert float(total) == pytest.approx(2 * float(infonce(Z, Z, crit)[0]), abs=1e-12)


def test_club_oracles():
    assert float(nce_club_from_scores(torch.full((4, 4), 2.5))) == 0.0
    s = torch.tensor([[3.0, 1.0, 0.0], [2.0, 1.0, 4.0], [0.0, 0.0, 2.0]], dtype=torch.float64)
    # mean diag = 2, mean off-diagonal = 7/6
    assert float(nce_club_from_scores(s)) == pytest.approx(2 - 7 / 6, abs=1e-14)


def test_club_near_orthogonal_rows_sampled():
    g = torch.Generator().manual_seed(0)
    vals = []
    for _ in range(20):
        Z = torch.randn(16, 4096, generator=g, dtype=torch.float64)
        vals.append(float(nce_club(Z, Z, cos1)))
    assert abs(np.mean(vals) - 1.0) < 0.01


def test_club_detaches_critic_by_default():
    c = Critic("bilinear", d_z=3, tau=1.0, init="identity").double()
    A = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    nce_club(A, torch.randn(4, 3, dtype=torch.float64), c).backward()
    assert c.M.grad is None and A.grad is not None
    nce_club(A, torch.randn(4, 3, dtype=torch.float64), c, detach_critic=False).backward()
    assert c.M.grad is not None


def _fset(B, L, d, gen, scale=None):
    mk = lambda: torch.randn(B, L, d, generator=gen, dtype=torch.float64)
    return FactorSet(tuple(range(1, L + 1)), {"U": mk(), "G": mk()}, {"U": mk(), "G": mk()})


def test_ortho_penalty_oracles():
    B, L = 3, 2
    e1 = torch.zeros(B, L, 4, dtype=torch.float64)
    e1[..., 0] = 1
    e2 = torch.zeros_like(e1)
    e2[..., 1] = 1
    fs = FactorSet((1, 2), {"U": e1, "G": e1}, {"U": e2, "G": e2})
    assert float(ortho_penalty(fs)) == 0.0
    uni_u = e2.clone()
    uni_u[:, 0] = e1[:, 0]
    fs = FactorSet((1, 2), {"U": e1, "G": e1}, {"U": uni_u, "G": e2})
    # one of two layers fully aligned in flow U, averaged over layers
    assert float(ortho_penalty(fs)) == pytest.approx(0.5, abs=1e-14)


def test_ortho_penalty_brute_force_and_scale_invariance():
    g = torch.Generator().manual_seed(3)
    fs = _fset(5, 3, 6, g)
    total = 0.0
    for f in ("U", "G"):
        acc = 0.0
        for b in range(5):
            for l in range(3):
                a, c = fs.sh[f][b, l].numpy(), fs.uni[f][b, l].numpy()
                acc += (a @ c / np.linalg.norm(a) / np.linalg.norm(c)) ** 2
        total += acc / 15
    assert float(ortho_penalty(fs)) == pytest.approx(total, abs=1e-12)
    scaled = FactorSet(fs.layers, {k: v * 3.7 for k, v in fs.sh.items()}, fs.uni)
    assert float(ortho_penalty(scaled)) == pytest.approx(total, abs=1e-12)


def test_layer_mean_averages_layers():
    g = torch.Generator().manual_seed(4)
    A = torch.randn(4, 3, 5, generator=g, dtype=torch.float64)
    C = torch.randn(4, 3, 5, generator=g, dtype=torch.float64)
    crit = Critic("cosine", tau=0.5)
    expect = np.mean([float(infonce(A[:, i], C[:, i], crit)[0]) for i in range(3)])
    assert float(layer_mean(infonce, A, C, crit)) == pytest.approx(expect, abs=1e-12)


def test_gaussian_oracle_helpers():
    assert gaussian_mi(0.0, 8) == 0.0
    assert gaussian_mi(0.5, 1) == pytest.approx(-0.5 * math.log(0.75))
    g = torch.Generator().manual_seed(0)
    x, y = gaussian_pairs(0.6, 3, 200_000, g)
    assert float((x * y).mean()) == pytest.approx(0.6, abs=0.01)
    assert float(y.var()) == pytest.approx(1.0, abs=0.01)
    # the true-ratio critic attains the MI in the large-batch limit
    x, y = gaussian_pairs(0.5, 2, 2048, g)
    low = float(infonce_from_scores(true_ratio_scores(x, y, 0.5))[1])
    assert low == pytest.approx(gaussian_mi(0.5, 2), abs=0.05)


def test_calibration_independent_and_moderate():
    c0 = calibrate(0.0, steps=500, seed=0, eval_batches=20)
    assert abs(c0.club) <= 0.1 and abs(c0.infonce_lower) <= 0.05
    c5 = calibrate(0.5, steps=1500, seed=0, eval_batches=20)
    assert c5.infonce_lower <= c5.true_mi + 0.05
    assert c5.club >= c5.true_mi - 0.1
