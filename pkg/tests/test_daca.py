import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from upda.backbone import STAT_DIM, build_backbone, init_params
from upda.daca import (
    EPS,
    KernelConfig,
    RankingHead,
    loss_d_mmd,
    loss_d_rank,
    loss_daca,
    pair_features,
    pair_weight,
    rank_feature,
    rank_probability,
    source_pairs,
    target_pairs,
    weighted_rank_bce,
)
from upda.dataset import ContractViolation

from gradcheck import central_difference_check

T = lambda *a: torch.tensor(a, dtype=torch.float64)  # noqa: E731


def brute_mmd(src, w, tgt, multipliers, base):
    """Weighted-source vs uniform-target MMD^2 by explicit double sums."""
    def k(a, b):
        d = sum((x - y) ** 2 for x, y in zip(a, b))
        return sum(math.exp(-d / (m * base)) for m in multipliers)

    sw, m = sum(w), len(tgt)
    ss = sum(w[a] * w[b] * k(src[a], src[b]) for a in range(len(src)) for b in range(len(src))) / sw**2
    st_ = sum(w[a] * k(src[a], tgt[b]) for a in range(len(src)) for b in range(m)) / (sw * m)
    tt = sum(k(tgt[a], tgt[b]) for a in range(m) for b in range(m)) / m**2
    return ss - 2 * st_ + tt


def test_rank_feature_basics():
    a, b = T(1.0, 2.0), T(0.5, 0.0)
    assert torch.equal(rank_feature(a, b), T(0.5, 2.0))
    assert torch.equal(rank_feature(a, a), T(0.0, 0.0))
    assert torch.equal(rank_feature(a, b), -rank_feature(b, a))
    with pytest.raises(ContractViolation):
        rank_feature(a, T(1.0, 2.0, 3.0))


def test_pair_weight_values():
    assert pair_weight(5, 5) == 0.5
    assert abs(pair_weight(7, 3) - 1 / (1 + math.exp(-4))) < 1e-12
    assert pair_weight(7, 3) == pytest.approx(0.98201, abs=1e-5)


@given(st.floats(0, 10), st.floats(0, 10))
def test_pair_weight_symmetric_and_bounded(a, b):
    w = pair_weight(a, b)
    assert w == pair_weight(b, a)
    assert 0.5 <= w < 1.0
    assert (w == 0.5) == (a == b) or abs(a - b) < 1e-15


def test_rank_probability_cases():
    head = init_params(RankingHead(4), 0, "zeros")
    assert rank_probability(torch.randn(3, 4, dtype=torch.float64), head)[0].item() == 0.5
    head = RankingHead(2)
    with torch.no_grad():
        head.net[0].weight.copy_(torch.eye(2, dtype=torch.float64))
        head.net[0].bias.zero_()
    assert rank_probability(T(3.0, 3.0), head).item() == 0.5
    p = float(rank_probability(T(2.0, 0.0), head))
    assert p == pytest.approx(math.exp(2) / (math.exp(2) + 1), abs=1e-12)
    assert p == pytest.approx(0.8808, abs=1e-4)


def test_bce_perfect_classifier():
    loss = weighted_rank_bce(T(1.0, 0.0, 1.0), [1, 0, 1], [0.6, 0.9, 0.7])
    assert float(loss) == pytest.approx(-math.log(1 - EPS), rel=1e-6)


def test_bce_single_pair_half():
    for w in (0.5, 0.73, 0.99):
        assert float(weighted_rank_bce(T(0.5), [1], [w])) == pytest.approx(math.log(2), abs=1e-15)


def test_bce_two_pairs_weights_cancel():
    assert float(weighted_rank_bce(T(0.5, 0.5), [1, 1], [0.5, 1.0])) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_d_rank_requires_pairs():
    with pytest.raises(ContractViolation):
        loss_d_rank(torch.zeros(1, 4, dtype=torch.float64), source_pairs([3.0]), RankingHead(4))


def test_source_pairs_labels_and_weights():
    y = [1.0, 4.0, 2.5]
    p = source_pairs(y)
    assert len(p) == 6
    for i, j, lab, w in zip(p.i, p.j, p.label, p.weight):
        assert lab == float(y[i] > y[j])
        assert w == pair_weight(y[i], y[j])


def test_rank_loss_invariant_under_swap():
    rng = np.random.default_rng(1)
    f = torch.from_numpy(rng.normal(size=(5, 8)))
    y = rng.uniform(0, 10, 5)
    head = init_params(RankingHead(8), 2)
    pairs = source_pairs(y)
    a = loss_d_rank(f, pairs, head)
    b = loss_d_rank(f, pairs.swapped(), head)
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_mmd_matches_brute_force():
    rng = np.random.default_rng(0)
    src, tgt = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)) + 0.4
    w = [0.6, 0.9, 0.75]
    mults = (0.5, 1.0, 2.0)
    got = float(loss_d_mmd(torch.from_numpy(src), w, torch.from_numpy(tgt), KernelConfig(mults, 1.3)))
    want = brute_mmd(src.tolist(), w, tgt.tolist(), mults, 1.3)
    assert abs(got - want) / abs(want) < 1e-10


@settings(max_examples=25, deadline=None)
@given(n_s=st.integers(2, 10), n_t=st.integers(2, 10), d=st.integers(1, 5), seed=st.integers(0, 2**16))
def test_mmd_oracle_equivalence_and_floor(n_s, n_t, d, seed):
    rng = np.random.default_rng(seed)
    src, tgt = rng.normal(size=(n_s, d)), rng.normal(size=(n_t, d)) * rng.uniform(0.5, 2)
    w = rng.uniform(0.5, 1.0, n_s)
    kernel = KernelConfig()
    got = loss_d_mmd(torch.from_numpy(src), w, torch.from_numpy(tgt), kernel)
    assert float(got) >= -1e-12
    from upda.daca import median_bandwidth
    base = median_bandwidth(torch.from_numpy(src), torch.from_numpy(tgt))
    want = brute_mmd(src.tolist(), w.tolist(), tgt.tolist(), kernel.multipliers, base)
    assert abs(float(got) - want) <= 1e-10 * max(abs(want), 1e-12) + 1e-14


def test_mmd_identical_sets_vanish():
    x = torch.from_numpy(np.random.default_rng(3).normal(size=(6, 4)))
    assert abs(float(loss_d_mmd(x, np.ones(6), x.clone()))) < 1e-10


def test_mmd_errors():
    x = torch.zeros(3, 2, dtype=torch.float64)
    with pytest.raises(ContractViolation):
        loss_d_mmd(x, np.zeros(3), x)
    with pytest.raises(ContractViolation):
        loss_d_mmd(x[:1], np.ones(1), x)
    with pytest.raises(ContractViolation):
        KernelConfig((1.0, -2.0))


@pytest.fixture
def micro():
    torch.manual_seed(0)
    rng = np.random.default_rng(4)
    g = build_backbone(1, out_dim=16)
    head = init_params(RankingHead(16), 2)
    xs = torch.from_numpy(rng.normal(size=(3, STAT_DIM)))
    xt = torch.from_numpy(rng.normal(size=(3, STAT_DIM)) + 0.3)
    ys = np.array([2.0, 7.5, 4.0])
    return g, head, xs, ys, xt


def test_daca_nu_zero_is_rank_loss(micro):
    g, head, xs, ys, xt = micro
    out = loss_daca(g(xs), ys, g(xt), head, nu=0.0)
    assert float(out.total) == float(out.rank)


def test_daca_additivity(micro):
    g, head, xs, ys, xt = micro
    fs, ft = g(xs), g(xt)
    out = loss_daca(fs, ys, ft, head, nu=1.0)
    sp = source_pairs(ys)
    rank = loss_d_rank(fs, sp, head)
    mmd = loss_d_mmd(pair_features(fs, sp), sp.weight, pair_features(ft, target_pairs(3)))
    assert float(out.total) == pytest.approx(float(rank) + float(mmd), rel=1e-14)


def test_daca_gradient_matches_finite_differences(micro):
    g, head, xs, ys, xt = micro
    kernel = KernelConfig(base=2.0)
    params = [g.fc1.weight, g.fc3.weight, g.fc3.bias, head.net[0].weight]
    err = central_difference_check(lambda: loss_daca(g(xs), ys, g(xt), head, 1.0, kernel).total, params)
    assert err < 1e-4


def test_daca_needs_two_samples(micro):
    g, head, xs, ys, xt = micro
    with pytest.raises(ContractViolation):
        loss_daca(g(xs[:1]), ys[:1], g(xt), head)


def test_full_batch_descent_is_monotone():
    rng = np.random.default_rng(8)
    g = build_backbone(3, out_dim=16)
    head = init_params(RankingHead(16), 4)
    xs = torch.from_numpy(rng.normal(size=(16, STAT_DIM)))
    xt = torch.from_numpy(rng.normal(size=(16, STAT_DIM)) * 1.5)
    ys = rng.uniform(0, 10, 16)
    kernel = KernelConfig(base=4.0)
    params = [*g.parameters(), *head.parameters()]
    opt = torch.optim.SGD(params, lr=1e-3)
    losses = []
    for _ in range(50):
        loss = loss_daca(g(xs), ys, g(xt), head, 1.0, kernel).total
        losses.append(float(loss))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
