import math

import numpy as np
import pytest
import torch

from upda.backbone import STAT_DIM, build_backbone, init_params
from upda.dataset import ConfigurationError
from upda.pffa import (
    EPS,
    CrossAttention,
    Discriminator,
    PffaHeads,
    RegressionHead,
    adversarial_terms,
    fuse_symmetric,
    gate_from_errors,
    gate_h,
    grad_reverse,
    grl_lambda,
    loss_discriminator,
    loss_pffa,
    loss_quality,
    mca,
    mse,
    tokens,
    untokenize,
)

from gradcheck import central_difference_check

F64 = torch.float64


def _features(n, d=128, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=(n, d)))


def test_tokens_roundtrip_and_shape():
    f = _features(3)
    t = tokens(f)
    assert t.shape == (3, 8, 16)
    assert torch.equal(untokenize(t), f)
    assert torch.equal(tokens(torch.zeros(128, dtype=F64)), torch.zeros(8, 16, dtype=F64))
    assert torch.equal(t[0, 1], f[0, 16:32])


def test_tokens_divisibility():
    with pytest.raises(ConfigurationError):
        tokens(torch.zeros(10, dtype=F64), 3)


def test_attention_rows_sum_to_one():
    block = init_params(CrossAttention(16, 4), 3)
    q, k = tokens(_features(5, seed=1)), tokens(_features(5, seed=2))
    att = block.attention(q, k)
    assert att.shape == (5, 4, 8, 8)
    assert (att.sum(-1) - 1).abs().max() <= 1e-12


def test_uniform_attention_gives_column_mean():
    block = CrossAttention(4, n_heads=1)
    with torch.no_grad():
        block.w_v[0].copy_(torch.eye(4, dtype=F64))
        block.w_h.copy_(torch.eye(4, dtype=F64))
    q = torch.randn(6, 4, dtype=F64)
    kv = torch.randn(5, 4, dtype=F64)
    out = mca(q, kv, kv, block)
    assert out.shape == q.shape
    torch.testing.assert_close(out, kv.mean(0).expand(6, 4), rtol=0, atol=1e-15)


def test_fusion_role_swap_exact():
    block = init_params(CrossAttention(16, 4), 5)
    a, b = _features(4, seed=3), _features(4, seed=4)
    p, q = fuse_symmetric(a, b, block)
    q2, p2 = fuse_symmetric(b, a, block)
    assert torch.equal(p, p2) and torch.equal(q, q2)


def test_fusion_residual_identity():
    block = init_params(CrossAttention(16, 4), 0, "zeros")
    a, b = _features(4, seed=3), _features(4, seed=4)
    p, q = fuse_symmetric(a, b, block)
    assert torch.equal(p, a) and torch.equal(q, b)


def test_fusion_gradient_wrt_query_projection():
    block = init_params(CrossAttention(16, 4), 5)
    a, b = _features(3, seed=3), _features(3, seed=4)
    err = central_difference_check(lambda: (fuse_symmetric(a, b, block)[0] ** 2).sum(), [block.w_q])
    assert err < 1e-4


def test_gate_truth_table():
    assert gate_from_errors(torch.tensor(4.0), torch.tensor(1.0)).item() == 0
    assert gate_from_errors(torch.tensor(1.0), torch.tensor(4.0)).item() == 1
    assert gate_from_errors(torch.tensor(2.0), torch.tensor(2.0)).item() == 1


def test_gate_tie_when_heads_agree():
    reg = init_params(RegressionHead(128), 1)
    f = _features(4)
    h = gate_h(f, f.clone(), [1.0, 2.0, 3.0, 4.0], reg)
    assert torch.equal(h, torch.ones(4, dtype=F64)) and not h.requires_grad


def test_gate_detached():
    reg = init_params(RegressionHead(128), 1)
    f = _features(4).requires_grad_()
    assert not gate_h(f, f * 1.1, [1.0, 2.0, 3.0, 4.0], reg).requires_grad


def _half_disc():
    return init_params(Discriminator(128), 0, "zeros")


def test_discriminator_half_gives_ln2():
    disc = _half_disc()
    _, adv_s, adv_t = loss_discriminator(_features(3), _features(3, seed=1), torch.ones(3), disc)
    assert adv_s.item() == pytest.approx(math.log(2), abs=1e-15)
    assert adv_t.item() == pytest.approx(-math.log(0.5 + EPS), abs=1e-15)
    assert adv_t.item() == pytest.approx(math.log(2), abs=1e-6)


def test_discriminator_clamp_limit():
    disc = _half_disc()
    with torch.no_grad():
        disc.fc2.bias.fill_(-60.0)
    _, adv_s, _ = loss_discriminator(_features(3), _features(3, seed=1), torch.zeros(3), disc)
    assert adv_s.item() == pytest.approx(-math.log(EPS), rel=1e-12)


def test_discriminator_finite_for_extremes():
    disc = _half_disc()
    for bias in (-80.0, 80.0):
        with torch.no_grad():
            disc.fc2.bias.fill_(bias)
        for conv in ("paper", "conventional"):
            for h in (0.0, 1.0):
                total, _, _ = loss_discriminator(_features(2), _features(2), torch.full((2,), h), disc,
                                                 convention=conv)
                assert torch.isfinite(total)


def test_conventions_mirror():
    d_src, d_tgt = torch.tensor([0.2, 0.7], dtype=F64), torch.tensor([0.4], dtype=F64)
    h = torch.tensor([1.0, 0.0], dtype=F64)
    s_paper, _ = adversarial_terms(d_src, d_tgt, h, "paper")
    s_conv, _ = adversarial_terms(d_src, d_tgt, 1 - h, "conventional")
    assert s_paper.item() == s_conv.item()
    with pytest.raises(ConfigurationError):
        adversarial_terms(d_src, d_tgt, h, "other")


def test_forcing_h_changes_source_term_as_predicted():
    disc = init_params(Discriminator(128), 4)
    fs, ft = _features(5, seed=5), _features(5, seed=6)
    with torch.no_grad():
        d = disc(fs)
    _, s1, t1 = loss_discriminator(fs, ft, torch.ones(5), disc)
    _, s0, t0 = loss_discriminator(fs, ft, torch.zeros(5), disc)
    predicted = torch.mean(-torch.log(d) + torch.log(1 - d)).item()
    assert (s0 - s1).item() == pytest.approx(predicted, rel=1e-12)
    assert t0.item() == t1.item()


@pytest.mark.parametrize("lam", [0.3, 1.0])
def test_grl_contract(lam):
    block = init_params(CrossAttention(16, 4), 1)
    disc = init_params(Discriminator(128), 2)
    fs, ft = _features(4, seed=1), _features(4, seed=2)
    h = torch.tensor([1.0, 0.0, 1.0, 1.0], dtype=F64)

    def run(reverse):
        f_hat_s, f_hat_t = fuse_symmetric(fs, ft, block)
        f_hat_s.retain_grad()
        total, _, _ = loss_discriminator(f_hat_s, f_hat_t, h, disc, lam=lam, reverse=reverse)
        block.zero_grad()
        disc.zero_grad()
        total.backward()
        return total.detach(), f_hat_s.grad.clone(), block.w_q.grad.clone(), disc.fc1.weight.grad.clone()

    t_rev, gf_rev, gq_rev, gd_rev = run(True)
    t_id, gf_id, gq_id, gd_id = run(False)
    assert torch.equal(t_rev, t_id)
    assert torch.equal(gf_rev, -lam * gf_id)
    torch.testing.assert_close(gq_rev, -lam * gq_id, rtol=1e-12, atol=1e-12 * gq_id.abs().max().item())
    assert torch.equal(gd_rev, gd_id)


def test_grad_reverse_forward_identity():
    x = torch.randn(3, 4, dtype=F64)
    assert torch.equal(grad_reverse(x, 0.7), x)


def test_grl_schedule():
    assert grl_lambda(0.0) == 0.0
    assert grl_lambda(1.0) == pytest.approx(2 / (1 + math.exp(-10)) - 1)
    assert all(grl_lambda(a) < grl_lambda(b) for a, b in zip(np.linspace(0, 1, 10), np.linspace(0.1, 1.1, 10)))


def test_quality_loss_values():
    assert mse(torch.tensor([3.0, 7.0], dtype=F64), [5.0, 6.0]).item() == 2.5
    y = torch.tensor([1.0, 2.0, 3.0], dtype=F64)
    assert mse(y.clone(), y).item() == 0.0
    assert mse(y + 1, y).item() == 1.0
    reg = init_params(RegressionHead(128), 0, "zeros")
    assert loss_quality(_features(2), [1.0, 3.0], reg).item() == 5.0


@pytest.fixture
def stage2():
    g = build_backbone(2, out_dim=128)
    heads = init_params(PffaHeads(128, 8, 4), 3)
    rng = np.random.default_rng(7)
    xs = torch.from_numpy(rng.normal(size=(4, STAT_DIM)))
    xt = torch.from_numpy(rng.normal(size=(4, STAT_DIM)) + 0.5)
    ys = np.array([1.0, 4.5, 6.0, 9.0])
    return g, heads, xs, ys, xt


def test_pffa_mu_zero_is_quality(stage2):
    g, heads, xs, ys, xt = stage2
    out = loss_pffa(g(xs), ys, g(xt), heads, mu=0.0)
    assert out.total.item() == out.quality.item()


def test_pffa_additivity(stage2):
    g, heads, xs, ys, xt = stage2
    out = loss_pffa(g(xs), ys, g(xt), heads, mu=0.8)
    assert out.total.item() == pytest.approx(out.quality.item() + 0.8 * out.disc.item(), rel=1e-14)
    assert out.disc.item() == pytest.approx(out.adv_s.item() + out.adv_t.item(), rel=1e-14)


@pytest.mark.parametrize("convention", ["paper", "conventional"])
def test_pffa_gradient_matches_finite_differences(stage2, convention):
    g, heads, xs, ys, xt = stage2
    params = [g.fc1.weight, g.fc3.bias, heads.fusion.w_q, heads.fusion.w_h, heads.reg.fc1.weight,
              heads.disc.fc1.weight, heads.disc.fc2.bias]
    fn = lambda: loss_pffa(g(xs), ys, g(xt), heads, 0.8, reverse=False, convention=convention).total  # noqa: E731
    assert central_difference_check(fn, params, n_probe=15) < 1e-4
