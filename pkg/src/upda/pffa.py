"""Fine-grained alignment: symmetric cross-attention fusion, a gated
domain discriminator behind gradient reversal, and quality regression."""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from upda.backbone import DTYPE
from upda.dataset import ConfigurationError, ContractViolation

EPS = 1e-7
LABEL_CONVENTIONS = ("paper", "conventional")


def tokens(f: torch.Tensor, n_tokens: int = 8) -> torch.Tensor:
    """Split the last axis into ``n_tokens`` contiguous chunks."""
    d = f.shape[-1]
    if n_tokens < 1 or d % n_tokens:
        raise ConfigurationError(f"feature width {d} is not divisible into {n_tokens} tokens")
    return f.reshape(*f.shape[:-1], n_tokens, d // n_tokens)


def untokenize(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(*t.shape[:-2], t.shape[-2] * t.shape[-1])


class CrossAttention(nn.Module):
    """Multi-head attention with per-head bias-free projections.

    ``w_q``, ``w_k``, ``w_v`` have shape (heads, token_dim, head_dim) and
    ``w_h`` maps the concatenated heads back to token_dim.
    """

    def __init__(self, token_dim: int = 16, n_heads: int = 4, head_dim: int | None = None):
        super().__init__()
        head_dim = token_dim if head_dim is None else head_dim
        self.token_dim, self.n_heads, self.head_dim = token_dim, n_heads, head_dim
        self.w_q = nn.Parameter(torch.zeros(n_heads, token_dim, head_dim, dtype=DTYPE))
        self.w_k = nn.Parameter(torch.zeros(n_heads, token_dim, head_dim, dtype=DTYPE))
        self.w_v = nn.Parameter(torch.zeros(n_heads, token_dim, head_dim, dtype=DTYPE))
        self.w_h = nn.Parameter(torch.zeros(n_heads * head_dim, token_dim, dtype=DTYPE))
        self.fan_in_of = {"w_q": token_dim, "w_k": token_dim, "w_v": token_dim, "w_h": n_heads * head_dim}

    def attention(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        """Attention weights, shape (..., heads, T_q, T_k)."""
        qh = torch.einsum("...td,hde->...hte", q, self.w_q)
        kh = torch.einsum("...td,hde->...hte", k, self.w_k)
        return torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        if q.shape[-1] != self.token_dim or k.shape[-1] != self.token_dim or v.shape[-1] != self.token_dim:
            raise ContractViolation("token width does not match the attention block")
        vh = torch.einsum("...td,hde->...hte", v, self.w_v)
        heads = self.attention(q, k) @ vh
        heads = heads.movedim(-3, -2)
        return heads.reshape(*heads.shape[:-2], self.n_heads * self.head_dim) @ self.w_h


def mca(q_tokens: torch.Tensor, k_tokens: torch.Tensor, v_tokens: torch.Tensor, block: CrossAttention) -> torch.Tensor:
    return block(q_tokens, k_tokens, v_tokens)


def fuse_symmetric(f_s: torch.Tensor, f_t: torch.Tensor, block: CrossAttention, n_tokens: int = 8):
    """Residual cross-attention in both directions with shared weights."""
    if f_s.shape != f_t.shape:
        raise ContractViolation("source and target features must have equal shapes")
    ts, tt = tokens(f_s, n_tokens), tokens(f_t, n_tokens)
    return f_s + untokenize(block(ts, tt, tt)), f_t + untokenize(block(tt, ts, ts))


class _Reverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad.neg() * ctx.lam, None


def grad_reverse(x: torch.Tensor, lam: float, enabled: bool = True) -> torch.Tensor:
    """Identity forward; backward multiplies gradients by ``-lam`` when enabled."""
    return _Reverse.apply(x, float(lam)) if enabled else x


def grl_lambda(progress: float) -> float:
    """Warm-up schedule 2 / (1 + exp(-10 p)) - 1 for training progress p in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


class Discriminator(nn.Module):
    def __init__(self, in_dim: int = 128, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, 1, dtype=DTYPE)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.tanh(self.fc1(f)))).squeeze(-1)


class RegressionHead(nn.Module):
    def __init__(self, in_dim: int = 128, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, 1, dtype=DTYPE)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(f))).squeeze(-1)


def gate_from_errors(err_fused: torch.Tensor, err_raw: torch.Tensor) -> torch.Tensor:
    """h = 0 where fusion strictly hurts regression, 1 otherwise (ties included)."""
    return (torch.as_tensor(err_fused) <= torch.as_tensor(err_raw)).to(DTYPE)


def gate_h(f_s: torch.Tensor, f_hat_s: torch.Tensor, y_s, reg: nn.Module) -> torch.Tensor:
    with torch.no_grad():
        y = torch.as_tensor(y_s, dtype=DTYPE)
        return gate_from_errors((reg(f_hat_s) - y) ** 2, (reg(f_s) - y) ** 2)


def adversarial_terms(d_src: torch.Tensor, d_tgt: torch.Tensor, h, convention: str = "paper", eps: float = EPS):
    """Source and target discriminator terms given D outputs.

    ``paper`` uses ``-log|D - h|``; ``conventional`` uses ``-log|D - (1 - h)|``,
    which labels an ungated source sample 1 as in standard DANN training.
    """
    if convention not in LABEL_CONVENTIONS:
        raise ConfigurationError(f"unknown label convention {convention!r}")
    if len(d_src) == 0 or len(d_tgt) == 0:
        raise ContractViolation("discriminator loss needs nonempty batches")
    h = torch.as_tensor(h, dtype=d_src.dtype).detach()
    label = h if convention == "paper" else 1.0 - h
    adv_s = -torch.log((d_src - label).abs().clamp(eps, 1.0)).mean()
    adv_t = -torch.log(1.0 - d_tgt + eps).mean()
    return adv_s, adv_t


def loss_discriminator(
    f_hat_s: torch.Tensor,
    f_hat_t: torch.Tensor,
    h,
    disc: nn.Module,
    lam: float = 1.0,
    reverse: bool = True,
    convention: str = "paper",
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L_D, L_adv^s, L_adv^t); features reach D through gradient reversal."""
    d_src = disc(grad_reverse(f_hat_s, lam, reverse))
    d_tgt = disc(grad_reverse(f_hat_t, lam, reverse))
    adv_s, adv_t = adversarial_terms(d_src, d_tgt, h, convention)
    return adv_s + adv_t, adv_s, adv_t


def mse(q: torch.Tensor, y) -> torch.Tensor:
    if q.numel() == 0:
        raise ContractViolation("regression loss needs a nonempty batch")
    return ((q - torch.as_tensor(y, dtype=q.dtype)) ** 2).mean()


def loss_quality(features: torch.Tensor, y, reg: nn.Module) -> torch.Tensor:
    return mse(reg(features), y)


class PffaLoss(NamedTuple):
    total: torch.Tensor
    quality: torch.Tensor
    disc: torch.Tensor
    adv_s: torch.Tensor
    adv_t: torch.Tensor
    h: torch.Tensor


class PffaHeads(nn.Module):
    """Fusion block, discriminator and regression head trained in stage 2."""

    def __init__(self, feature_dim: int = 128, n_tokens: int = 8, n_heads: int = 4, head_dim: int | None = None):
        super().__init__()
        if feature_dim % n_tokens:
            raise ConfigurationError(f"feature width {feature_dim} is not divisible into {n_tokens} tokens")
        self.n_tokens = n_tokens
        self.fusion = CrossAttention(feature_dim // n_tokens, n_heads, head_dim)
        self.disc = Discriminator(feature_dim)
        self.reg = RegressionHead(feature_dim)


def loss_pffa(
    f_s: torch.Tensor,
    y_s,
    f_t: torch.Tensor,
    heads: PffaHeads,
    mu: float = 0.8,
    lam: float = 1.0,
    reverse: bool = True,
    convention: str = "paper",
    force_h: float | None = None,
) -> PffaLoss:
    """L_Q + mu * L_D on fused features; ``force_h`` overrides the gate."""
    f_hat_s, f_hat_t = fuse_symmetric(f_s, f_t, heads.fusion, heads.n_tokens)
    if force_h is None:
        h = gate_h(f_s, f_hat_s, y_s, heads.reg)
    else:
        h = torch.full((len(f_s),), float(force_h), dtype=DTYPE)
    quality = loss_quality(f_hat_s, y_s, heads.reg)
    disc, adv_s, adv_t = loss_discriminator(f_hat_s, f_hat_t, h, heads.disc, lam, reverse, convention)
    return PffaLoss(quality + mu * disc, quality, disc, adv_s, adv_t, h)
