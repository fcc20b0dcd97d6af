# Stage 2 building blocks: cross-attention fusion, the gate and gradient reversal
#
# Source and target features are split into 8 tokens of width 16 and attend
# to each other with one shared block. A sample's source-side adversarial
# term is switched by h, which says whether fusion helped its regression.

import numpy as np
import torch

from upda.backbone import init_params
from upda.pffa import CrossAttention, PffaHeads, fuse_symmetric, grad_reverse, grl_lambda, loss_pffa

rng = np.random.default_rng(0)
fs, ft = torch.from_numpy(rng.normal(size=(4, 128))), torch.from_numpy(rng.normal(size=(4, 128)))

block = init_params(CrossAttention(16, 4), seed=3)
att = block.attention(fs.reshape(4, 8, 16), ft.reshape(4, 8, 16))
print("attention", tuple(att.shape), "row sums", att.sum(-1).flatten()[:4].tolist())

zero = init_params(CrossAttention(16, 4), 0, "zeros")
print("zeroed projections leave features unchanged:", torch.equal(fuse_symmetric(fs, ft, zero)[0], fs))

# gradient reversal: identity forward, -lambda backward
x = torch.ones(3, dtype=torch.float64, requires_grad=True)
grad_reverse(x, 0.3).sum().backward()
print("reversed gradient at lambda 0.3:", x.grad.tolist())
print("lambda schedule:", [round(grl_lambda(p), 3) for p in (0.0, 0.1, 0.25, 0.5, 1.0)])

heads = init_params(PffaHeads(128), seed=4)
out = loss_pffa(fs, [2.0, 4.0, 6.0, 8.0], ft, heads, mu=0.8, lam=0.5)
print(f"L_PFFA {out.total.item():.4f} = L_Q {out.quality.item():.4f} + 0.8 * L_D {out.disc.item():.4f};  h = {out.h.tolist()}")
