# Stage 1: rank features, discrepancy weights and weighted MMD
#
# Pairs of source samples become rank features f_i - f_j labelled by which
# one scores higher. Pairs with a larger score gap count more. The weighted
# source rank features are pulled toward the target rank features by a
# multi-bandwidth Gaussian MMD.

import numpy as np
import torch

from upda.backbone import build_backbone, init_params
from upda.daca import RankingHead, loss_daca, pair_weight, source_pairs

print("w(5, 5) =", pair_weight(5, 5), " w(7, 3) =", round(pair_weight(7, 3), 5), " w(9, 1) =", round(pair_weight(9, 1), 5))

y = np.array([2.0, 7.5, 4.0, 9.0])
pairs = source_pairs(y)
print(len(pairs), "ordered pairs; labels", pairs.label.astype(int), "weights", np.round(pairs.weight, 3))

rng = np.random.default_rng(0)
g = build_backbone(seed=1, out_dim=32)
head = init_params(RankingHead(32), seed=2)
xs = torch.from_numpy(rng.normal(size=(4, 64)))
xt = torch.from_numpy(rng.normal(size=(4, 64)) + 0.5)

opt = torch.optim.Adam([*g.parameters(), *head.parameters()], lr=1e-3)
for step in range(101):
    out = loss_daca(g(xs), y, g(xt), head, nu=1.0)
    if step % 25 == 0:
        print(f"step {step:3d}  L_DACA {out.total.item():.4f}  rank {out.rank.item():.4f}  mmd {out.mmd.item():.5f}")
    opt.zero_grad()
    out.total.backward()
    opt.step()
