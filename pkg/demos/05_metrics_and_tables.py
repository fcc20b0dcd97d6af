# Metrics and comparison tables
#
# SRCC compares rankings. PLCC is computed after a five-parameter logistic
# maps predictions onto the score scale, so any affine rescaling of the
# predictions is absorbed.

import numpy as np

from upda.evaluation import EvalReport, FoldResult, compare_methods, fit_logistic, plcc_after_fit, srcc

print("SRCC((1,2,3,4), (1,3,2,4)) =", srcc([1, 2, 3, 4], [1, 3, 2, 4]))

rng = np.random.default_rng(0)
mos = rng.uniform(0, 10, 30)
pred = np.tanh((mos - 5) / 3) + rng.normal(0, 0.05, 30)
plcc, fit = plcc_after_fit(pred, mos)
print(f"PLCC after fit {plcc:.4f}, converged {fit.converged}, beta {np.round(fit.beta, 3)}")
print(f"same after pred -> 40 * pred - 7: {plcc_after_fit(40 * pred - 7, mos)[0]:.4f}")
print("raw Pearson:", np.corrcoef(pred, mos)[0, 1].round(4))

reports = []
for method, base in (("NoAdapt", 0.6), ("DirAdapt", 0.7), ("UPDA", 0.75)):
    r = EvalReport("cross_distortion", method)
    for seed in range(3):
        for fold in range(4):
            r.folds.append(FoldResult(fold, seed, base + rng.normal(0, 0.05), base + rng.normal(0, 0.05)))
    reports.append(r)
table = compare_methods(reports)
print(table.to_csv())
print("best per column:", table.bold_marks())
