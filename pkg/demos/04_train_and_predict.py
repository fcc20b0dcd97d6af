# Training the three methods on a small cross-distortion problem
#
# The source is labelled colour-noise and downsampling data, the target is
# unlabelled geometry noise on unseen contents. NoAdapt never sees the target;
# DirAdapt adds a plain domain discriminator; UPDA runs both stages.

import time

from upda.dataset import DomainConfig, build_domain, split_folds
from upda.evaluation import srcc
from upda.train import TrainConfig, inference_checkpoint, predict, run_method

fam = ("sphere", "torus", "cube_shell", "gaussian_blob")
source = build_domain(DomainConfig("source", fam, ("color_noise", "downsample"), n_groups=4))
target = build_domain(DomainConfig("target", fam, ("geometry_gaussian_noise",), n_groups=4, content_offset=1000))
adapt_idx, test_idx = split_folds(target, 4)[0]
adapt, test = target.subset(adapt_idx), target.subset(test_idx)

cfg = TrainConfig(stage1_epochs=20, stage2_epochs=20, seed=0)
for method in ("noadapt", "diradapt", "upda"):
    t0 = time.perf_counter()
    ckpt, record = run_method(method, source, adapt, cfg)
    pred = predict(inference_checkpoint(ckpt), test.features())
    print(f"{record.method:8s} target-test SRCC {srcc(pred, test.labels()):+.3f}  ({time.perf_counter() - t0:.1f}s)")

# the inference artifact keeps only the feature extractor and the regressor
print("inference groups:", sorted(inference_checkpoint(ckpt).groups))
