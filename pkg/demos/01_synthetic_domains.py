# Synthetic point cloud quality data
#
# Every sample is a coloured point cloud built from a pristine shape and one
# distortion at a given level. Its score comes from a full-reference oracle
# that compares the distorted cloud with its reference, rescaled to [0, 10].

import numpy as np

from upda.dataset import DistortionSpec, DomainConfig, apply_distortion, build_domain, generate_pristine, oracle_mos

ref = generate_pristine(content_id=0, n_points=1024, shape_family="torus")
print("pristine torus:", ref.points.shape, "colours in", ref.colors.min().round(3), ref.colors.max().round(3))

# one content, one kind, every level: the oracle score falls as the level rises
for kind in ("geometry_gaussian_noise", "color_noise", "downsample", "quantize"):
    scores = [oracle_mos(apply_distortion(ref, DistortionSpec(kind, lv)), ref) for lv in range(1, 7)]
    print(f"{kind:24s}", np.round(scores, 2))

# a domain is the cross product of contents, kinds and levels
source = build_domain(DomainConfig("source", ("sphere", "torus", "cube_shell", "gaussian_blob"),
                                   ("color_noise", "downsample"), n_groups=4))
target = build_domain(DomainConfig("target", ("sphere", "torus", "cube_shell", "gaussian_blob"),
                                   ("geometry_gaussian_noise",), n_groups=4, content_offset=1000))
print(len(source), "source samples,", len(target), "target samples")
print("target content ids never overlap the source:", sorted(target.groups)[:4])

# the 64-dim descriptor every model consumes
print("stat vector of sample 0:", source[0].stat_vector.shape)
