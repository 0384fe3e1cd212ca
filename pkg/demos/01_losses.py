"""Evaluate every loss on one small partitioned query set."""

import numpy as np

from mmcl import LOSSES, LossConfig, compute_loss, partition_queries

# 12 queries in 3 groups, each group scattered around its own direction
rng = np.random.default_rng(0)
p = partition_queries(12, 3)
centers = rng.normal(size=(3, 8))
q = centers[p.group_of] + 0.7 * rng.normal(size=(12, 8))
print("group sizes:", p.group_sizes)

cfg = LossConfig()  # m=0.01, gamma=1, eta=0.5
for name in LOSSES:
    res = compute_loss(name, q, p, cfg)
    print(f"{name:8s} value {res.value: .6f}   |grad| {np.linalg.norm(res.gradient):.6f}")

# two queries of one class at cosine 0.5: the ordered pairs get rank weights 1 and e^-0.25
two = np.array([[1.0, 0.0], [0.5, np.sqrt(0.75)]])
print("IMC, one pair at 60 degrees:", compute_loss("imc", two, partition_queries(2, 1)).value)

# pull every group tight: IMC stops at the margin, so value and gradient are exactly 0
tight = centers[p.group_of] + 1e-6 * rng.normal(size=(12, 8))
res = compute_loss("imc", tight, p, cfg)
print("IMC inside the margin:", res.value, "max |grad|", np.abs(res.gradient).max())
