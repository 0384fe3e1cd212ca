"""N-pair keeps pulling classes together; MMCL with a margin stops early."""

import numpy as np

from mmcl import LossConfig, optimize_queries, partition_queries, random_queries

p = partition_queries(30, 5)
for seed in range(3):
    q0 = random_queries(30, 16, np.random.default_rng(seed))
    h = {}
    for name, cfg in (("npair", LossConfig()), ("mmcl", LossConfig(margin=0.1))):
        _, rows = optimize_queries(q0, p, name, cfg, iterations=1000)
        h[name] = rows[-1].homogeneity
    print(f"seed {seed}: N-pair {h['npair']:.3f}   MMCL(m=0.1) {h['mmcl']:.3f}")
