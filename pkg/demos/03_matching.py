"""Minimum-cost matching of predictions to ground truth."""

import numpy as np

from mmcl import solve_assignment

rng = np.random.default_rng(3)
cost = rng.uniform(0, 10, size=(6, 3)).round(1)  # 6 predictions, 3 objects
print(cost)
a = solve_assignment(cost)
print("pairs:", a.pairs)
print("unmatched predictions:", a.unmatched_predictions)
print("total cost:", a.total_cost)

# all-equal costs: the answer is still unique, the lexicographically smallest pair list
print("ties:", solve_assignment(np.zeros((3, 3))).pairs)
