"""
Grid collision checks against the exact polygon test
====================================================

The planning metric rasterises obstacles on a 0.1 m grid. This script
perturbs ground-truth plans and compares the grid verdict with an exact
separating-axis test, split by how close the ego box came to an obstacle.
"""

import numpy as np

from gpvl.evaluation import collision_agreement, collision_check, min_separation, polygon_collision_oracle
from gpvl.scene import generate_dataset

scenes = generate_dataset(100, seed=1)
rng = np.random.default_rng(1)
cases = [(np.asarray(s.ego.gt_trajectory) + rng.normal(scale=1.5, size=(6, 2)), s) for s in scenes]

pred, scene = cases[0]
print("grid  ", collision_check(pred, scene).collisions)
print("exact ", polygon_collision_oracle(pred, scene))
print("gap m ", np.round(min_separation(pred, scene), 3))

stats = collision_agreement(cases, margin=0.15)
for k, v in stats.items():
    print(f"{k:28s} {v}")
