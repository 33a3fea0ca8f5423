"""
Index plans: which patches are seen, which are predicted
========================================================

A window of L+H steps is cut into N patches of P steps. A plan picks L/P
of them as inputs and leaves the rest as targets. Standard forecasting is
the plan whose inputs are the first L/P patches.
"""
import numpy as np

from perceiver_ts.formulation import STRATEGIES, make_patch_grid, revin_normalize, revin_denormalize, sample_plan

grid = make_patch_grid(120, 12)       # L=96, H=24, P=12 -> N=10
rng = np.random.default_rng(1)


def show(plan):
    row = ["I" if i in plan.input_patches else "." for i in range(1, grid.n_patches + 1)]
    return "".join(row)


for strategy in STRATEGIES:
    print(f"{strategy:>10}:", "  ".join(show(sample_plan(grid, 96, strategy, rng)) for _ in range(4)))

# the per-window normalization only ever looks at input patches
x = rng.normal(size=(1, 2, 96)) * 5 + 40
xn, stats = revin_normalize(x)
print("means", stats.mu.ravel().round(3), "stds", stats.sigma.ravel().round(3))
print("round trip error", np.abs(revin_denormalize(xn, stats) - x).max())
