"""Walk through the three stage steps one at a time: k-means grouping,
per-cluster standardization, and the learnable rational activation."""

import numpy as np

from cnagnn import Tensor, kmeans_fit, cluster_normalize, rational_forward, rational_init_fit
from cnagnn.cna import CnaLayerState, RationalCoeffs, cna_apply

rng = np.random.default_rng(1)

# Three well-separated point clouds stand in for node features.
x = np.concatenate([rng.normal(0, 1, (30, 2)) + 8 * c for c in np.eye(3, 2)] +
                   [rng.normal(0, 1, (30, 2)) + [8, 8]])

print("== Cluster ==")
state = kmeans_fit(x, 3, seed=0)
print("cluster sizes:", np.bincount(state.assignments))
print("inertia trace (non-increasing):",
      [round(v, 1) for v in state.inertia_history])

print("\n== Normalize ==")
normalized = cluster_normalize(Tensor(x), state.assignments, eps=1e-5).data
for k in range(3):
    rows = normalized[state.assignments == k]
    print(f"cluster {k}: per-feature mean ~ {np.abs(rows.mean(axis=0)).max():.1e}, "
          f"var ~ {rows.var(axis=0).round(3)}")

print("\n== Activate ==")
# Coefficients are fitted so the rational starts out shaped like leaky ReLU;
# during training each cluster's copy drifts independently.
fit = rational_init_fit()
grid = np.linspace(-3, 3, 7).reshape(1, -1)
print("grid:            ", grid[0].round(2))
print("rational on grid:", rational_forward(Tensor(grid), fit).data[0].round(3))

print("\n== Full stage ==")
layer_state = CnaLayerState(
    num_clusters=3,
    rationals=[RationalCoeffs.from_arrays(fit.numerator.data, fit.denominator.data)
               for _ in range(3)],
    eps=1e-5,
    rng=np.random.default_rng(7),
)
out = cna_apply(Tensor(x), layer_state)
print("input rows:", x.shape[0], "-> output rows:", out.shape[0])
print("output is standardized then activated per cluster; overall std:",
      round(float(out.data.std()), 3))
