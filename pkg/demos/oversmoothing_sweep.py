"""Small depth sweep showing the oversmoothing contrast: vanilla ReLU
collapses with depth while the cluster-normalize-activate stage holds up.

A scaled-down version of the acceptance sweep; takes a couple of minutes.
"""

import numpy as np

from cnagnn import SbmParams
from cnagnn.training import TrainConfig, depth_sweep

params = SbmParams(num_nodes=200, num_blocks=4, p_in=0.15, p_out=0.02,
                   feature_dim=8, block_mean_separation=3.0,
                   feature_noise_sigma=1.0, seed=9)

config = TrainConfig(sbm=params, arch="gcn", hidden=16, clusters=4,
                     epochs=150, lr=1e-2, lr_act=1e-4, weight_decay=5e-3,
                     kmeans_refit_iters=1)

rows = depth_sweep(config, depths=[2, 8, 24], seeds=(0, 1))

print(f"{'depth':>5} {'activation':<11} {'mean acc':>8} {'hidden energy':>14}")
for depth in (2, 8, 24):
    for act in ("relu", "none", "cna"):
        sel = [r for r in rows if r["depth"] == depth and r["activation"] == act]
        acc = np.mean([r["test_metric"] for r in sel])
        energy = np.mean([r["final_hidden_dirichlet"] for r in sel])
        print(f"{depth:>5} {act:<11} {acc:>8.3f} {energy:>14.4e}")

print("\nReLU hidden energy shrinks by orders of magnitude with depth;")
print("the cluster-normalized stage keeps it on the same scale.")
