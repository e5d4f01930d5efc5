"""Train a small PCA matcher and compare it with spectral matching.

Scaled down to ten-node graphs and 2400 training pairs so it finishes in
about fifteen seconds.  ``tests/test_acceptance.py`` runs a larger version.
"""

import logging

import numpy as np

from permgm import harness
from permgm.graphs import SyntheticConfig
from permgm.harness import ExperimentConfig, OptimizerSettings

logging.basicConfig(level=logging.INFO, format="%(message)s")

syn = SyntheticConfig(k_pt=10, sigma_feat=1.0, node_feature_dim=256, edge_feature_dim=256)
cfg = ExperimentConfig(method="PCA", synthetic=syn, hidden=256, eval_pairs=100, seed=0,
                       optimizer=OptimizerSettings(epochs=60, pairs_per_epoch=40))

eval_set = harness.eval_set_for(cfg)
ckpt, pca = harness.train(cfg, eval_set, log_every=5)
_, sm = harness.train(cfg.replace(method="SM-unlearned", loss=None, optimizer=None), eval_set)

print(f"\nPCA          : {pca.mean_acc:.3f} +- {pca.std_acc:.3f}  ({pca.wallclock_s:.0f}s)")
print(f"SM-unlearned : {sm.mean_acc:.3f} +- {sm.std_acc:.3f}")
print("paired gain  :", round(float(np.mean(np.subtract(pca.accuracies, sm.accuracies))), 3))
print("loss curve   :", [round(v, 1) for v in pca.train_losses[::10]])

harness.checkpoint_save("/tmp/demo_pca.ckpt", ckpt)
again = harness.evaluate_checkpoint("/tmp/demo_pca.ckpt", eval_set)
print("reloaded acc :", again.mean_acc)
