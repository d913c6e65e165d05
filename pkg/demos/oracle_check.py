"""Compare flow posteriors against the reference sampler on a 5-variable graph.

Three poses, two landmarks, three range measurements. Prints per-variable
and joint MMD for spline and affine flows, next to the spread between two
independent reference runs.

    python3 demos/oracle_check.py
"""
import numpy as np

from flowslam import bayes_tree as bt
from flowslam import metrics as M
from flowslam.datasets import small_range_graph
from flowslam.engine import EngineConfig, batch_solve

graph = small_range_graph()
print(bt.eliminate(graph, bt.default_ordering(graph)).outline())

ref = M.oracle_posterior(graph, 2000, np.random.default_rng(1))
ref2 = M.oracle_posterior(graph, 2000, np.random.default_rng(2))
print(f"oracle vs oracle: {M.mmd(ref, ref2):.2e}  (99% threshold {M.permutation_threshold(ref, ref2, rng=0):.2e})")

for affine in (False, True):
    cfg = EngineConfig(knots=10, train_samples=2000, posterior_samples=2000, affine_only=affine)
    _, samples = batch_solve(graph, cfg)
    ours = samples.block(ref.names)
    per_var = " ".join(f"{v}={M.mmd(ours.select([v]), ref.select([v])):.1e}" for v in ref.names)
    print(f"{'affine' if affine else 'spline'}: joint {M.mmd(ours, ref):.2e}  {per_var}")
