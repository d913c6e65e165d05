"""Watch a range-only landmark go from two candidate positions to one.

The robot drives a hexagon and ranges two landmarks. After step 2 the first
landmark has been measured from two poses only, so its posterior has two
mirror-image modes; later measurements from other poses pick one.

    python3 demos/hexagon_modes.py [seed]
"""
import sys

import numpy as np

from flowslam import datasets as ds
from flowslam import metrics as M
from flowslam.engine import Engine, EngineConfig


def main(seed=0):
    seq = ds.generate_synthetic(ds.default_scenario(seed=seed))
    engine = Engine(EngineConfig(seed=seed))
    for batch in seq.steps:
        engine.update(batch.factors, batch.variables)
        samples = engine.sample_joint()
        lmks = [v for v in ("L1", "L2") if v in samples.samples]
        modes = {v: M.mode_count(samples[v]) for v in lmks}
        spread = {v: np.round(samples[v].std(0), 2).tolist() for v in lmks}
        print(f"step {batch.step}: modes {modes} std {spread} "
              f"retrained {engine.timing[-1].fragment_cliques} clique(s)")
    truth = seq.truth
    for v in ("L1", "L2"):
        print(f"{v}: posterior mean {samples[v].mean(0).round(2)} truth {truth[v]}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
