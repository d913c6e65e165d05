"""Run the Plaza-style pipeline on a generated stream.

Writes odometry/range/ground-truth files for a rounded-rectangle drive,
then decimates, batches and solves incrementally. With noiseless data and
a zero-noise model the aligned trajectory error is zero.

    python3 demos/plaza_stream.py OUTDIR
"""
import sys
from pathlib import Path

from flowslam import cli

out = Path(sys.argv[1] if len(sys.argv) > 1 else "plaza_demo")
code = cli.main(["plaza", "--make-data", "30", "--out", str(out),
                 "--odometry-noise", "0", "0", "0", "--prior-noise", "0", "0", "0",
                 "--train-samples", "200", "--posterior-samples", "300"])
if code == 0:
    print((out / "ate.txt").read_text().strip())
    print((out / "timing.log").read_text().strip())
    print(f"trajectory in {out / 'trajectory.txt'}")
