"""Command-line drivers for the synthetic, Plaza-format and oracle experiments.

Every subcommand writes plain-text outputs into ``--out`` together with a
``config.txt`` echo of the effective settings. Apart from ``timing.log``
all outputs are byte-identical for a fixed ``--seed``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import metrics as M
from .engine import Engine, EngineConfig, batch_solve
from .factor_graph import ParseError, read_graph

log = logging.getLogger("flowslam")

# (knots, training samples) per subcommand
DEFAULTS = {"synthetic": (6, 500), "plaza": (10, 1000), "oracle-compare": (6, 500), "solve": (6, 500)}
DEFAULT_INTERVAL = {"synthetic": 1, "plaza": 100, "oracle-compare": 1, "solve": 1}


@dataclass
class RunConfig:
    subcommand: str
    out: Path
    knots: int = 6
    train_samples: int = 500
    posterior_samples: int = 2000
    update_interval: int = 1
    seed: int = 0
    threads: int = 1
    affine_only: bool = False
    inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.knots < 4:
            raise ValueError("--knots must be at least 4")
        for name in ("train_samples", "posterior_samples", "update_interval", "threads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"--{name.replace('_', '-')} must be positive")

    def engine_config(self) -> EngineConfig:
        return EngineConfig(knots=self.knots, train_samples=self.train_samples,
                            posterior_samples=self.posterior_samples, seed=self.seed,
                            affine_only=self.affine_only, threads=self.threads)

    def echo(self) -> str:
        parts = [self.subcommand]
        parts += [f"{k}" for k in self.inputs.get("positional", [])]
        parts += [f"--knots {self.knots}", f"--train-samples {self.train_samples}",
                  f"--posterior-samples {self.posterior_samples}",
                  f"--update-interval {self.update_interval}", f"--seed {self.seed}",
                  f"--threads {self.threads}"]
        if self.affine_only:
            parts.append("--affine-only")
        for k, v in self.inputs.items():
            if k != "positional":
                parts.append(f"--{k} {v}")
        return " ".join(parts) + "\n"


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _fmt(x: float) -> str:
    return f"{x:.6e}"


# --------------------------------------------------------------------------
# synthetic


def run_synthetic(cfg: RunConfig, oracle_dim: int = 15, skip_oracle: bool = False) -> list[Path]:
    """Incremental run over the default hexagon scenario with per-step reports."""
    seq = ds.generate_synthetic(ds.default_scenario(seed=cfg.seed))
    engine = Engine(cfg.engine_config())
    written = []
    modes, mmds = [], []
    landmarks = [v.id for b in seq.steps for v in b.variables if v.kind == "point"]
    num = len(seq.steps)
    for start in range(0, num, cfg.update_interval):
        group = seq.steps[start:start + cfg.update_interval]
        step = group[-1].step
        engine.update([f for b in group for f in b.factors], [v for b in group for v in b.variables])
        samples = engine.sample_joint()
        path = cfg.out / f"samples_step{step}.txt"
        samples.write(path)
        written.append(path)
        counts = [f"{v}={M.mode_count(samples[v])}" for v in landmarks if v in samples.samples]
        modes.append(" ".join([f"step={step}"] + counts))
        graph = seq.graph_until(step)
        if skip_oracle:
            mmds.append(f"step={step} skipped=disabled")
        elif graph.dims() > oracle_dim:
            mmds.append(f"step={step} skipped=dim{graph.dims()}")
        else:
            rng = np.random.default_rng([cfg.seed, step, 0x0C])
            try:
                ref = M.oracle_posterior(graph, cfg.posterior_samples, rng)
            except M.OracleError as exc:
                mmds.append(f"step={step} skipped=oracle ({exc})")
            else:
                mmds.append(f"step={step} joint={_fmt(M.mmd(samples.block(ref.names), ref))}")
    for name, lines in (("modes.txt", modes), ("mmd.txt", mmds)):
        _write(cfg.out / name, "".join(l + "\n" for l in lines))
        written.append(cfg.out / name)
    _write(cfg.out / "timing.log", engine.timing_log())
    written.append(cfg.out / "timing.log")
    return written


# --------------------------------------------------------------------------
# plaza


def plaza_model(odometry_noise, prior_noise, range_noise) -> ds.PlazaModel:
    return ds.PlazaModel(odometry_cov=np.diag(np.square(odometry_noise)), range_sigma=float(range_noise),
                         prior_cov=np.diag(np.square(prior_noise)))


def run_plaza(cfg: RunConfig, odometry_path, range_path, truth_path=None, batch_size: int = 10,
              model: ds.PlazaModel | None = None) -> list[Path]:
    """Decimate, batch and incrementally solve a Plaza-format stream."""
    record = ds.read_plaza(odometry_path, range_path)
    truth = ds.read_ground_truth(truth_path) if truth_path else None
    batches, _ = ds.ingest_plaza(record, batch_size)
    per_update = max(1, cfg.update_interval // batch_size)
    updates = ds.batches_to_updates(batches, model, per_update) if batches else []
    engine = Engine(cfg.engine_config())
    samples = None
    seen: list[str] = []
    for u in updates:
        seen += [v.id for v in u.variables]
        engine.update(u.factors, u.variables, ordering=ds.chronological_ordering(seen))
        samples = engine.sample_joint()
    traj_path, ate_path, timing_path = cfg.out / "trajectory.txt", cfg.out / "ate.txt", cfg.out / "timing.log"
    rows, est, gt = [], [], []
    if samples is not None:
        poses = [ds.pose_id(k) for k in range(len(batches) + 1)]
        means = samples.mean_poses(poses)
        times = [0.0] + [b.end_time for b in batches]
        rows = [(t, p, *m) for t, p, m in zip(times, poses, means)]
        if truth:
            stamps = np.array([r[0] for r in truth])
            for t, m in zip(times, means):
                i = int(np.argmin(np.abs(stamps - t))) if t > 0 else 0
                gt.append(truth[i][1:])
                est.append(m)
    ds.write_rows(traj_path, rows)
    if len(est) >= 3:
        _write(ate_path, M.ate_line(M.ate(np.array(est), np.array(gt))) + "\n")
    else:
        _write(ate_path, "")
    _write(timing_path, engine.timing_log())
    return [traj_path, ate_path, timing_path]


def write_synthetic_plaza(out: Path, num_batches: int = 30, seed: int = 0, noise: bool = False) -> list[Path]:
    odom, ranges, gt = ds.synthetic_plaza(num_batches=num_batches, seed=seed, noise=noise)
    paths = [out / "odometry.txt", out / "ranges.txt", out / "ground_truth.txt"]
    for p, rows in zip(paths, (odom, ranges, gt)):
        ds.write_rows(p, rows)
    return paths


# --------------------------------------------------------------------------
# oracle comparison / batch solve


def run_oracle_compare(cfg: RunConfig, graph_path, oracle_particles: int | None = None) -> list[Path]:
    """Joint and per-variable MMD between a batch solve and the oracle.

    A second independent oracle run gives the 99th-percentile permutation
    threshold that the joint MMD is judged against.
    """
    graph = read_graph(graph_path)
    _, samples = batch_solve(graph, cfg.engine_config())
    ref = M.oracle_posterior(graph, cfg.posterior_samples, np.random.default_rng([cfg.seed, 0x0A]),
                             particles=oracle_particles)
    ref2 = M.oracle_posterior(graph, cfg.posterior_samples, np.random.default_rng([cfg.seed, 0x0B]),
                              particles=oracle_particles)
    ours = samples.block(ref.names)
    lines = []
    for v in ref.names:
        lines.append(f"{v} {_fmt(M.mmd(ours.select([v]), ref.select([v])))}")
    lines.append(f"joint {_fmt(M.mmd(ours, ref))}")
    thr = M.permutation_threshold(ref, ref2, rng=np.random.default_rng([cfg.seed, 0x0D]))
    lines.append(f"threshold99 {_fmt(thr)}")
    report = cfg.out / "mmd.txt"
    _write(report, "".join(l + "\n" for l in lines))
    samples.write(cfg.out / "samples.txt")
    path_o = cfg.out / "oracle_samples.txt"
    _write_block(ref, path_o)
    return [report, cfg.out / "samples.txt", path_o]


def _write_block(block, path) -> None:
    with open(path, "w") as fh:
        fh.write(" ".join(block.column_names()) + "\n")
        for row in block.values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def run_solve(cfg: RunConfig, graph_path) -> list[Path]:
    graph = read_graph(graph_path)
    engine, samples = batch_solve(graph, cfg.engine_config())
    samples.write(cfg.out / "samples.txt")
    _write(cfg.out / "tree.txt", engine.tree.outline())
    _write(cfg.out / "timing.log", engine.timing_log())
    return [cfg.out / "samples.txt", cfg.out / "tree.txt", cfg.out / "timing.log"]


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowslam", description="Incremental non-Gaussian SLAM with normalizing flows.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("--knots", type=int, default=None, help="spline bins per dimension")
        sp.add_argument("--train-samples", type=int, default=None)
        sp.add_argument("--posterior-samples", type=int, default=2000)
        sp.add_argument("--update-interval", type=int, default=None,
                        help="steps per update (plaza: raw odometry time steps)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--out", type=Path, required=True)
        sp.add_argument("--affine-only", action="store_true", help="restrict flows to affine rows")

    sp = sub.add_parser("synthetic", help="incremental run of the hexagon scenario")
    common(sp)
    sp.add_argument("--skip-oracle", action="store_true", help="do not compute MMD against the oracle")

    sp = sub.add_parser("plaza", help="incremental run on Plaza-format odometry and range files")
    common(sp)
    sp.add_argument("--odometry", type=Path)
    sp.add_argument("--ranges", type=Path)
    sp.add_argument("--ground-truth", type=Path)
    sp.add_argument("--batch-size", type=int, default=10)
    sp.add_argument("--odometry-noise", type=float, nargs=3, default=(0.05, 0.05, 0.01), metavar=("SX", "SY", "STH"))
    sp.add_argument("--prior-noise", type=float, nargs=3, default=(0.01, 0.01, 0.001), metavar=("SX", "SY", "STH"))
    sp.add_argument("--range-noise", type=float, default=0.5)
    sp.add_argument("--make-data", type=int, metavar="BATCHES", default=None,
                    help="write a noiseless synthetic Plaza-format stream into --out and use it")

    sp = sub.add_parser("oracle-compare", help="MMD of a batch solve against the oracle")
    common(sp)
    sp.add_argument("graph", type=Path)
    sp.add_argument("--oracle-particles", type=int, default=None)

    sp = sub.add_parser("solve", help="batch solve of a factor-graph file")
    common(sp)
    sp.add_argument("graph", type=Path)
    return p


def config_from_args(args) -> RunConfig:
    knots, train = DEFAULTS[args.subcommand]
    inputs: dict = {}
    if args.subcommand in ("oracle-compare", "solve"):
        inputs["positional"] = [args.graph.name]
    elif args.subcommand == "plaza":
        if args.make_data is not None:
            inputs["make-data"] = args.make_data
        inputs["batch-size"] = args.batch_size
        inputs["odometry-noise"] = " ".join(repr(x) for x in args.odometry_noise)
        inputs["prior-noise"] = " ".join(repr(x) for x in args.prior_noise)
        inputs["range-noise"] = repr(args.range_noise)
    return RunConfig(
        subcommand=args.subcommand, out=args.out,
        knots=args.knots if args.knots is not None else knots,
        train_samples=args.train_samples if args.train_samples is not None else train,
        posterior_samples=args.posterior_samples,
        update_interval=args.update_interval if args.update_interval is not None
        else DEFAULT_INTERVAL[args.subcommand],
        seed=args.seed, threads=args.threads, affine_only=args.affine_only, inputs=inputs)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
    except ValueError as exc:
        parser.error(str(exc))
    try:
        os.makedirs(cfg.out, exist_ok=True)
        _write(cfg.out / "config.txt", cfg.echo())
        if cfg.subcommand == "synthetic":
            run_synthetic(cfg, skip_oracle=args.skip_oracle)
        elif cfg.subcommand == "plaza":
            odo, rng_path, gt = args.odometry, args.ranges, args.ground_truth
            if args.make_data is not None:
                odo, rng_path, gt = write_synthetic_plaza(cfg.out, args.make_data, cfg.seed)
            if odo is None or rng_path is None:
                parser.error("plaza needs --odometry and --ranges (or --make-data)")
            if args.batch_size <= 0:
                parser.error("--batch-size must be positive")
            model = plaza_model(args.odometry_noise, args.prior_noise, args.range_noise)
            run_plaza(cfg, odo, rng_path, gt, args.batch_size, model)
        elif cfg.subcommand == "oracle-compare":
            run_oracle_compare(cfg, args.graph, args.oracle_particles)
        else:
            run_solve(cfg, args.graph)
    except (ParseError, ds.StreamParseError) as exc:
        print(f"flowslam: parse error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"flowslam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
