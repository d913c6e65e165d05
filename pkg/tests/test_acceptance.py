"""End-to-end acceptance criteria.

Each test records its criterion so the terminal summary prints one
pass/fail line per criterion. Run alone with
``pytest tests/test_acceptance.py -v``.
"""
import filecmp
import time

import numpy as np
import pytest

from helpers import gaussian_chain_smoother, laplace_posterior, numeric_jacobian, numeric_param_gradient, random_flow, relative_error
from flowslam import cli
from flowslam import datasets as ds
from flowslam import factor_graph as fg
from flowslam import geometry as geo
from flowslam import metrics as M
from flowslam.engine import Engine, EngineConfig, batch_solve
from flowslam.factor_graph import write_graph
from flowslam.spline_flow import objective_and_gradient


@pytest.fixture
def criterion(record_property):
    def mark(name, detail=""):
        record_property("criterion", name)
        record_property("detail", detail)
    return mark


def test_flow_correctness_suite(criterion):
    criterion("1 flow correctness")
    t0 = time.perf_counter()
    worst = {"roundtrip": 0.0, "logdet": 0.0, "grad": 0.0}
    for seed in range(6):
        rng = np.random.default_rng(seed)
        for affine in (False, True):
            flow = random_flow(dim=3, num_bins=5, hidden=(6,), rng=seed, affine=affine)
            x = rng.normal(size=(40, 3)) * 1.5
            y, logdet = flow.forward(x)
            worst["roundtrip"] = max(worst["roundtrip"], np.max(np.abs(flow.inverse(y) - x)))
            for i in range(0, 40, 8):
                jac = numeric_jacobian(lambda v: flow.forward(v[None])[0][0], x[i], eps=1e-6)
                ref = np.log(abs(np.linalg.det(jac)))
                worst["logdet"] = max(worst["logdet"], abs(logdet[i] - ref) / max(abs(ref), 1.0))
            batch = rng.normal(size=(30, 3))
            _, grad = objective_and_gradient(flow, batch)
            params = flow.rows.params
            num = numeric_param_gradient(lambda: objective_and_gradient(flow, batch)[0], params, eps=1e-6)
            worst["grad"] = max(worst["grad"], relative_error(grad, num))
    elapsed = time.perf_counter() - t0
    criterion("1 flow correctness", " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" time={elapsed:.1f}s")
    assert worst["roundtrip"] <= 1e-9
    assert worst["logdet"] <= 1e-5
    assert worst["grad"] <= 1e-4
    assert elapsed < 60


def test_affine_flows_recover_the_gaussian_smoother(criterion):
    criterion("2 affine gaussian equivalence")
    t0 = time.perf_counter()
    # near-linear chain: straight steps, tiny heading noise, priors at both ends
    step = np.array([1.0, 0.0, 0.0])
    step_cov = np.diag([0.1 ** 2, 0.1 ** 2, 0.002 ** 2])
    prior_cov = np.diag([0.1 ** 2, 0.1 ** 2, 0.002 ** 2])
    end_mean = np.array([4.3, 0.2, 0.0])
    g = fg.FactorGraph()
    for k in range(5):
        g.add_variable(f"X{k}", fg.POSE)
    g.add_factor(fg.PriorPose("p0", "X0", [0, 0, 0], prior_cov))
    for k in range(4):
        g.add_factor(fg.Odometry(f"o{k}", f"X{k}", f"X{k + 1}", step, step_cov))
    g.add_factor(fg.PriorPose("p4", "X4", end_mean, prior_cov))
    # additive smoother as the starting point, exact linearization at the mode as the reference
    guess, _ = gaussian_chain_smoother(5, np.zeros(3), prior_cov, [step] * 4, step_cov, (end_mean, prior_cov))
    mean, cov = laplace_posterior(g, guess)
    # large training sets are cheap for affine rows; n = 5000 posterior draws as specified
    cfg = EngineConfig(train_samples=200_000, posterior_samples=5000, affine_only=True, seed=1)
    _, s = batch_solve(g, cfg)
    x = np.hstack([s[f"X{k}"] for k in range(5)])
    sd = np.sqrt(np.diag(cov))
    mean_err = np.max(np.abs(x.mean(0) - mean) / sd)
    var_err = np.max(np.abs(x.var(0) / np.diag(cov) - 1))
    elapsed = time.perf_counter() - t0
    criterion("2 affine gaussian equivalence", f"mean_err={mean_err:.3f}sd var_err={var_err:.3f} time={elapsed:.0f}s")
    assert mean_err < 0.05
    assert var_err < 0.10
    assert elapsed < 300


def _synthetic_run(seed, knots=6, train=500, upto=5):
    seq = ds.generate_synthetic(ds.default_scenario(seed=seed))
    eng = Engine(EngineConfig(knots=knots, train_samples=train, posterior_samples=2000, seed=seed))
    out = {}
    for b in seq.steps[:upto + 1]:
        eng.update(b.factors, b.variables)
        if b.step in (2, 5):
            out[b.step] = eng.sample_joint()
    return seq, out


def test_synthetic_multimodality(criterion):
    criterion("3 synthetic modes")
    t0 = time.perf_counter()
    details, ok = [], True
    for seed in range(3):
        seq, out = _synthetic_run(seed)
        s2, s5 = out[2], out[5]
        m2 = M.mode_count(s2["L1"])
        r = next(f for f in seq.steps[2].factors if f.kind == "range" and f.variables == ("X2", "L2"))
        dist = np.hypot(*(s2["L2"] - s2["X2"][:, :2]).T)
        ring_ok = abs(dist.mean() - r.observed) < 2 * r.sigma
        m5 = (M.mode_count(s5["L1"]), M.mode_count(s5["L2"]))
        passed = m2 == 2 and ring_ok and m5 == (1, 1)
        ok &= passed
        details.append(f"seed{seed}:L1@2={m2},ring={dist.mean():.2f}/{r.observed:.2f},@5={m5[0]}{m5[1]}")
    elapsed = time.perf_counter() - t0
    criterion("3 synthetic modes", " ".join(details) + f" time={elapsed:.0f}s")
    assert ok
    assert elapsed < 600


def test_oracle_agreement(criterion):
    criterion("4 oracle agreement")
    t0 = time.perf_counter()
    g = ds.small_range_graph()
    n = 2000
    ref = M.oracle_posterior(g, n, np.random.default_rng(100))
    ref2 = M.oracle_posterior(g, n, np.random.default_rng(101))
    thr = M.permutation_threshold(ref, ref2, rng=0)
    _, spline = batch_solve(g, EngineConfig(knots=10, train_samples=2000, posterior_samples=n, seed=0))
    _, affine = batch_solve(g, EngineConfig(knots=10, train_samples=2000, posterior_samples=n, seed=0,
                                            affine_only=True))
    m_spline = M.mmd(spline.block(ref.names), ref)
    m_affine = M.mmd(affine.block(ref.names), ref)
    elapsed = time.perf_counter() - t0
    criterion("4 oracle agreement",
              f"spline={m_spline:.2e} affine={m_affine:.2e} threshold99={thr:.2e} time={elapsed:.0f}s")
    assert m_spline < thr
    assert m_spline <= m_affine
    assert elapsed < 900


def test_incremental_matches_batch(criterion):
    criterion("5 incremental vs batch")
    t0 = time.perf_counter()
    seq, out = _synthetic_run(0)
    inc = out[5]
    _, batch = batch_solve(seq.graph_until(5), EngineConfig(posterior_samples=2000, seed=7))
    a, b = inc.block(), batch.block(inc.samples)
    value = M.mmd(a, b)
    thr = M.permutation_threshold(a, b, rng=0)
    elapsed = time.perf_counter() - t0
    criterion("5 incremental vs batch", f"mmd={value:.2e} threshold99={thr:.2e} time={elapsed:.0f}s")
    assert value < thr
    assert elapsed < 600


def test_incremental_locality(criterion):
    criterion("6 incremental locality")
    t0 = time.perf_counter()
    seq = ds.generate_synthetic(ds.corridor_scenario(50, seed=0))
    eng = Engine(EngineConfig())
    for b in seq.steps:
        eng.update(b.factors, b.variables)
    later = eng.timing[10:]
    times = np.array([r.update_s for r in later])
    frags = [r.fragment_cliques for r in eng.timing]
    ratio = times.max() / times.min()
    elapsed = time.perf_counter() - t0
    criterion("6 incremental locality",
              f"time_ratio={ratio:.2f} max_fragment={max(frags)} "
              f"first_half={max(frags[:25])} second_half={max(frags[25:])} time={elapsed:.0f}s")
    assert ratio < 3.0
    # bounded by a constant: the second half of the run never needs larger fragments
    assert max(frags[25:]) <= max(frags[:25]) <= 6
    assert elapsed < 1200


def test_plaza_protocol(criterion, tmp_path):
    criterion("7 plaza pipeline")
    t0 = time.perf_counter()
    odo, ranges, gt = ds.synthetic_plaza(30)
    batches, pending = ds.ingest_plaza(ds.PlazaRecord(odo, ranges), batch_size=10,
                                       min_translation=1e-2, min_rotation=1e-3)
    assert len(batches) == 30 and not pending
    worst = 0.0
    for b in batches:
        x = y = th = 0.0
        for _, dx, dth in b.increments:
            x, y, th = x + dx * np.cos(th), y + dx * np.sin(th), th + dth
        worst = max(worst, np.max(np.abs(b.transform[:2] - [x, y])), abs(geo.wrap_angle(b.transform[2] - th)))
    argv = ["plaza", "--make-data", "30", "--out", tmp_path, "--odometry-noise", "0", "0", "0",
            "--prior-noise", "0", "0", "0", "--range-noise", "0.5",
            "--train-samples", "200", "--posterior-samples", "300"]
    assert cli.main([str(a) for a in argv]) == 0
    ate = float((tmp_path / "ate.txt").read_text().split()[1])
    traj = (tmp_path / "trajectory.txt").read_text().splitlines()
    est = np.array([[float(v) for v in row.split()[2:]] for row in traj])
    truth = {t: p for t, *p in gt}
    ref = np.array([truth[float(row.split()[0])] for row in traj])
    exact = M.ate(est, ref)
    updates = len((tmp_path / "timing.log").read_text().splitlines())
    elapsed = time.perf_counter() - t0
    criterion("7 plaza pipeline", f"compose_err={worst:.1e} ATE={exact:.1e} updates={updates} time={elapsed:.0f}s")
    assert worst <= 1e-12
    assert ate == 0.0 and exact <= 1e-9
    assert updates == 3  # 300 admitted steps, one update per 100
    assert elapsed < 300


def test_cli_determinism(criterion, tmp_path):
    criterion("8 determinism")
    write_graph(ds.small_range_graph(), tmp_path / "g.graph")
    small = ["--train-samples", "150", "--posterior-samples", "200", "--seed", "5"]
    commands = {
        "synthetic": ["synthetic", "--skip-oracle"],
        "plaza": ["plaza", "--make-data", "6", "--update-interval", "20"],
        "oracle-compare": ["oracle-compare", tmp_path / "g.graph", "--oracle-particles", "2000"],
        "solve": ["solve", tmp_path / "g.graph"],
    }
    differing = []
    for name, argv in commands.items():
        dirs = [tmp_path / f"{name}-{k}" for k in range(2)]
        for d in dirs:
            assert cli.main([str(a) for a in argv + small + ["--out", d]]) == 0
        cmp = filecmp.dircmp(dirs[0], dirs[1], ignore=["timing.log"])
        _, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], cmp.common_files, shallow=False)
        if mismatch or errors or cmp.left_only or cmp.right_only:
            differing.append(f"{name}:{mismatch + errors}")
    criterion("8 determinism", "all identical" if not differing else " ".join(differing))
    assert not differing
