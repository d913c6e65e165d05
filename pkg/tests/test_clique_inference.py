import itertools

import numpy as np
import pytest
from scipy import stats

from flowslam import factor_graph as fg
from flowslam import geometry as geo
from flowslam import metrics as M
from flowslam.bayes_tree import Clique
from flowslam.clique_inference import (ConditionalSampler, RelaxationError, SamplingError,
                                       clique_training_sampler, conditional_sampler_trainer,
                                       select_relaxed_factors)
from flowslam.datasets import small_range_graph
from flowslam.samples import SampleBlock
from flowslam.spline_flow import FlowConfig

COV3 = np.diag([0.01, 0.01, 0.001])


def leaf_clique():
    """X0, L1 eliminated below X1 in the small range graph."""
    g = small_range_graph()
    f = {x.name: x for x in g.factors}
    return Clique(["L1", "X0"], ["X1"], [f["f1"], f["f2"], f["f3"], f["f4"]]), f


def test_relaxing_the_second_range_leaves_one_tree():
    clique, f = leaf_clique()
    rel = select_relaxed_factors(clique)
    assert rel.names == ["f4"]
    assert [x.name for x in rel.sampling_order] == ["f2", "f3"]
    assert rel.obs_dims == 1 and rel.layout == [("O.f4", 1)]
    np.testing.assert_array_equal(rel.observed_values, [3.9])


def test_acyclic_clique_relaxes_nothing():
    g = small_range_graph()
    f = {x.name: x for x in g.factors}
    rel = select_relaxed_factors([f["f1"], f["f2"], f["f5"], f["f6"]])
    assert rel.relaxed_factors == [] and rel.observed_values.size == 0


def test_three_cycle_relaxes_exactly_one():
    prior = fg.PriorPose("p", "A", [0, 0, 0], COV3)
    loop = [fg.Odometry("a", "A", "B", [1, 0, 0], COV3), fg.Odometry("b", "B", "C", [1, 0, 0], COV3),
            fg.Odometry("c", "C", "A", [1, 0, 0], COV3)]
    rel = select_relaxed_factors([prior] + loop)
    # enumerate removals: every single removal leaves a tree, no empty removal does
    valid = [r for k in range(4) for r in itertools.combinations(loop, k)
             if k and len(loop) - k == 2]
    assert len(rel.relaxed_factors) == 1 and tuple(rel.relaxed_factors) in valid
    assert rel.names == ["c"]  # the most recent factor on the loop


def test_two_prior_factors_on_a_variable():
    p1 = fg.PriorPose("p1", "A", [0, 0, 0], COV3)
    p2 = fg.PriorPose("p2", "A", [1, 0, 0], COV3)
    with pytest.raises(RelaxationError, match="two prior"):
        select_relaxed_factors([p1, p2])


def test_variable_without_prior_tree():
    o = fg.Odometry("a", "A", "B", [1, 0, 0], COV3)
    with pytest.raises(RelaxationError):
        select_relaxed_factors([o])


def test_range_cannot_root_a_pose():
    # L has the prior, the pose hangs off a range factor only
    pl = fg.PriorPoint("p", "L", [0, 0], np.eye(2))
    r = fg.Range("r", "X", "L", 1.0, 0.1)
    with pytest.raises(RelaxationError):
        select_relaxed_factors([pl, r])


def test_single_prior_clique_samples_are_prior_draws():
    p = fg.PriorPose("p", "X", [1, 2, 0.3], COV3)
    c = Clique(["X"], [], [p])
    rel = select_relaxed_factors(c)
    got = clique_training_sampler(c, rel, 200, 7)
    np.testing.assert_array_equal(got.values, p.sample_prior(200, np.random.default_rng(7)).values)
    assert got.layout == [("X", 3)]


def _simulate_leaf(n, rng):
    """Independent re-simulation of the leaf generative chain."""
    x0 = geo.exp_map(rng.multivariate_normal(np.zeros(3), np.diag([0.01, 0.01, 0.001]), n))
    x1 = geo.compose(x0, geo.exp_map([5, 0, np.pi / 3] + rng.multivariate_normal(
        np.zeros(3), np.diag([0.01, 0.01, 0.0025]), n)))
    # radius density r N(r; 3.9, 0.2) by inverse transform on a fine grid
    grid = np.linspace(1e-9, 3.9 + 8 * 0.2, 20_000)
    cdf = np.cumsum(grid * stats.norm(3.9, 0.2).pdf(grid))
    radius = np.interp(rng.random(n), cdf / cdf[-1], grid)
    bearing = rng.uniform(-np.pi, np.pi, n)
    l1 = x0[:, :2] + radius[:, None] * np.c_[np.cos(bearing), np.sin(bearing)]
    o = np.hypot(*(l1 - x1[:, :2]).T) + 0.2 * rng.normal(size=n)
    return o, x1, l1, x0


def test_leaf_training_samples_match_resimulation():
    clique, _ = leaf_clique()
    rel = select_relaxed_factors(clique)
    block = clique_training_sampler(clique, rel, 4000, 1)
    assert block.names == ["O.f4", "X1", "L1", "X0"]
    assert list(block.circular) == [False, False, False, True, False, False, False, False, True]
    o, x1, l1, x0 = _simulate_leaf(4000, np.random.default_rng(2))
    assert stats.ks_2samp(block["O.f4"][:, 0], o).pvalue > 1e-3
    ref = SampleBlock(np.c_[o, x1, l1, x0], block.layout, block.circular)
    thr = M.permutation_threshold(block, ref, permutations=100, rng=0)
    assert M.mmd(block, ref) < thr


def test_training_rows_are_exchangeable():
    clique, _ = leaf_clique()
    block = clique_training_sampler(clique, select_relaxed_factors(clique), 2000, 3)
    a = SampleBlock(block.values[:1000], block.layout, block.circular)
    b = SampleBlock(block.values[1000:], block.layout, block.circular)
    assert M.mmd(a, b) < M.permutation_threshold(a, b, permutations=100, quantile=0.999, rng=0)


def test_invalid_relaxed_set_stalls():
    clique, f = leaf_clique()
    rel = select_relaxed_factors(clique)
    rel.relaxed_factors = []
    with pytest.raises(SamplingError):
        clique_training_sampler(clique, rel, 10, 0)


def test_root_prior_clique_reproduces_prior():
    p = fg.PriorPoint("p", "L", [1.0, -1.0], np.array([[0.4, 0.1], [0.1, 0.2]]))
    c = Clique(["L"], [], [p])
    rel = select_relaxed_factors(c)
    samples = clique_training_sampler(c, rel, 2000, 0)
    sampler, marginal = conditional_sampler_trainer(samples, rel.observed_values, FlowConfig(), 1)
    assert marginal is None
    got = sampler.sample_frontal(np.zeros((1500, 0)), 2, n=1500)
    ref = p.sample_prior(1500, np.random.default_rng(3))
    assert M.mmd(got, ref) < M.permutation_threshold(got, ref, permutations=100, rng=0)


def test_range_clique_conditional_ring():
    px = fg.PriorPose("p", "X", [0, 0, 0], np.diag([0.25, 0.25, 0.01]))
    r = fg.Range("r", "X", "L", 4.0, 0.2)
    c = Clique(["L"], ["X"], [px, r])
    rel = select_relaxed_factors(c)
    samples = clique_training_sampler(c, rel, 3000, 0)
    sampler, marginal = conditional_sampler_trainer(samples, rel.observed_values, FlowConfig(num_bins=8), 1,
                                                    sep_width=3)
    assert marginal.variables == ("X",)
    pose = np.array([0.3, -0.2, 0.1])
    l = sampler.sample_frontal(np.tile(pose, (2000, 1)), 4)["L"]
    radius = np.hypot(*(l - pose[:2]).T)
    assert abs(radius.mean() - 4.0) < 2 * 0.2
    # the ring is populated all the way round
    bearing = np.arctan2(l[:, 1] - pose[1], l[:, 0] - pose[0])
    assert np.histogram(bearing, bins=8, range=(-np.pi, np.pi))[0].min() > 100


def _gaussian_case(n, rng):
    # O = S1 + F1 + noise; columns (O, S, F) with S, F points
    cov = np.array([[1.0, 0.3, 0.5, 0.1], [0.3, 0.8, 0.2, 0.0], [0.5, 0.2, 1.2, 0.4], [0.1, 0.0, 0.4, 0.6]])
    sf = rng.multivariate_normal([1.0, -1.0, 0.5, 2.0], cov, n)
    o = sf[:, 0] + sf[:, 2] + 0.3 * rng.normal(size=n)
    x = np.c_[o, sf]
    full_cov = np.zeros((5, 5))
    a = np.array([[1, 0, 1, 0]])
    full_cov[0, 0] = (a @ cov @ a.T)[0, 0] + 0.09
    full_cov[0, 1:] = full_cov[1:, 0] = (a @ cov)[0]
    full_cov[1:, 1:] = cov
    mean = np.r_[1.0 + 0.5, [1.0, -1.0, 0.5, 2.0]]
    return SampleBlock(x, [("O.z", 1), ("S", 2), ("F", 2)]), mean, full_cov


def _condition(mean, cov, idx_given, value):
    rest = [i for i in range(len(mean)) if i not in idx_given]
    k = cov[np.ix_(rest, idx_given)] @ np.linalg.inv(cov[np.ix_(idx_given, idx_given)])
    m = mean[rest] + k @ (value - mean[idx_given])
    c = cov[np.ix_(rest, rest)] - k @ cov[np.ix_(idx_given, rest)]
    return m, c


def test_affine_conditioning_matches_closed_form():
    rng = np.random.default_rng(0)
    block, mean, cov = _gaussian_case(5000, rng)
    o = np.array([2.5])
    sampler, marginal = conditional_sampler_trainer(block, o, FlowConfig(affine_only=True), 1, sep_width=2)
    # separator given O = o
    m_s, c_s = _condition(mean, cov, [0], o)
    s = sampler.sample_separator(5000, 2).values
    sd = np.sqrt(np.diag(c_s))[:2]
    assert np.all(np.abs(s.mean(0) - m_s[:2]) < 0.05 * sd + 4 * sd / np.sqrt(5000))
    assert np.all(np.abs(s.var(0) / np.diag(c_s)[:2] - 1) < 0.1)
    # frontal given O = o and a fixed separator
    sep = np.array([1.2, -0.7])
    m_f, c_f = _condition(mean, cov, [0, 1, 2], np.r_[o, sep])
    f = sampler.sample_frontal(np.tile(sep, (5000, 1)), 3).values
    sd = np.sqrt(np.diag(c_f))
    assert np.all(np.abs(f.mean(0) - m_f) < 0.05 * sd + 4 * sd / np.sqrt(5000))
    assert np.all(np.abs(f.var(0) / np.diag(c_f) - 1) < 0.1)
    # conditional density agrees with the closed form up to estimation error
    lp = sampler.frontal_log_prob(np.tile(sep, (3, 1)), np.tile(m_f, (3, 1)))
    ref = stats.multivariate_normal(m_f, c_f).logpdf(m_f)
    assert lp[0] == pytest.approx(ref, abs=0.15)


def test_separator_marginal_consistency():
    clique, _ = leaf_clique()
    rel = select_relaxed_factors(clique)
    samples = clique_training_sampler(clique, rel, 1500, 0)
    sampler, marginal = conditional_sampler_trainer(samples, rel.observed_values,
                                                    FlowConfig(epochs=60), 1, sep_width=3)
    a = marginal.sample_prior(1000, np.random.default_rng(5))
    s = sampler.sample_separator(1000, 6)
    sampler.sample_frontal(s.values, 7)  # joint draw: S first, then F
    assert a.names == s.names == ["X1"]
    assert M.mmd(a, s) < M.permutation_threshold(a, s, permutations=100, quantile=0.999, rng=0)


def test_sampler_argument_checks():
    block = SampleBlock(np.random.default_rng(0).normal(size=(50, 3)), [("O.a", 1), ("S", 2)])
    with pytest.raises(ValueError):
        conditional_sampler_trainer(block, [1.0, 2.0], obs_dims=1)
    with pytest.raises(ValueError):
        conditional_sampler_trainer(block, [1.0], sep_width=5)
    sampler, _ = conditional_sampler_trainer(block, [1.0], FlowConfig(epochs=2), 0, sep_width=0)
    with pytest.raises(ValueError):
        sampler.sample_frontal(np.zeros(0), 0)
    with pytest.raises(ValueError):
        ConditionalSampler(sampler.flow, [1.0, 2.0], block.layout, block.circular, 1, 0)
