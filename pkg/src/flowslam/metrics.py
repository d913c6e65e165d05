"""Sample-set distances, trajectory error, mode counting and a reference posterior sampler."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import geometry as geo
from .clique_inference import select_relaxed_factors
from .factor_graph import FactorGraph, Odometry, PriorPose
from .samples import SampleBlock

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# MMD


@dataclass
class MmdConfig:
    bandwidth: float | None = None  # None: median heuristic
    median_points: int = 2000

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def _features(block) -> np.ndarray:
    """Angular columns become (cos, sin) pairs so the kernel stays positive definite."""
    if isinstance(block, SampleBlock):
        x, circ = block.values, block.circular
    else:
        x = np.atleast_2d(np.asarray(block, dtype=float))
        circ = np.zeros(x.shape[1], bool)
    if not circ.any():
        return x
    return np.hstack([x[:, ~circ], np.cos(x[:, circ]), np.sin(x[:, circ])])


def _sqdist(a, b):
    d = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(z: np.ndarray, max_points: int = 2000) -> float:
    if len(z) > max_points:
        z = z[np.linspace(0, len(z) - 1, max_points).astype(int)]
    d = _sqdist(z, z)[np.triu_indices(len(z), 1)]
    med = math.sqrt(float(np.median(d))) if d.size else 1.0
    return med if med > 0 else 1.0


def _prepare(a, b):
    fa, fb = _features(a), _features(b)
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        raise ValueError("mmd needs non-empty sample sets")
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"dimension mismatch: {fa.shape[1]} vs {fb.shape[1]}")
    return fa, fb


def mmd(a, b, cfg: MmdConfig | None = None) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel."""
    cfg = cfg or MmdConfig()
    fa, fb = _prepare(a, b)
    h = cfg.bandwidth or median_bandwidth(np.vstack([fa, fb]), cfg.median_points)
    g = -0.5 / h ** 2
    kaa = np.exp(g * _sqdist(fa, fa)).mean()
    kbb = np.exp(g * _sqdist(fb, fb)).mean()
    kab = np.exp(g * _sqdist(fa, fb)).mean()
    return max(float(kaa + kbb - 2.0 * kab), 0.0)


def permutation_threshold(a, b, cfg: MmdConfig | None = None, permutations: int = 200,
                          quantile: float = 0.99, rng=None, chunk: int = 1024) -> float:
    """Quantile of squared MMD under random relabelling of the pooled set."""
    cfg = cfg or MmdConfig()
    rng = np.random.default_rng(rng)
    fa, fb = _prepare(a, b)
    z = np.vstack([fa, fb])
    n, m = len(fa), len(fb)
    h = cfg.bandwidth or median_bandwidth(z, cfg.median_points)
    g = -0.5 / h ** 2
    weights = np.empty((n + m, permutations))
    base = np.r_[np.full(n, 1.0 / n), np.full(m, -1.0 / m)]
    for j in range(permutations):
        weights[:, j] = base[rng.permutation(n + m)]
    acc = np.zeros(permutations)
    for s in range(0, n + m, chunk):
        k = np.exp(g * _sqdist(z[s:s + chunk], z))
        acc += np.sum(weights[s:s + chunk] * (k @ weights), axis=0)
    return float(np.quantile(np.maximum(acc, 0.0), quantile))


def mmd_line(name_a: str, name_b: str, value: float) -> str:
    return f"MMD {name_a} {name_b} {value:.6e}"


# --------------------------------------------------------------------------
# ATE


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimising ``sum |dst - (s R src + t)|^2``."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(src.shape[1])
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1, -1] = -1.0
    rot = u @ sign @ vt
    var = np.mean(np.sum(xs * xs, 1))
    scale = float(np.trace(np.diag(d) @ sign) / var) if with_scale and var > 0 else 1.0
    return scale, rot, mu_d - scale * rot @ mu_s


def ate(estimate, truth, with_scale: bool = True) -> float:
    """RMS position error after similarity alignment of the estimate onto the truth."""
    est = np.asarray(estimate, dtype=float)[:, :2]
    gt = np.asarray(truth, dtype=float)[:, :2]
    if est.shape != gt.shape:
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 3:
        raise ValueError("need at least 3 poses to align")
    s, rot, t = umeyama(est, gt, with_scale)
    err = gt - (s * est @ rot.T + t)
    return float(math.sqrt(np.mean(np.sum(err * err, 1))))


def ate_line(value: float) -> str:
    return f"ATE {value:.6f}"


# --------------------------------------------------------------------------
# mode counting


def mode_count(samples, bandwidth: float = 0.5, prominence: float = 0.2, cells_per_bandwidth: int = 4,
               max_cells: int = 400) -> int:
    """Peaks of a 2-D Gaussian KDE whose topographic prominence is at least ``prominence`` x max."""
    x = samples.values if isinstance(samples, SampleBlock) else np.asarray(samples, dtype=float)
    x = np.atleast_2d(x)
    if x.shape[1] != 2:
        raise ValueError("mode_count expects 2 columns")
    lo = x.min(0) - 3 * bandwidth
    hi = x.max(0) + 3 * bandwidth
    cell = max(bandwidth / cells_per_bandwidth, float(np.max(hi - lo)) / max_cells)
    bins = np.maximum(np.ceil((hi - lo) / cell).astype(int), 1)
    hist, _, _ = np.histogram2d(x[:, 0], x[:, 1], bins=bins, range=[[lo[0], lo[0] + bins[0] * cell],
                                                                      [lo[1], lo[1] + bins[1] * cell]])
    dens = gaussian_filter(hist, bandwidth / cell, mode="constant", truncate=4.0)
    return len(_prominent_peaks(dens, prominence * dens.max()))


def _prominent_peaks(grid: np.ndarray, min_prominence: float) -> list[tuple[int, int]]:
    """Peaks by a flooding sweep with union-find; a merged peak's prominence is peak minus saddle."""
    shape = grid.shape
    order = np.argsort(-grid, axis=None, kind="stable")
    parent = np.full(grid.size, -1)
    peak_of = {}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    flat = grid.ravel()
    prom = {}
    for idx in order:
        if flat[idx] <= 0:
            break
        r, c = divmod(int(idx), shape[1])
        roots = set()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if (dr or dc) and 0 <= rr < shape[0] and 0 <= cc < shape[1]:
                    j = rr * shape[1] + cc
                    if parent[j] >= 0:
                        roots.add(find(j))
        parent[idx] = idx
        if not roots:
            peak_of[idx] = idx
            continue
        roots = sorted(roots, key=lambda k: -flat[peak_of[k]])
        keep = roots[0]
        for other in roots[1:]:
            p = peak_of[other]
            prom[p] = flat[p] - flat[idx]
            parent[other] = keep
        parent[idx] = keep
    for k in {find(i) for i in peak_of}:
        prom[peak_of[k]] = flat[peak_of[k]]
    return [divmod(int(p), shape[1]) for p, v in prom.items() if v >= min_prominence]


# --------------------------------------------------------------------------
# reference posterior


class OracleError(RuntimeError):
    """The reference sampler's effective sample size collapsed."""


@dataclass
class OracleReport:
    ess: list[float] = field(default_factory=list)
    temperatures: list[float] = field(default_factory=list)
    acceptance: list[float] = field(default_factory=list)


class _Chain:
    """Ancestral proposal over a whole graph and the matching importance weight."""

    def __init__(self, graph: FactorGraph):
        self.graph = graph
        self.vars = list(graph.variables)
        self.relaxed = select_relaxed_factors(graph.factors, self.vars)
        rel = {id(f) for f in self.relaxed.relaxed_factors}
        self.kept = [f for f in graph.factors if id(f) not in rel]
        # factors whose generative draw goes through exp: the weight picks up |J_exp|
        self.tangent = [f for f in self.kept if isinstance(f, (Odometry, PriorPose))]
        self.dims = [graph.variables[v].dims for v in self.vars]
        self.circular = graph.circular(self.vars)

    def draw(self, n, rng) -> dict:
        values = {}
        for f in self.graph.factors:
            if f.is_prior:
                values.update(f.sample_prior(n, rng).as_dict())
        for f in self.relaxed.sampling_order:
            var, x = f.sample_forward(values, rng)
            values[var] = x
        return values

    def log_weight(self, values) -> np.ndarray:
        lw = sum(f.log_density(values) for f in self.relaxed.relaxed_factors) if self.relaxed.relaxed_factors \
            else 0.0
        for f in self.tangent:
            if isinstance(f, PriorPose):
                tau = geo.log_map(geo.between(f.mean, values[f.variables[0]]))
            else:
                tau = geo.log_map(geo.between(values[f.variables[0]], values[f.variables[1]]))
            lw = lw + np.log(geo.exp_jacobian_det(tau))
        n = len(next(iter(values.values())))
        return np.broadcast_to(lw, (n,)).astype(float)

    def pack(self, values) -> np.ndarray:
        return np.hstack([np.asarray(values[v]).reshape(-1, d) for v, d in zip(self.vars, self.dims)])

    def unpack(self, x) -> dict:
        out, c = {}, 0
        for v, d in zip(self.vars, self.dims):
            out[v] = x[:, c:c + d]
            c += d
        return out


def _ess(logw):
    w = np.exp(logw - logw.max())
    return float(w.sum() ** 2 / np.sum(w * w))


def _systematic(logw, rng):
    w = np.exp(logw - logw.max())
    w /= w.sum()
    n = len(w)
    pos = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(np.cumsum(w), pos), n - 1)


def oracle_posterior(graph: FactorGraph, n: int, rng=None, particles: int | None = None, mh_steps: int = 40,
                     max_dim: int = 15, min_ess: float = 50.0, report: OracleReport | None = None) -> SampleBlock:
    """Reference posterior draws by tempered sequential importance sampling.

    Particles start from ancestral draws of the graph (the same chain used
    for clique training, with loops broken by relaxed factors) and are moved
    to the posterior by raising the importance weight from power 0 to 1.
    Each stage resamples and rejuvenates with random-walk Metropolis moves
    on the tempered target ``q w^beta``.
    """
    rng = np.random.default_rng(rng)
    dim = graph.dims()
    if dim > max_dim:
        raise ValueError(f"oracle limited to {max_dim} dimensions, graph has {dim}")
    report = report if report is not None else OracleReport()
    chain = _Chain(graph)
    m = particles or max(4 * n, 4000)
    values = chain.draw(m, rng)
    x = chain.pack(values)
    lw_full = chain.log_weight(values)
    lp = graph.log_density(values)
    beta = 0.0
    scale = None
    logw = np.zeros(m)
    while beta < 1.0:
        # next temperature keeps half the particles effective
        lo, hi = beta, 1.0
        if _ess(logw + (hi - beta) * lw_full) < 0.5 * m:
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if _ess(logw + (mid - beta) * lw_full) < 0.5 * m:
                    hi = mid
                else:
                    lo = mid
            nxt = max(lo, beta + 1e-6)
        else:
            nxt = 1.0
        nxt = min(nxt, 1.0)
        logw = logw + (nxt - beta) * lw_full
        beta = nxt
        ess = _ess(logw)
        report.ess.append(ess)
        report.temperatures.append(beta)
        if ess < min_ess:
            raise OracleError(f"effective sample size {ess:.1f} < {min_ess}; increase the particle count")
        idx = _systematic(logw, rng)
        x, lw_full, lp = x[idx], lw_full[idx], lp[idx]
        logw = np.zeros(m)
        x, lw_full, lp, acc, scale = _rejuvenate(chain, x, lw_full, lp, beta, mh_steps, rng, scale)
        report.acceptance.append(acc)
    order = rng.permutation(m)[:n] if n <= m else rng.integers(0, m, n)
    layout = [(v, d) for v, d in zip(chain.vars, chain.dims)]
    return SampleBlock(x[order], layout, chain.circular)


def _rejuvenate(chain, x, lw, lp, beta, steps, rng, scale=None):
    """Random-walk Metropolis on ``p(x) w(x)^(beta-1)``.

    Steps use the particle covariance; the scale adapts towards a 30%
    acceptance rate between sweeps.
    """
    circ = chain.circular
    d = x.shape[1]
    accepted = 0
    scale = 2.38 / math.sqrt(d) if scale is None else scale
    for _ in range(steps):
        xc = x.copy()
        if circ.any():
            ang = xc[:, circ]
            mean = np.arctan2(np.sin(ang).mean(0), np.cos(ang).mean(0))
            xc[:, circ] = geo.wrap_angle(ang - mean)
        chol = np.linalg.cholesky(np.cov(xc.T) + 1e-12 * np.eye(d))
        prop = x + scale * rng.standard_normal(x.shape) @ chol.T
        prop[:, circ] = geo.wrap_angle(prop[:, circ])
        vals = chain.unpack(prop)
        lp_new = chain.graph.log_density(vals)
        lw_new = chain.log_weight(vals)
        log_ratio = (lp_new + (beta - 1.0) * lw_new) - (lp + (beta - 1.0) * lw)
        ok = np.log(rng.random(len(x))) < log_ratio
        x[ok], lp[ok], lw[ok] = prop[ok], lp_new[ok], lw_new[ok]
        rate = ok.mean()
        accepted += int(ok.sum())
        scale *= math.exp(rate - 0.3)
    return x, lw, lp, accepted / (steps * len(x)), scale


def grid_posterior(graph: FactorGraph, n: int, rng, bounds, resolution: int = 64) -> SampleBlock:
    """Draws from the posterior evaluated on a dense grid (at most 4 dimensions).

    ``bounds`` is a ``(dim, 2)`` array of box limits in the graph's column
    order; each draw picks a cell with probability proportional to its
    density and is placed uniformly inside it.
    """
    rng = np.random.default_rng(rng)
    vars_ = list(graph.variables)
    dims = [graph.variables[v].dims for v in vars_]
    dim = sum(dims)
    if dim > 4:
        raise ValueError("grid sampler supports at most 4 dimensions")
    bounds = np.asarray(bounds, dtype=float).reshape(dim, 2)
    edges = [np.linspace(lo, hi, resolution + 1) for lo, hi in bounds]
    centers = [0.5 * (e[1:] + e[:-1]) for e in edges]
    mesh = np.stack(np.meshgrid(*centers, indexing="ij"), -1).reshape(-1, dim)
    values, c = {}, 0
    for v, d in zip(vars_, dims):
        values[v] = mesh[:, c:c + d]
        c += d
    lp = graph.log_density(values)
    p = np.exp(lp - lp.max())
    p /= p.sum()
    cells = rng.choice(len(mesh), size=n, p=p)
    width = (bounds[:, 1] - bounds[:, 0]) / resolution
    x = mesh[cells] + (rng.random((n, dim)) - 0.5) * width
    circ = graph.circular(vars_)
    x[:, circ] = geo.wrap_angle(x[:, circ])
    return SampleBlock(x, list(zip(vars_, dims)), circ)
