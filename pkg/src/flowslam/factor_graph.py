"""Variables, factors and the factor-graph text format.

Values handed to factors are dictionaries ``{variable id: array}`` where each
array is ``(dims,)`` or ``(n, dims)``; sampling methods always return
``(n, dims)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import geometry as geo
from .samples import SampleBlock

POSE = "pose"
POINT = "point"

_DIMS = {POSE: 3, POINT: 2}
_CIRCULAR = {POSE: (False, False, True), POINT: (False, False)}

LOG_2PI = math.log(2.0 * math.pi)


class DeferSampling(Exception):
    """Raised when a factor cannot sample yet; the caller should retry later."""


@dataclass(frozen=True)
class VariableSpec:
    id: str
    kind: str

    def __post_init__(self):
        if self.kind not in _DIMS:
            raise ValueError(f"unknown variable kind {self.kind!r}")

    @property
    def dims(self) -> int:
        return _DIMS[self.kind]

    @property
    def circular_mask(self) -> tuple[bool, ...]:
        return _CIRCULAR[self.kind]


def _as_rows(v, dims):
    return np.asarray(v, dtype=float).reshape(-1, dims)


def _gaussian_logpdf(r, cov):
    """Row-wise log N(r; 0, cov) for residuals ``r`` of shape (n, d)."""
    d = cov.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("singular noise model has no density") from None
    sol = np.linalg.solve(chol, r.T).T
    return -0.5 * np.sum(sol * sol, axis=1) - np.sum(np.log(np.diag(chol))) - 0.5 * d * LOG_2PI


def _check_cov(cov, d, allow_zero=True):
    cov = np.asarray(cov, dtype=float).reshape(d, d)
    if not np.allclose(cov, cov.T):
        raise ValueError("noise covariance must be symmetric")
    eig = np.linalg.eigvalsh(cov)
    if eig.min() < 0 or (not allow_zero and eig.min() <= 0):
        raise ValueError("noise covariance must be positive (semi)definite")
    return cov


def _noise(cov, n, rng):
    d = cov.shape[0]
    if not np.any(cov):
        return np.zeros((n, d))
    return rng.multivariate_normal(np.zeros(d), cov, size=n, method="eigh")


class Factor:
    """Base class for measurement and prior factors."""

    kind = "factor"
    is_prior = False
    obs_dims = 0
    obs_circular: tuple[bool, ...] = ()

    def __init__(self, name: str, variables: Iterable[str]):
        self.name = name
        self.variables = tuple(variables)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, {self.variables})"

    @property
    def arity(self) -> int:
        return len(self.variables)

    def _require(self, values, names=None):
        names = self.variables if names is None else names
        missing = [v for v in names if v not in values]
        if missing:
            raise KeyError(f"{self.name}: no value for {missing}")

    def log_density(self, values: dict) -> np.ndarray:
        raise NotImplementedError

    def can_sample(self, target: str, given: Iterable[str]) -> bool:
        return False

    def sample_forward(self, given: dict, rng) -> tuple[str, np.ndarray]:
        missing = [v for v in self.variables if v not in given]
        if len(missing) != 1:
            raise DeferSampling(f"{self.name}: {len(missing)} unsampled variables")
        raise DeferSampling(f"{self.name}: cannot sample {missing[0]}")

    def sample_observation(self, values: dict, rng) -> np.ndarray:
        raise TypeError(f"{self.kind} factor {self.name} has no observation model")

    @property
    def observed_vector(self) -> np.ndarray:
        raise TypeError(f"{self.kind} factor {self.name} has no observation")

    def sample_prior(self, n: int, rng) -> SampleBlock:
        raise TypeError(f"{self.kind} factor {self.name} cannot be sampled without inputs")


class PriorPose(Factor):
    kind = "prior-pose"
    is_prior = True

    def __init__(self, name, var, mean, cov):
        super().__init__(name, [var])
        self.mean = geo.Pose2(*mean).array()
        self.cov = _check_cov(cov, 3)

    def log_density(self, values):
        self._require(values)
        x = _as_rows(values[self.variables[0]], 3)
        r = geo.log_map(geo.between(self.mean, x))
        return _gaussian_logpdf(r, self.cov)

    def sample_prior(self, n, rng):
        if n <= 0:
            raise ValueError("n must be positive")
        x = geo.compose(self.mean, geo.exp_map(_noise(self.cov, n, rng)))
        return SampleBlock(x, [(self.variables[0], 3)], [False, False, True])


class PriorPoint(Factor):
    kind = "prior-point"
    is_prior = True

    def __init__(self, name, var, mean, cov):
        super().__init__(name, [var])
        self.mean = np.asarray(mean, dtype=float).reshape(2)
        self.cov = _check_cov(cov, 2)

    def log_density(self, values):
        self._require(values)
        x = _as_rows(values[self.variables[0]], 2)
        return _gaussian_logpdf(x - self.mean, self.cov)

    def sample_prior(self, n, rng):
        if n <= 0:
            raise ValueError("n must be positive")
        x = self.mean + _noise(self.cov, n, rng)
        return SampleBlock(x, [(self.variables[0], 2)])


class Odometry(Factor):
    """Relative pose measurement with Gaussian noise in the tangent space."""

    kind = "odometry"
    obs_dims = 3
    obs_circular = (False, False, True)

    def __init__(self, name, var_i, var_j, observed, cov):
        super().__init__(name, [var_i, var_j])
        self.observed = np.asarray(observed, dtype=float).reshape(3)
        self.cov = _check_cov(cov, 3)

    @property
    def observed_vector(self):
        return self.observed.copy()

    def residual(self, values):
        self._require(values)
        xi = _as_rows(values[self.variables[0]], 3)
        xj = _as_rows(values[self.variables[1]], 3)
        r = geo.log_map(geo.between(xi, xj)) - self.observed
        r[:, 2] = geo.wrap_angle(r[:, 2])
        return r

    def log_density(self, values):
        return _gaussian_logpdf(self.residual(values), self.cov)

    def can_sample(self, target, given):
        return target in self.variables

    def sample_forward(self, given, rng):
        missing = [v for v in self.variables if v not in given]
        if len(missing) != 1:
            raise DeferSampling(f"{self.name}: {len(missing)} unsampled variables")
        known = [v for v in self.variables if v in given][0]
        base = _as_rows(given[known], 3)
        n = len(base)
        step = geo.exp_map(self.observed + _noise(self.cov, n, rng))
        if missing[0] == self.variables[1]:
            return missing[0], geo.compose(base, step)
        return missing[0], geo.compose(base, geo.inverse(step))

    def sample_observation(self, values, rng):
        self._require(values)
        xi = _as_rows(values[self.variables[0]], 3)
        xj = _as_rows(values[self.variables[1]], 3)
        z = geo.log_map(geo.between(xi, xj)) + _noise(self.cov, len(xi), rng)
        z[:, 2] = geo.wrap_angle(z[:, 2])
        return z


class Range(Factor):
    """Distance between a pose's position and a landmark."""

    kind = "range"
    obs_dims = 1
    obs_circular = (False,)

    def __init__(self, name, pose, landmark, observed, sigma):
        super().__init__(name, [pose, landmark])
        self.observed = float(observed)
        if not sigma >= 0:
            raise ValueError("range sigma must be non-negative")
        self.sigma = float(sigma)

    @property
    def observed_vector(self):
        return np.array([self.observed])

    def log_density(self, values):
        self._require(values)
        p = _as_rows(values[self.variables[0]], 3)
        l = _as_rows(values[self.variables[1]], 2)
        r = geo.range_to(p, l) - self.observed
        if self.sigma == 0.0:
            raise ValueError("noiseless range model has no density")
        return -0.5 * (r / self.sigma) ** 2 - math.log(self.sigma) - 0.5 * LOG_2PI

    def can_sample(self, target, given):
        # only landmark-given-pose; the reverse direction is left to the ordering
        return target == self.variables[1]

    def sample_radius(self, n, rng):
        """Radii with density proportional to ``r N(r; z, sigma^2)`` on r > 0.

        That radial law makes the landmark's planar density proportional to
        the range likelihood itself.
        """
        z, s = self.observed, self.sigma
        if s == 0.0:
            return np.full(n, z)
        cap = max(z, 0.0) + 8.0 * s
        out = np.empty(n)
        filled = 0
        while filled < n:
            m = 2 * (n - filled) + 16
            r = z + s * rng.standard_normal(m)
            r = r[(r > 0) & (r <= cap)]
            r = r[rng.random(len(r)) * cap < r]
            take = min(len(r), n - filled)
            out[filled:filled + take] = r[:take]
            filled += take
        return out

    def sample_forward(self, given, rng):
        pose, lmk = self.variables
        if pose in given and lmk in given:
            raise DeferSampling(f"{self.name}: nothing to sample")
        if pose not in given:
            raise DeferSampling(f"{self.name}: pose-given-landmark sampling is not supported")
        p = _as_rows(given[pose], 3)
        n = len(p)
        r = self.sample_radius(n, rng)
        bearing = rng.uniform(0.0, 2.0 * np.pi, n)
        return lmk, p[:, :2] + r[:, None] * np.stack([np.cos(bearing), np.sin(bearing)], axis=1)

    def sample_observation(self, values, rng):
        self._require(values)
        p = _as_rows(values[self.variables[0]], 3)
        l = _as_rows(values[self.variables[1]], 2)
        z = geo.range_to(p, l)
        return (z + self.sigma * rng.standard_normal(len(z)))[:, None]


class SeparatorMarginalFactor(Factor):
    """Learned separator marginal handed from a clique to its parent.

    Holds a flow over ``(observations, separator, frontal)`` columns; the
    observation prefix is pinned to its recorded values and only the
    separator rows are used.
    """

    kind = "separator-marginal"
    is_prior = True

    def __init__(self, name, variables, flow, obs_values, layout, circular):
        super().__init__(name, variables)
        self.flow = flow
        self.obs_values = np.asarray(obs_values, dtype=float).reshape(-1)
        self.layout = list(layout)
        self.circular = np.asarray(circular, dtype=bool)
        width = sum(w for _, w in self.layout)
        if self.obs_values.size + width > flow.dim:
            raise ValueError("flow dimension smaller than observation + separator columns")

    @property
    def width(self) -> int:
        return sum(w for _, w in self.layout)

    def sample_prior(self, n, rng):
        if n <= 0:
            raise ValueError("n must be positive")
        m = self.obs_values.size
        x = self.flow.conditional_sample(self.obs_values, rng, n=n, stop=m + self.width)
        return SampleBlock(x, self.layout, self.circular)

    def log_density(self, values):
        self._require(values)
        cols = [_as_rows(values[v], w) for v, w in self.layout]
        x = np.hstack(cols)
        return self.flow.conditional_log_prob(self.obs_values, x)


class PendingMarginal(Factor):
    """Structural placeholder for a separator marginal that is not trained yet."""

    kind = "separator-marginal"
    is_prior = True


@dataclass
class FactorGraph:
    variables: dict[str, VariableSpec] = field(default_factory=dict)
    factors: list[Factor] = field(default_factory=list)

    def add_variable(self, var_id: str, kind: str) -> VariableSpec:
        if var_id in self.variables:
            if self.variables[var_id].kind != kind:
                raise ValueError(f"variable {var_id} redeclared with a different kind")
            return self.variables[var_id]
        spec = VariableSpec(var_id, kind)
        self.variables[var_id] = spec
        return spec

    def add_factor(self, factor: Factor) -> Factor:
        missing = [v for v in factor.variables if v not in self.variables]
        if missing:
            raise KeyError(f"factor {factor.name} references undeclared variables {missing}")
        if any(f.name == factor.name for f in self.factors):
            raise ValueError(f"duplicate factor name {factor.name}")
        _check_kinds(factor, self.variables)
        self.factors.append(factor)
        return factor

    def next_factor_name(self) -> str:
        return f"f{len(self.factors) + 1}"

    def dims(self, var_ids=None) -> int:
        ids = self.variables if var_ids is None else var_ids
        return sum(self.variables[v].dims for v in ids)

    def circular(self, var_ids) -> np.ndarray:
        return np.concatenate([self.variables[v].circular_mask for v in var_ids]).astype(bool)

    def log_density(self, values: dict) -> np.ndarray:
        return sum(f.log_density(values) for f in self.factors)

    def copy(self) -> "FactorGraph":
        return FactorGraph(dict(self.variables), list(self.factors))


def _check_kinds(f: Factor, variables):
    kinds = [variables[v].kind for v in f.variables]
    expected = {
        "prior-pose": [POSE], "prior-point": [POINT],
        "odometry": [POSE, POSE], "range": [POSE, POINT],
    }.get(f.kind)
    if expected is not None and kinds != expected:
        raise ValueError(f"{f.kind} factor {f.name} expects {expected}, got {kinds}")


# --------------------------------------------------------------------------
# module-level operations


def log_density(f: Factor, assignment: dict) -> np.ndarray:
    return f.log_density(assignment)


def sample_forward(f: Factor, given: dict, rng) -> tuple[str, np.ndarray]:
    return f.sample_forward(given, rng)


def sample_observation(f: Factor, given: dict, rng) -> np.ndarray:
    return f.sample_observation(given, rng)


def sample_prior(f: Factor, n: int, rng) -> SampleBlock:
    return f.sample_prior(n, rng)


# --------------------------------------------------------------------------
# text format


def _upper_to_full(vals, d):
    m = np.zeros((d, d))
    m[np.triu_indices(d)] = vals
    return m + np.triu(m, 1).T


def _full_to_upper(m):
    return np.asarray(m)[np.triu_indices(m.shape[0])]


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def parse_graph(text: str) -> FactorGraph:
    """Parse the whitespace-delimited factor-graph format.

    Records: ``VAR id POSE|POINT``, ``PRIOR id mean... cov-upper...``,
    ``ODOM i j dx dy dtheta cov-upper(6)``, ``RANGE pose lmk observed sigma``.
    Factors are named ``f1, f2, ...`` in file order.
    """
    g = FactorGraph()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        rec = tok[0].upper()
        try:
            if rec == "VAR":
                _expect(tok, 3)
                g.add_variable(tok[1], {"POSE": POSE, "POINT": POINT}[tok[2].upper()])
                continue
            name = g.next_factor_name()
            if rec == "PRIOR":
                var = tok[1]
                if var not in g.variables:
                    raise KeyError(f"undeclared variable {var}")
                vals = [float(t) for t in tok[2:]]
                if g.variables[var].kind == POSE:
                    if len(vals) != 9:
                        raise ValueError("pose prior needs 3 mean + 6 covariance values")
                    g.add_factor(PriorPose(name, var, vals[:3], _upper_to_full(vals[3:], 3)))
                else:
                    if len(vals) != 5:
                        raise ValueError("point prior needs 2 mean + 3 covariance values")
                    g.add_factor(PriorPoint(name, var, vals[:2], _upper_to_full(vals[2:], 2)))
            elif rec == "ODOM":
                _expect(tok, 12)
                vals = [float(t) for t in tok[3:]]
                g.add_factor(Odometry(name, tok[1], tok[2], vals[:3], _upper_to_full(vals[3:], 3)))
            elif rec == "RANGE":
                _expect(tok, 5)
                g.add_factor(Range(name, tok[1], tok[2], float(tok[3]), float(tok[4])))
            else:
                raise ValueError(f"unknown record {tok[0]!r}")
        except ParseError:
            raise
        except (ValueError, KeyError, IndexError) as exc:
            raise ParseError(lineno, str(exc)) from exc
    return g


def _expect(tok, n):
    if len(tok) != n:
        raise ValueError(f"{tok[0]} expects {n - 1} fields, got {len(tok) - 1}")


def format_factor(f: Factor) -> str:
    if isinstance(f, PriorPose):
        vals = list(f.mean) + list(_full_to_upper(f.cov))
        return "PRIOR " + f.variables[0] + " " + " ".join(repr(float(v)) for v in vals)
    if isinstance(f, PriorPoint):
        vals = list(f.mean) + list(_full_to_upper(f.cov))
        return "PRIOR " + f.variables[0] + " " + " ".join(repr(float(v)) for v in vals)
    if isinstance(f, Odometry):
        vals = list(f.observed) + list(_full_to_upper(f.cov))
        return f"ODOM {f.variables[0]} {f.variables[1]} " + " ".join(repr(float(v)) for v in vals)
    if isinstance(f, Range):
        return f"RANGE {f.variables[0]} {f.variables[1]} {f.observed!r} {f.sigma!r}"
    raise TypeError(f"{f.kind} factors have no text form")


def format_graph(g: FactorGraph) -> str:
    lines = [f"VAR {v.id} {v.kind.upper()}" for v in g.variables.values()]
    lines += [format_factor(f) for f in g.factors]
    return "\n".join(lines) + "\n"


def read_graph(path) -> FactorGraph:
    with open(path) as fh:
        return parse_graph(fh.read())


def write_graph(g: FactorGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_graph(g))
