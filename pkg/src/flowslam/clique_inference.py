"""Per-clique training samples and conditional samplers.

A clique's factors are split into prior-kind factors (priors and separator
marginals of children) and likelihood factors. Some likelihood factors are
relaxed: their measurements become random "forecast" observations ``O`` so
the rest of the clique can be drawn by plain ancestral sampling. A flow is
fitted to joint samples ordered ``(O, S, F)`` and then pinned to the recorded
observations, which leaves a separator marginal (rows of ``S``) and a
frontal conditional (rows of ``F``).
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .factor_graph import Factor, SeparatorMarginalFactor, _DIMS, _CIRCULAR
from .samples import SampleBlock
from .spline_flow import FlowConfig, TriangularFlow, train

GROUND = object()


class RelaxationError(ValueError):
    """The clique cannot be broken into prior-rooted trees."""


class SamplingError(RuntimeError):
    """Ancestral sampling stalled."""


@dataclass
class ForecastObservationSet:
    relaxed_factors: list[Factor]
    sampling_order: list[Factor] = field(default_factory=list)

    @property
    def observed_values(self) -> np.ndarray:
        if not self.relaxed_factors:
            return np.zeros(0)
        return np.concatenate([f.observed_vector for f in self.relaxed_factors])

    @property
    def obs_dims(self) -> int:
        return sum(f.obs_dims for f in self.relaxed_factors)

    @property
    def layout(self) -> list[tuple[str, int]]:
        return [(f"O.{f.name}", f.obs_dims) for f in self.relaxed_factors]

    @property
    def circular(self) -> np.ndarray:
        return np.array([c for f in self.relaxed_factors for c in f.obs_circular], dtype=bool)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.relaxed_factors]


class _DisjointSet:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] is not root:
            root = self.parent[root]
        while self.parent[x] is not root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra is rb:
            return False
        self.parent[ra] = rb
        return True


def _clique_parts(clique, variables=None):
    if isinstance(clique, (list, tuple)):
        factors = list(clique)
        if variables is None:
            variables = list(dict.fromkeys(v for f in factors for v in f.variables))
    else:
        factors = clique.all_factors()
        variables = clique.variables if variables is None else variables
    return factors, list(variables)


def _ancestral_plan(priors, kept, variables) -> list[Factor] | None:
    """Order in which ``kept`` factors sample their missing variable, or None."""
    sampled = {v for p in priors for v in p.variables}
    queue = deque(kept)
    order = []
    stalls = 0
    while queue:
        f = queue.popleft()
        missing = [v for v in f.variables if v not in sampled]
        if len(missing) == 1 and f.can_sample(missing[0], sampled):
            sampled.add(missing[0])
            order.append(f)
            stalls = 0
            continue
        if not missing:
            return None
        queue.append(f)
        stalls += 1
        if stalls > len(queue):
            return None
    if set(variables) - sampled:
        return None
    return order


def select_relaxed_factors(clique, variables=None, combination_budget: int = 100_000) -> ForecastObservationSet:
    """Pick the likelihood factors whose measurements become forecast observations.

    Accepts a :class:`Clique` or a plain list of factors. The spanning forest
    is grown over prior-rooted components keeping older factors first, so
    the most recently added factor on each loop is the one relaxed (ties on
    arity go to the larger factor). If the resulting trees cannot be sampled
    ancestrally (range factors only generate the landmark) other relaxed
    sets of the same size are tried.
    """
    factors, variables = _clique_parts(clique, variables)
    priors = [f for f in factors if f.is_prior]
    likes = [f for f in factors if not f.is_prior]
    seen = {}
    for p in priors:
        for v in p.variables:
            if v in seen:
                raise RelaxationError(f"{v} is attached to two prior-kind factors ({seen[v]}, {p.name})")
            seen[v] = p.name
    ds = _DisjointSet()
    for p in priors:
        for v in p.variables:
            ds.union(GROUND, v)
    index = {id(f): i for i, f in enumerate(factors)}
    keep_first = sorted(likes, key=lambda f: (f.arity, index[id(f)]))
    relaxed = []
    for f in keep_first:
        roots = {ds.find(v) for v in f.variables}
        if len(roots) < f.arity:
            relaxed.append(f)
        else:
            for v in f.variables[1:]:
                ds.union(f.variables[0], v)
    floating = [v for v in variables if ds.find(v) is not ds.find(GROUND)]
    if floating:
        raise RelaxationError(f"variables {floating} have no prior-rooted tree")
    relaxed.sort(key=lambda f: index[id(f)])
    kept = [f for f in likes if f not in relaxed]
    plan = _ancestral_plan(priors, kept, variables)
    if plan is not None:
        return ForecastObservationSet(relaxed, plan)
    # fall back to other relaxed sets of the same size, most preferred first
    prefer = sorted(likes, key=lambda f: (-f.arity, -index[id(f)]))
    for tried, combo in enumerate(itertools.combinations(prefer, len(relaxed))):
        if tried >= combination_budget:
            break
        kept = [f for f in likes if f not in combo]
        if not _is_forest(priors, kept):
            continue
        plan = _ancestral_plan(priors, kept, variables)
        if plan is not None:
            return ForecastObservationSet(sorted(combo, key=lambda f: index[id(f)]), plan)
    raise RelaxationError("no relaxed factor set admits ancestral sampling; check the elimination ordering")


def _is_forest(priors, kept) -> bool:
    ds = _DisjointSet()
    for p in priors:
        for v in p.variables:
            ds.union(GROUND, v)
    for f in kept:
        for v in f.variables[1:]:
            if not ds.union(f.variables[0], v):
                return False
    return True


# --------------------------------------------------------------------------
# ancestral training samples


def _layout(clique_vars, kinds):
    return [(v, _DIMS[kinds[v]]) for v in clique_vars]


def clique_training_sampler(clique, relaxed: ForecastObservationSet, n: int, rng,
                            kinds: dict[str, str] | None = None) -> SampleBlock:
    """Joint samples of ``(O, S, F)`` by ancestral sampling.

    Prior-kind factors are sampled first; likelihood factors are then popped
    from a queue and either sample their single missing variable, draw a
    forecast observation (relaxed factors whose variables are all known),
    or go back to the end of the queue.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(rng)
    factors = clique.all_factors()
    separator, frontal = list(clique.separator), list(clique.frontal)
    kinds = kinds or _infer_kinds(factors)
    values: dict[str, np.ndarray] = {}
    for f in factors:
        if f.is_prior:
            block = f.sample_prior(n, rng)
            values.update(block.as_dict())
    relaxed_ids = {id(f) for f in relaxed.relaxed_factors}
    likes = [f for f in factors if not f.is_prior]
    obs: dict[int, np.ndarray] = {}
    queue = deque(likes)
    guard = max(len(likes) ** 2, 1)
    pops = 0
    while queue:
        pops += 1
        if pops > guard:
            raise SamplingError(f"ancestral sampling stalled after {guard} pops; relaxed set is invalid")
        f = queue.popleft()
        missing = [v for v in f.variables if v not in values]
        if id(f) in relaxed_ids:
            if missing:
                queue.append(f)
            else:
                obs[id(f)] = np.asarray(f.sample_observation(values, rng)).reshape(n, f.obs_dims)
            continue
        if len(missing) == 1 and f.can_sample(missing[0], values):
            var, draw = f.sample_forward(values, rng)
            values[var] = draw
        elif not missing:
            raise SamplingError(f"factor {f.name} closes a loop but is not relaxed")
        else:
            queue.append(f)
    absent = [v for v in separator + frontal if v not in values]
    if absent:
        raise SamplingError(f"variables {absent} were never sampled")
    cols = [obs[id(f)] for f in relaxed.relaxed_factors]
    cols += [np.asarray(values[v]).reshape(n, -1) for v in separator + frontal]
    layout = relaxed.layout + _layout(separator + frontal, kinds)
    circular = np.concatenate([relaxed.circular] + [np.array(_CIRCULAR[kinds[v]]) for v in separator + frontal])
    return SampleBlock(np.hstack(cols), layout, circular)


def _infer_kinds(factors) -> dict[str, str]:
    kinds = {}
    for f in factors:
        if isinstance(f, SeparatorMarginalFactor):
            for v, w in f.layout:
                kinds[v] = "pose" if w == 3 else "point"
            continue
        if f.kind == "prior-pose":
            kinds[f.variables[0]] = "pose"
        elif f.kind == "prior-point":
            kinds[f.variables[0]] = "point"
        elif f.kind == "odometry":
            kinds.update(dict.fromkeys(f.variables, "pose"))
        elif f.kind == "range":
            kinds[f.variables[0]] = "pose"
            kinds[f.variables[1]] = "point"
    return kinds


# --------------------------------------------------------------------------
# conditional samplers


class ConditionalSampler:
    """Flow over ``(O, S, F)`` with ``O`` pinned to the recorded observations.

    ``layout`` and ``circular`` describe all flow columns, observations included.
    """

    def __init__(self, flow: TriangularFlow, obs_values, layout, circular, obs_dims: int, sep_width: int):
        self.flow = flow
        self.obs_values = np.asarray(obs_values, dtype=float).reshape(-1)
        self.layout = list(layout)
        self.circular = np.asarray(circular, dtype=bool)
        self.obs_dims = obs_dims
        self.sep_width = sep_width
        if self.obs_values.size != obs_dims:
            raise ValueError(f"observation dimension {self.obs_values.size} != {obs_dims}")

    def _var_layout(self, start, stop):
        out, col = [], 0
        for name, w in self.layout:
            if start <= col < stop:
                out.append((name, w))
            col += w
        return out

    @property
    def separator_layout(self):
        return self._var_layout(self.obs_dims, self.obs_dims + self.sep_width)

    @property
    def frontal_layout(self):
        return self._var_layout(self.obs_dims + self.sep_width, self.flow.dim)

    def sample_separator(self, n: int, rng) -> SampleBlock:
        """Draws from the separator marginal given the recorded observations."""
        s = self.obs_dims
        x = self.flow.conditional_sample(self.obs_values, rng, n=n, stop=s + self.sep_width)
        return SampleBlock(x, self.separator_layout, self.circular[s:s + self.sep_width])

    def sample_frontal(self, separator_values, rng, n: int | None = None) -> SampleBlock:
        """Frontal draws; row ``i`` of ``separator_values`` conditions draw ``i``."""
        sep = np.asarray(separator_values, dtype=float)
        if self.sep_width == 0:
            if n is None:
                n = sep.shape[0] if sep.ndim == 2 else None
            if n is None:
                raise ValueError("n is required for a clique without separator")
            prefix = np.broadcast_to(self.obs_values, (n, self.obs_dims))
        else:
            sep = sep.reshape(-1, self.sep_width)
            prefix = np.hstack([np.broadcast_to(self.obs_values, (len(sep), self.obs_dims)), sep])
        x = self.flow.conditional_sample(prefix, rng)
        s = self.obs_dims + self.sep_width
        return SampleBlock(x, self.frontal_layout, self.circular[s:])

    def frontal_log_prob(self, separator_values, frontal_values) -> np.ndarray:
        sep = np.asarray(separator_values, dtype=float).reshape(len(frontal_values), -1)
        prefix = np.hstack([np.broadcast_to(self.obs_values, (len(sep), self.obs_dims)), sep])
        return self.flow.conditional_log_prob(prefix, frontal_values)

    def marginal_factor(self, name: str) -> SeparatorMarginalFactor | None:
        if self.sep_width == 0:
            return None
        s = self.obs_dims
        return SeparatorMarginalFactor(name, [v for v, _ in self.separator_layout], self.flow, self.obs_values,
                                       self.separator_layout, self.circular[s:s + self.sep_width])


def conditional_sampler_trainer(samples: SampleBlock, obs_values, config: FlowConfig | None = None, rng=None,
                                obs_dims: int | None = None, sep_width: int = 0,
                                marginal_name: str = "m") -> tuple[ConditionalSampler, SeparatorMarginalFactor | None]:
    """Fit a flow to ``(O, S, F)`` samples and pin ``O`` to ``obs_values``.

    Returns the conditional sampler (which also draws separator marginals)
    and the separator marginal factor for the parent, or ``None`` at a root.
    """
    obs_values = np.asarray(obs_values, dtype=float).reshape(-1)
    obs_dims = obs_values.size if obs_dims is None else obs_dims
    if obs_values.size != obs_dims:
        raise ValueError(f"observation dimension {obs_values.size} != {obs_dims}")
    if obs_dims + sep_width > samples.values.shape[1]:
        raise ValueError("sample block narrower than observation + separator columns")
    flow = train(samples, config, rng)
    sampler = ConditionalSampler(flow, obs_values, samples.layout, samples.circular, obs_dims, sep_width)
    return sampler, sampler.marginal_factor(marginal_name)
