"""Incremental inference: upward training pass and downward sampling pass."""
from __future__ import annotations

import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import bayes_tree as bt
from .clique_inference import clique_training_sampler, conditional_sampler_trainer, select_relaxed_factors
from .factor_graph import Factor, FactorGraph, VariableSpec
from .samples import SampleBlock
from .spline_flow import FlowConfig

log = logging.getLogger(__name__)


@dataclass
class EngineConfig:
    knots: int = 6
    train_samples: int = 500
    posterior_samples: int = 2000
    seed: int = 0
    affine_only: bool = False
    threads: int = 1
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if self.knots < 2:
            raise ValueError("knots must be at least 2")
        if self.train_samples <= 0 or self.posterior_samples <= 0:
            raise ValueError("sample counts must be positive")

    def flow_config(self) -> FlowConfig:
        return replace(self.flow, num_bins=self.knots, affine_only=self.affine_only)


@dataclass
class PosteriorSampleSet:
    samples: dict[str, np.ndarray]
    n: int
    version: int
    kinds: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, var: str) -> np.ndarray:
        return self.samples[var]

    def block(self, variables: Sequence[str] | None = None) -> SampleBlock:
        variables = list(self.samples) if variables is None else list(variables)
        circ = {v: np.array([False, False, True]) if self.samples[v].shape[1] == 3 else np.zeros(2, bool)
                for v in variables}
        return SampleBlock.from_dict({v: self.samples[v] for v in variables}, circ)

    def mean_poses(self, poses: Sequence[str]) -> np.ndarray:
        """Posterior mean per pose; headings use the circular mean."""
        out = []
        for p in poses:
            s = self.samples[p]
            out.append([s[:, 0].mean(), s[:, 1].mean(),
                        np.arctan2(np.sin(s[:, 2]).mean(), np.cos(s[:, 2]).mean())])
        return np.array(out).reshape(-1, 3)

    def write(self, path, variables: Sequence[str] | None = None) -> None:
        """Header of flattened column names, then one whitespace-delimited row per draw."""
        block = self.block(variables)
        with open(path, "w") as fh:
            fh.write(" ".join(block.column_names()) + "\n")
            for row in block.values:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_samples(path) -> SampleBlock:
    with open(path) as fh:
        header = fh.readline().split()
        rows = [list(map(float, line.split())) for line in fh if line.strip()]
    layout: list[tuple[str, int]] = []
    for col in header:
        name = col.rsplit(".", 1)[0]
        if layout and layout[-1][0] == name:
            layout[-1] = (name, layout[-1][1] + 1)
        else:
            layout.append((name, 1))
    values = np.array(rows, dtype=float).reshape(len(rows), len(header))
    circ = np.array([c.endswith(".theta") for c in header])
    return SampleBlock(values, layout, circ)


@dataclass
class UpdateRecord:
    step: int
    update_s: float
    sample_s: float = 0.0
    fragment_cliques: int = 0

    def line(self) -> str:
        return (f"step={self.step} update_s={self.update_s:.6f} sample_s={self.sample_s:.6f} "
                f"fragment_cliques={self.fragment_cliques}")


def _clique_seed(seed: int, version: int, clique: bt.Clique) -> np.random.SeedSequence:
    tag = zlib.crc32(" ".join(clique.frontal).encode())
    return np.random.SeedSequence([seed, version, tag])


class Engine:
    """Bayes tree of trained clique samplers, updated as factors arrive."""

    def __init__(self, config: EngineConfig | None = None):
        self.config = config or EngineConfig()
        self.graph = FactorGraph()
        self.tree = bt.BayesTree()
        self.version = 0
        self.timing: list[UpdateRecord] = []
        self.last_fragment: list[bt.Clique] = []

    # -- upward pass ----------------------------------------------------------

    def update(self, factors: Iterable[Factor], variables: Iterable = (), ordering: Sequence[str] | None = None):
        """Add variables and factors, re-eliminate the affected fragment and retrain it.

        ``variables`` holds :class:`VariableSpec` objects or ``(id, kind)``
        pairs. ``ordering`` may list any superset of the fragment variables;
        it is restricted to the fragment.
        """
        factors = list(factors)
        variables = [v if isinstance(v, VariableSpec) else VariableSpec(*v) for v in variables]
        if not factors and not variables:
            return self
        t0 = time.perf_counter()
        graph = self.graph.copy()
        for v in variables:
            graph.add_variable(v.id, v.kind)
        for f in factors:
            graph.add_factor(f)
        if self.tree.root is None:
            frag_graph, orphans, new_vars, size = graph, [], list(graph.variables), 0
        else:
            frag = bt.extract_subtree(self.tree, factors, graph)
            frag_graph, orphans, new_vars, size = frag.graph, frag.orphans, frag.new_variables, frag.size
        if ordering is None:
            order = bt.default_ordering(frag_graph, new_vars, orphans)
        else:
            keep = set(frag_graph.variables)
            order = [v for v in ordering if v in keep]
        for o in orphans:
            o.parent = None
        tree = bt.eliminate(frag_graph, order, orphans)
        orphan_ids = {id(o) for c in orphans for o in bt.postorder_from(c)}
        fresh = [c for c in tree.postorder() if id(c) not in orphan_ids]
        self.graph = graph
        self.tree = tree
        self.version += 1
        self._train(fresh)
        self.last_fragment = fresh
        record = UpdateRecord(self.version, time.perf_counter() - t0, 0.0, len(fresh))
        self.timing.append(record)
        log.info("update %d: %d fragment cliques (%d replaced)", self.version, len(fresh), size)
        return self

    def _train_clique(self, clique: bt.Clique):
        cfg = self.config
        seq = _clique_seed(cfg.seed, self.version, clique)
        rng_samples, rng_flow = (np.random.default_rng(s) for s in seq.spawn(2))
        relaxed = select_relaxed_factors(clique)
        kinds = {v: self.graph.variables[v].kind for v in clique.variables}
        samples = clique_training_sampler(clique, relaxed, cfg.train_samples, rng_samples, kinds)
        sampler, marginal = conditional_sampler_trainer(
            samples, relaxed.observed_values, cfg.flow_config(), rng_flow,
            sep_width=self.graph.dims(clique.separator), marginal_name=f"m:{clique.key}")
        clique.sampler = sampler
        clique.marginal = marginal
        clique.relaxed = relaxed

    def _train(self, cliques: list[bt.Clique]):
        for c in cliques:
            c.sampler = None
            c.marginal = None
        if self.config.threads <= 1:
            for c in cliques:
                self._train_clique(c)
            return
        pending = list(cliques)
        done = {id(c) for c in self.tree.preorder() if c.sampler is not None}
        with ThreadPoolExecutor(self.config.threads) as pool:
            while pending:
                ready = [c for c in pending if all(id(ch) in done for ch in c.children)]
                list(pool.map(self._train_clique, ready))
                done.update(id(c) for c in ready)
                pending = [c for c in pending if id(c) not in done]

    # -- downward pass ----------------------------------------------------------

    def sample_joint(self, n: int | None = None, rng=None) -> PosteriorSampleSet:
        """Joint posterior draws, root to leaves; draw ``i`` of a separator conditions draw ``i`` below."""
        n = self.config.posterior_samples if n is None else n
        if n <= 0:
            raise ValueError("n must be positive")
        if self.tree.root is None:
            raise RuntimeError("nothing to sample: the engine has no factors yet")
        t0 = time.perf_counter()
        if rng is None:
            rng = np.random.default_rng([self.config.seed, self.version, 0x5A])
        rng = np.random.default_rng(rng)
        out: dict[str, np.ndarray] = {}
        cliques = self.tree.preorder()
        streams = rng.spawn(len(cliques))
        for c, r in zip(cliques, streams):
            if c.sampler is None:
                raise RuntimeError(f"clique {c} has not been trained")
            if c.separator:
                sep = np.hstack([out[v] for v in c.separator])
                block = c.sampler.sample_frontal(sep, r)
            else:
                block = c.sampler.sample_frontal(np.zeros((n, 0)), r, n=n)
            out.update(block.as_dict())
        ordered = {v: out[v] for v in self.graph.variables}
        if self.timing:
            self.timing[-1].sample_s = time.perf_counter() - t0
        kinds = {v: s.kind for v, s in self.graph.variables.items()}
        return PosteriorSampleSet(ordered, n, self.version, kinds)

    def timing_log(self) -> str:
        return "".join(r.line() + "\n" for r in self.timing)


def batch_solve(graph: FactorGraph, config: EngineConfig | None = None, rng=None,
                ordering: Sequence[str] | None = None) -> tuple[Engine, PosteriorSampleSet]:
    """Single update from an empty engine followed by joint sampling."""
    engine = Engine(config)
    engine.update(graph.factors, graph.variables.values(), ordering)
    return engine, engine.sample_joint(rng=rng)
