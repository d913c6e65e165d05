"""Symbolic elimination into a Bayes tree and incremental sub-tree extraction.

Frontal variables of a clique are kept in reverse elimination order and
separators in descending elimination position, so the first listed variable
is always the one closest to the root.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .factor_graph import Factor, FactorGraph, PendingMarginal


class OrderingError(ValueError):
    """No admissible elimination ordering was found."""


@dataclass(eq=False)
class Clique:
    frontal: list[str]
    separator: list[str]
    factors: list[Factor] = field(default_factory=list)
    parent: "Clique | None" = None
    children: list["Clique"] = field(default_factory=list)
    sampler: object = None
    marginal: Factor | None = None
    relaxed: object = None

    def __repr__(self):
        return f"Clique({' '.join(self.frontal)} : {' '.join(self.separator)})"

    @property
    def key(self) -> str:
        return self.frontal[-1]

    @property
    def variables(self) -> list[str]:
        return self.frontal + self.separator

    @property
    def child_marginal_factors(self) -> list[Factor]:
        return [c.marginal if c.marginal is not None else PendingMarginal(f"m:{c.key}", c.separator)
                for c in self.children]

    def all_factors(self) -> list[Factor]:
        """Local factors followed by the separator marginals of the children."""
        return list(self.factors) + self.child_marginal_factors

    @property
    def trained(self) -> bool:
        return self.sampler is not None


@dataclass
class BayesTree:
    root: Clique | None = None

    def __iter__(self):
        return iter(self.preorder())

    def __len__(self):
        return len(self.preorder())

    def preorder(self) -> list[Clique]:
        if self.root is None:
            return []
        out, stack = [], [self.root]
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(reversed(c.children))
        return out

    def postorder(self) -> list[Clique]:
        return postorder_from(self.root) if self.root else []

    @property
    def var_to_clique(self) -> dict[str, Clique]:
        return {v: c for c in self.preorder() for v in c.frontal}

    @property
    def variables(self) -> list[str]:
        return [v for c in self.preorder() for v in c.frontal]

    def factors(self) -> list[Factor]:
        return [f for c in self.preorder() for f in c.factors]

    def outline(self) -> str:
        """Depth-indented ``CLIQUE frontals : separators`` lines."""
        lines = []

        def walk(c, depth):
            sep = " ".join(c.separator)
            lines.append("  " * depth + f"CLIQUE {' '.join(c.frontal)} : {sep}".rstrip())
            for ch in c.children:
                walk(ch, depth + 1)

        if self.root is not None:
            walk(self.root, 0)
        return "\n".join(lines) + ("\n" if lines else "")


def postorder_from(root: Clique) -> list[Clique]:
    out, stack = [], [(root, False)]
    while stack:
        c, done = stack.pop()
        if done:
            out.append(c)
        else:
            stack.append((c, True))
            stack.extend((ch, False) for ch in reversed(c.children))
    return out


# --------------------------------------------------------------------------
# elimination


def _check_ordering(variables: Iterable[str], ordering: Sequence[str]):
    ordering = list(ordering)
    if len(set(ordering)) != len(ordering) or set(ordering) != set(variables):
        raise ValueError("ordering must be a permutation of the graph variables")
    return ordering


def _conditionals(var_sets: list[frozenset], ordering: list[str]):
    """Run the elimination game; returns ``[(var, separator set)]`` per step."""
    pos = {v: i for i, v in enumerate(ordering)}
    buckets: list[list[frozenset]] = [[] for _ in ordering]
    for s in var_sets:
        if s:
            buckets[min(pos[v] for v in s)].append(s)
    out = []
    for i, v in enumerate(ordering):
        sep = frozenset().union(*buckets[i]) - {v}
        out.append((v, sep))
        if sep:
            buckets[min(pos[u] for u in sep)].append(sep)
    return out, pos


def _build(conds, pos) -> tuple[Clique, dict[str, Clique]]:
    roots = [v for v, sep in conds if not sep]
    if len(roots) > 1:
        raise ValueError(f"factor graph is disconnected (components rooted at {roots})")
    owner: dict[str, Clique] = {}
    root = None
    for v, sep in reversed(conds):
        if not sep:
            root = Clique([v], [])
            owner[v] = root
            continue
        parent = owner[min(sep, key=pos.__getitem__)]
        if sep == set(parent.variables):
            parent.frontal.append(v)
            owner[v] = parent
        else:
            c = Clique([v], sorted(sep, key=pos.__getitem__, reverse=True), parent=parent)
            parent.children.append(c)
            owner[v] = c
    return root, owner


def eliminate(graph: FactorGraph, ordering: Sequence[str], orphans: Sequence[Clique] = ()) -> BayesTree:
    """Symbolic elimination of ``graph`` into a Bayes tree.

    ``orphans`` are already-built sub-trees whose separators act as prior
    factors during elimination; each is re-attached below the clique that
    owns the first-eliminated variable of its separator.
    """
    ordering = _check_ordering(graph.variables, ordering)
    sets = [frozenset(f.variables) for f in graph.factors] + [frozenset(o.separator) for o in orphans]
    conds, pos = _conditionals(sets, ordering)
    root, owner = _build(conds, pos)
    for f in graph.factors:
        owner[min(f.variables, key=pos.__getitem__)].factors.append(f)
    for o in orphans:
        host = owner[min(o.separator, key=pos.__getitem__)]
        if not set(o.separator) <= set(host.variables):
            raise ValueError(f"orphan {o} does not fit under {host}")
        o.parent = host
        host.children.append(o)
    return BayesTree(root)


@dataclass
class Fragment:
    """Part of a tree that must be re-eliminated after new factors arrive."""

    cliques: list[Clique]
    graph: FactorGraph
    orphans: list[Clique]
    new_variables: list[str]

    @property
    def size(self) -> int:
        return len(self.cliques)


def extract_subtree(tree: BayesTree, new_factors: Sequence[Factor], graph: FactorGraph) -> Fragment:
    """Detach the cliques affected by ``new_factors`` together with their ancestors.

    ``graph`` supplies variable declarations (it should already contain the
    new variables). Cliques below the fragment become orphans; they keep
    their trained samplers and contribute their separator marginals.
    """
    owner = tree.var_to_clique
    touched = {v for f in new_factors for v in f.variables}
    affected: list[Clique] = []
    seen = set()
    for v in sorted(touched & owner.keys()):
        c = owner[v]
        while c is not None and id(c) not in seen:
            seen.add(id(c))
            affected.append(c)
            c = c.parent
    if tree.root is not None and not seen:
        # factors on new variables only; keep the root so connectivity is checked
        affected.append(tree.root)
        seen.add(id(tree.root))
    affected = [c for c in tree.preorder() if id(c) in seen]
    orphans = [ch for c in affected for ch in c.children if id(ch) not in seen]
    frag_vars = [v for c in affected for v in c.frontal]
    new_vars = [v for v in graph.variables if v not in owner]
    sub = FactorGraph()
    for v in frag_vars + new_vars:
        sub.variables[v] = graph.variables[v]
    sub.factors = [f for c in affected for f in c.factors] + list(new_factors)
    sub.factors.sort(key=_factor_rank(graph))
    return Fragment(affected, sub, orphans, new_vars)


def _factor_rank(graph: FactorGraph):
    index = {id(f): i for i, f in enumerate(graph.factors)}
    return lambda f: index.get(id(f), len(index))


# --------------------------------------------------------------------------
# ordering


def _tree_ok(graph: FactorGraph, ordering, orphans) -> tuple[bool, BayesTree | None]:
    from .clique_inference import RelaxationError, select_relaxed_factors

    ghosts = _ghosts(orphans)
    try:
        tree = eliminate(graph, ordering, ghosts)
    except ValueError:
        return False, None
    # orphans below the fragment keep their trained samplers
    skip = {id(c) for g in ghosts for c in postorder_from(g)}
    try:
        for c in tree.preorder():
            if id(c) not in skip:
                select_relaxed_factors(c)
    except RelaxationError:
        return False, tree
    return True, tree


def _ghosts(orphans):
    # stand-ins so a dry run never mutates the real orphan cliques
    return [Clique(list(o.frontal), list(o.separator), marginal=PendingMarginal(f"m:{o.key}", o.separator))
            for o in orphans]


def _score(tree: BayesTree, graph: FactorGraph):
    cliques = [c for c in tree.preorder() if all(v in graph.variables for v in c.frontal)]
    return (max(graph.dims(c.variables) for c in cliques), len(cliques))


def _min_degree(graph: FactorGraph, new_vars, orphans, admissible_only=True) -> list[str]:
    rank = {v: i for i, v in enumerate(graph.variables)}
    new = set(new_vars)
    # symbolic factors: (variables, carries a prior)
    facs = [(frozenset(f.variables), f.is_prior) for f in graph.factors]
    facs += [(frozenset(o.separator), True) for o in orphans]
    remaining = set(graph.variables)
    order = []
    while remaining:
        pool = remaining - new or remaining

        def degree(v):
            return len(frozenset().union(*[s for s, _ in facs if v in s]) - {v})

        def ok(v):
            return any(p for s, p in facs if v in s)

        cands = sorted(pool, key=lambda v: (degree(v), rank[v]))
        if admissible_only:
            good = [v for v in cands if ok(v)]
            cands = good or cands
        v = cands[0]
        touching = [(s, p) for s, p in facs if v in s]
        sep = frozenset().union(*[s for s, _ in touching]) - {v}
        carries = any(p for _, p in touching)
        facs = [(s, p) for s, p in facs if v not in s]
        if sep:
            facs.append((sep, carries))
        remaining.discard(v)
        order.append(v)
    return order


def default_ordering(graph: FactorGraph, new_vars: Sequence[str] = (), orphans: Sequence[Clique] = (),
                     exhaustive_limit: int = 720, repair_budget: int = 2000) -> list[str]:
    """Constrained minimum-degree ordering with new variables last.

    A variable is preferably eliminated only while one of its factors
    carries prior information, so every clique can start ancestral
    sampling. The candidate is then checked clique by clique; small
    problems are searched exhaustively for the ordering with the smallest
    largest clique (then fewest cliques), larger ones are repaired by
    bounded backtracking. Raises :class:`OrderingError` if nothing works.
    """
    new_vars = [v for v in graph.variables if v in set(new_vars)]
    old_vars = [v for v in graph.variables if v not in set(new_vars)]
    if len(graph.variables) == 1:
        return list(graph.variables)
    base = _min_degree(graph, new_vars, orphans)
    old_base = [v for v in base if v not in set(new_vars)]
    new_base = [v for v in base if v in set(new_vars)]
    count = math.factorial(len(old_vars)) * math.factorial(len(new_vars))
    if count <= exhaustive_limit:
        best, best_score = None, None
        for po in itertools.permutations(old_base):
            for pn in itertools.permutations(new_base):
                cand = list(po) + list(pn)
                ok, tree = _tree_ok(graph, cand, orphans)
                if not ok:
                    continue
                s = _score(tree, graph)
                if best_score is None or s < best_score:
                    best, best_score = cand, s
        if best is None:
            raise OrderingError("no elimination ordering gives samplable cliques; supply one explicitly")
        return best
    ok, _ = _tree_ok(graph, base, orphans)
    if ok:
        return base
    found = _repair(graph, base, set(new_vars), orphans, repair_budget)
    if found is None:
        raise OrderingError("ordering repair budget exhausted; supply an elimination ordering explicitly")
    return found


def _repair(graph, base, new, orphans, budget):
    """Backtracking over elimination prefixes, preferring the base order."""
    rank = {v: i for i, v in enumerate(base)}
    tried = 0

    def rec(prefix, remaining):
        nonlocal tried
        if not remaining:
            tried += 1
            ok, _ = _tree_ok(graph, prefix, orphans)
            return list(prefix) if ok else None
        pool = remaining - new or remaining
        for v in sorted(pool, key=rank.__getitem__):
            if tried >= budget:
                return None
            got = rec(prefix + [v], remaining - {v})
            if got is not None:
                return got
        return None

    return rec([], set(base))
