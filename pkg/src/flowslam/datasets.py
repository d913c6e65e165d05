"""Synthetic range-only sequences and a plain-text odometry/range stream format.

Stream files (whitespace-delimited, ``#`` comments):

* odometry: ``T dx dtheta`` (forward motion, then in-place rotation)
* ranges: ``T landmark_id range_m``
* ground truth: ``T x y theta``
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import geometry as geo
from .factor_graph import POINT, POSE, Factor, FactorGraph, Odometry, PriorPose, Range, VariableSpec


# --------------------------------------------------------------------------
# synthetic world


@dataclass
class SyntheticScenario:
    """Ground truth and noise model of a range-only run.

    ``moves[t]`` is the relative pose from pose ``t`` to ``t + 1``;
    ``schedule[t]`` lists landmarks ranged from pose ``t``.
    """

    start: np.ndarray
    moves: list[np.ndarray]
    landmarks: dict[str, np.ndarray]
    schedule: list[list[str]]
    odometry_cov: np.ndarray = field(default_factory=lambda: np.diag([0.1 ** 2, 0.1 ** 2, 0.05 ** 2]))
    range_sigma: float = 0.2
    prior_cov: np.ndarray = field(default_factory=lambda: np.diag([0.1 ** 2, 0.1 ** 2, 0.03 ** 2]))
    seed: int = 0
    noise: bool = True

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.moves = [np.asarray(m, dtype=float) for m in self.moves]
        self.landmarks = {k: np.asarray(v, dtype=float) for k, v in self.landmarks.items()}
        if len(self.schedule) != len(self.moves) + 1:
            raise ValueError("schedule needs one entry per pose")
        unknown = {l for row in self.schedule for l in row} - set(self.landmarks)
        if unknown:
            raise ValueError(f"schedule references unknown landmarks {sorted(unknown)}")

    @property
    def num_steps(self) -> int:
        return len(self.schedule)

    def poses(self) -> np.ndarray:
        out = [self.start]
        for m in self.moves:
            out.append(geo.compose(out[-1], m))
        return np.array(out)


def default_scenario(seed: int = 0, noise: bool = True) -> SyntheticScenario:
    """Hexagonal loop of six poses around two landmarks.

    Step 2 has seen L1 from two poses only, so it has two mirror-image
    candidate positions; later ranges from other poses make both landmarks
    unimodal by step 5.
    """
    step = np.array([5.0, 0.0, math.pi / 3])
    return SyntheticScenario(
        start=np.zeros(3),
        moves=[step] * 5,
        landmarks={"L1": np.array([2.5, 3.0]), "L2": np.array([9.0, 8.0])},
        schedule=[["L1"], ["L1"], ["L2"], ["L2"], ["L1"], ["L2"]],
        seed=seed,
        noise=noise,
    )


def corridor_scenario(num_steps: int = 50, seed: int = 0, spacing: float = 2.0, offset: float = 3.0,
                      noise: bool = True) -> SyntheticScenario:
    """Straight corridor; each landmark is ranged from two consecutive poses."""
    moves = [np.array([spacing, 0.0, 0.0])] * (num_steps - 1)
    landmarks, schedule = {}, []
    for t in range(num_steps):
        row = []
        k = t // 2
        name = f"L{k + 1}"
        if name not in landmarks:
            side = 1.0 if k % 2 == 0 else -1.0
            landmarks[name] = np.array([spacing * (2 * k + 0.5), side * offset])
        row.append(name)
        schedule.append(row)
    return SyntheticScenario(np.zeros(3), moves, landmarks, schedule, seed=seed, noise=noise)


def small_range_graph() -> FactorGraph:
    """Three poses and two landmarks with one pose prior.

    ``L1`` is ranged from ``X0`` and ``X1`` (two intersecting rings, so two
    likely positions) and ``L2`` once from ``X2`` (a ring).
    """
    g = FactorGraph()
    for v in ("X0", "X1", "X2"):
        g.add_variable(v, POSE)
    for v in ("L1", "L2"):
        g.add_variable(v, POINT)
    step = [5.0, 0.0, math.pi / 3]
    odom_cov = np.diag([0.01, 0.01, 0.0025])
    g.add_factor(PriorPose("f1", "X0", [0.0, 0.0, 0.0], np.diag([0.01, 0.01, 0.001])))
    g.add_factor(Odometry("f2", "X0", "X1", step, odom_cov))
    g.add_factor(Range("f3", "X0", "L1", 3.9, 0.2))
    g.add_factor(Range("f4", "X1", "L1", 3.9, 0.2))
    g.add_factor(Odometry("f5", "X1", "X2", step, odom_cov))
    g.add_factor(Range("f6", "X2", "L2", 5.0, 0.2))
    return g


@dataclass
class StepBatch:
    """Variables and factors that arrive at one time step."""

    step: int
    variables: list[VariableSpec]
    factors: list[Factor]


@dataclass
class SyntheticSequence:
    steps: list[StepBatch]
    truth: dict[str, np.ndarray]

    def graph_until(self, step: int) -> FactorGraph:
        g = FactorGraph()
        for b in self.steps[:step + 1]:
            for v in b.variables:
                g.add_variable(v.id, v.kind)
            for f in b.factors:
                g.add_factor(f)
        return g

    def variables_until(self, step: int) -> list[str]:
        return [v.id for b in self.steps[:step + 1] for v in b.variables]


def pose_id(t: int) -> str:
    return f"X{t}"


def generate_synthetic(scenario: SyntheticScenario) -> SyntheticSequence:
    """Per-step factor batches with measurement noise drawn from the scenario's models."""
    rng = np.random.default_rng(scenario.seed)
    poses = scenario.poses()
    truth = {pose_id(t): p for t, p in enumerate(poses)}
    truth.update(scenario.landmarks)
    seen: set[str] = set()
    count = 0
    steps = []

    def name():
        nonlocal count
        count += 1
        return f"f{count}"

    def noise(cov):
        if not scenario.noise:
            return np.zeros(len(cov))
        return rng.multivariate_normal(np.zeros(len(cov)), cov)

    for t in range(scenario.num_steps):
        xs = pose_id(t)
        variables = [VariableSpec(xs, POSE)]
        factors: list[Factor] = []
        if t == 0:
            factors.append(PriorPose(name(), xs, geo.compose(poses[0], geo.exp_map(noise(scenario.prior_cov))),
                                     scenario.prior_cov))
        else:
            z = geo.log_map(geo.between(poses[t - 1], poses[t])) + noise(scenario.odometry_cov)
            z[2] = geo.wrap_angle(z[2])
            factors.append(Odometry(name(), pose_id(t - 1), xs, z, scenario.odometry_cov))
        for lmk in scenario.schedule[t]:
            if lmk not in seen:
                seen.add(lmk)
                variables.append(VariableSpec(lmk, POINT))
            r = float(geo.range_to(poses[t], scenario.landmarks[lmk]))
            if scenario.noise:
                r += scenario.range_sigma * rng.standard_normal()
            factors.append(Range(name(), xs, lmk, r, scenario.range_sigma))
        steps.append(StepBatch(t, variables, factors))
    return SyntheticSequence(steps, truth)


# --------------------------------------------------------------------------
# odometry / range streams


class StreamParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass
class PlazaRecord:
    odometry: list[tuple[float, float, float]]  # (T, dx, dtheta)
    ranges: list[tuple[float, str, float]]  # (T, landmark, meters)

    def __post_init__(self):
        for label, stream in (("odometry", self.odometry), ("range", self.ranges)):
            times = [r[0] for r in stream]
            if any(b < a for a, b in zip(times, times[1:])):
                raise ValueError(f"{label} timestamps must be non-decreasing")


def _read_rows(path, ncols, kinds):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != ncols:
                raise StreamParseError(path, lineno, f"expected {ncols} fields, got {len(tok)}")
            try:
                rows.append(tuple(k(t) for k, t in zip(kinds, tok)))
            except ValueError as exc:
                raise StreamParseError(path, lineno, str(exc)) from exc
    return rows


def read_odometry(path) -> list[tuple[float, float, float]]:
    return _read_rows(path, 3, (float, float, float))


def read_ranges(path) -> list[tuple[float, str, float]]:
    return _read_rows(path, 3, (float, str, float))


def read_ground_truth(path) -> list[tuple[float, float, float, float]]:
    return _read_rows(path, 4, (float, float, float, float))


def _fmt(v) -> str:
    return repr(float(v)) if not isinstance(v, str) else v


def write_rows(path, rows: Iterable[Sequence]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(" ".join(_fmt(v) for v in r) + "\n")


def read_plaza(odometry_path, range_path) -> PlazaRecord:
    return PlazaRecord(read_odometry(odometry_path), read_ranges(range_path))


@dataclass
class OdometryBatch:
    index: int
    start_time: float
    end_time: float
    increments: list[tuple[float, float, float]]
    ranges: list[tuple[float, str, float]]

    @property
    def transform(self) -> np.ndarray:
        """Sequential composition of the batch's ``(dx, 0, dtheta)`` increments."""
        return compose_increments([(dx, dth) for _, dx, dth in self.increments])


def increment_pose(dx: float, dtheta: float) -> np.ndarray:
    return np.array([dx, 0.0, dtheta])


def compose_increments(incs: Sequence[tuple[float, float]]) -> np.ndarray:
    out = geo.identity()
    for dx, dth in incs:
        out = geo.compose(out, increment_pose(dx, dth))
    return out


def decimate(odometry, min_translation: float = 1e-2, min_rotation: float = 1e-3):
    """Drop increments whose translation and rotation are both below the thresholds."""
    return [r for r in odometry if abs(r[1]) >= min_translation or abs(r[2]) >= min_rotation]


def ingest_plaza(record: PlazaRecord, batch_size: int = 10, min_translation: float = 1e-2,
                 min_rotation: float = 1e-3) -> tuple[list[OdometryBatch], list]:
    """Decimate and batch the odometry; attach each range to the batch whose end pose is nearest.

    A range with timestamp in ``(previous batch end, batch end]`` is kept if
    it is closer in time to the batch end than to the batch's second-to-last
    admitted increment. Returns the complete batches and the pending
    increments of an unfinished batch.
    """
    admitted = decimate(record.odometry, min_translation, min_rotation)
    batches = []
    full = len(admitted) // batch_size
    prev_end = -math.inf
    ranges = sorted(record.ranges, key=lambda r: r[0])
    for b in range(full):
        incs = admitted[b * batch_size:(b + 1) * batch_size]
        end = incs[-1][0]
        before = incs[-2][0] if len(incs) > 1 else prev_end
        cut = 0.5 * (before + end) if math.isfinite(before) else -math.inf
        window = [r for r in ranges if prev_end < r[0] <= end and r[0] > cut]
        batches.append(OdometryBatch(b, incs[0][0], end, incs, window))
        prev_end = end
    return batches, admitted[full * batch_size:]


@dataclass
class PlazaModel:
    """Noise models used to turn batches into factors."""

    odometry_cov: np.ndarray = field(default_factory=lambda: np.diag([0.05 ** 2, 0.05 ** 2, 0.01 ** 2]))
    range_sigma: float = 0.5
    prior_cov: np.ndarray = field(default_factory=lambda: np.diag([0.01 ** 2, 0.01 ** 2, 0.001 ** 2]))
    start: np.ndarray = field(default_factory=lambda: np.zeros(3))


def batches_to_updates(batches: Sequence[OdometryBatch], model: PlazaModel | None = None,
                       update_interval: int = 10) -> list[StepBatch]:
    """Group batches into engine updates of ``update_interval`` batches each.

    Pose ``X0`` sits at the start with a prior; batch ``k`` adds pose
    ``X{k+1}``. A trailing group shorter than the interval is still returned
    so the final poses are estimated.
    """
    model = model or PlazaModel()
    if update_interval <= 0:
        raise ValueError("update_interval must be positive")
    updates: list[StepBatch] = []
    count = 0
    seen: set[str] = set()

    def name():
        nonlocal count
        count += 1
        return f"f{count}"

    variables = [VariableSpec("X0", POSE)]
    factors: list[Factor] = [PriorPose(name(), "X0", model.start, model.prior_cov)]
    for k, b in enumerate(batches):
        xi, xj = pose_id(k), pose_id(k + 1)
        variables.append(VariableSpec(xj, POSE))
        z = geo.log_map(b.transform)
        factors.append(Odometry(name(), xi, xj, z, model.odometry_cov))
        for _, lmk, r in b.ranges:
            if lmk not in seen:
                seen.add(lmk)
                variables.append(VariableSpec(lmk, POINT))
            factors.append(Range(name(), xj, lmk, r, model.range_sigma))
        if (k + 1) % update_interval == 0:
            updates.append(StepBatch(len(updates), variables, factors))
            variables, factors = [], []
    if factors or variables:
        updates.append(StepBatch(len(updates), variables, factors))
    return updates


def chronological_ordering(variables: Iterable[str]) -> list[str]:
    """Poses by time index, then landmarks in first-seen order.

    With range-only landmarks this keeps every pose sampled from its
    predecessor, so no clique ever needs a pose drawn from a landmark.
    """
    variables = list(variables)
    poses = sorted((v for v in variables if v.startswith("X") and v[1:].isdigit()), key=lambda v: int(v[1:]))
    rest = [v for v in variables if v not in set(poses)]
    return poses + rest


def synthetic_plaza(num_batches: int = 30, batch_size: int = 10, seed: int = 0, noise: bool = False,
                    idle_every: int = 4, range_every: int = 1, num_landmarks: int = 4,
                    odometry_std=(0.01, 0.002), range_std: float = 0.1):
    """Odometry, range and ground-truth streams for a rounded-rectangle drive.

    Every ``idle_every``-th time step the vehicle stands still, producing an
    increment below the decimation thresholds. Returns
    ``(odometry, ranges, ground_truth)`` row lists; ground truth holds the
    pose after every admitted increment plus the start pose at ``T = 0``.
    """
    rng = np.random.default_rng(seed)
    pose = np.zeros(3)
    t = 0.0
    odom, gt = [], [(0.0, 0.0, 0.0, 0.0)]
    turn = 2 * math.pi / (num_batches * batch_size)
    landmarks = {f"{i + 1}": np.array([12.0 * math.cos(2 * math.pi * i / num_landmarks) + 6.0,
                                       12.0 * math.sin(2 * math.pi * i / num_landmarks) + 6.0])
                 for i in range(num_landmarks)}
    ranges = []
    admitted = 0
    while admitted < num_batches * batch_size:
        t += 1.0
        if idle_every and int(t) % idle_every == 0:
            odom.append((t, 0.0, 0.0))
            continue
        dx, dth = 0.4, turn
        pose = geo.compose(pose, increment_pose(dx, dth))
        admitted += 1
        gt.append((t, float(pose[0]), float(pose[1]), float(pose[2])))
        if noise:
            dx += odometry_std[0] * rng.standard_normal()
            dth += odometry_std[1] * rng.standard_normal()
        odom.append((t, dx, dth))
        if admitted % batch_size == 0 and (admitted // batch_size) % range_every == 0:
            k = admitted // batch_size
            lmk = f"{(k % num_landmarks) + 1}"
            r = float(geo.range_to(pose, landmarks[lmk]))
            if noise:
                r += range_std * rng.standard_normal()
            ranges.append((t, f"L{lmk}", r))
    return odom, ranges, gt
