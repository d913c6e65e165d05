"""Lower-triangular normalizing flows.

A flow maps a target vector ``x`` to a standard-normal ``y`` through

1. a frozen triangular whitening ``a = L^-1 (x - mu)`` fitted to the training
   samples (angular columns are first wrapped around their circular mean), and
2. one learned row per dimension: ``y_d = T_d(a_d; a_1..a_{d-1})``.

Rows are either rational-quadratic splines whose knots come from a small
fully connected conditioner network (one network per row), or affine maps
whose shift is linear in the prefix and whose scale is constant. The affine
variant spans exactly the Gaussian family.

Training maximises the Monte-Carlo log-likelihood
``mean_k [log q(T(x_k)) + log |T'(x_k)|]`` with Adam.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import splines
from .geometry import wrap_angle
from .samples import SampleBlock

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
STD_FLOOR = 1e-8


@dataclass
class FlowConfig:
    num_bins: int = 6
    hidden: tuple[int, ...] = (32, 32)
    bound: float = 5.0
    epochs: int = 400
    learning_rate: float = 2e-3
    final_lr_fraction: float = 0.1
    batch_size: int = 128
    patience: int | None = 20
    min_improvement: float = 1e-3
    affine_only: bool = False
    whiten: str = "cholesky"
    min_samples: int = 2
    validation_fraction: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.whiten not in ("cholesky", "diagonal"):
            raise ValueError(f"unknown whitening {self.whiten!r}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")


# --------------------------------------------------------------------------
# whitening


class Whitening:
    """Triangular affine pre-map ``a = L^-1 (wrap(x - center) - mean)``."""

    def __init__(self, center, mean, chol, circular, fixed=None):
        self.center = np.asarray(center, dtype=float)
        self.mean = np.asarray(mean, dtype=float)
        self.chol = np.asarray(chol, dtype=float)
        self.circular = np.asarray(circular, dtype=bool)
        self.chol_inv = np.linalg.inv(self.chol) if self.chol.size else self.chol.copy()
        self.chol_inv = np.tril(self.chol_inv)
        # columns that were constant in the training data are reproduced exactly
        self.fixed = np.zeros(len(self.mean), bool) if fixed is None else np.asarray(fixed, dtype=bool)

    @classmethod
    def identity(cls, dim: int, circular=None) -> "Whitening":
        circular = np.zeros(dim, bool) if circular is None else circular
        return cls(np.zeros(dim), np.zeros(dim), np.eye(dim), circular)

    @classmethod
    def fit(cls, x: np.ndarray, circular, mode: str = "cholesky") -> tuple["Whitening", list[str]]:
        circular = np.asarray(circular, dtype=bool)
        warnings = []
        center = np.zeros(x.shape[1])
        if circular.any():
            ang = x[:, circular]
            center[circular] = np.arctan2(np.sin(ang).mean(0), np.cos(ang).mean(0))
        xc = _wrap_columns(x - center, circular)
        mean = xc.mean(0)
        std = xc.std(0)
        low = std < STD_FLOOR
        if low.any():
            warnings.append(f"degenerate columns {np.flatnonzero(low).tolist()} held constant")
            std = np.where(low, STD_FLOOR, std)
        if mode == "diagonal":
            chol = np.diag(std)
        else:
            z = np.where(low, 0.0, (xc - mean) / std)
            corr = z.T @ z / len(z)
            corr[low, :] = 0.0
            corr[:, low] = 0.0
            corr[low, low] = 1.0
            jitter = 0.0
            for _ in range(12):
                try:
                    c = np.linalg.cholesky(corr + jitter * np.eye(len(corr)))
                    break
                except np.linalg.LinAlgError:
                    jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            else:
                c = np.eye(len(corr))
                warnings.append("correlation not factorizable; fell back to diagonal whitening")
            if jitter:
                warnings.append(f"correlation jitter {jitter:g}")
            chol = std[:, None] * c
        return cls(center, mean, chol, circular, low), warnings

    @property
    def logdet(self) -> float:
        return -float(np.sum(np.log(np.diag(self.chol))))

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Whiten the leading ``x.shape[1]`` columns (triangularity makes prefixes valid)."""
        m = x.shape[1]
        xc = _wrap_columns(x - self.center[:m], self.circular[:m]) - self.mean[:m]
        return xc @ self.chol_inv[:m, :m].T

    def untransform(self, a: np.ndarray) -> np.ndarray:
        m = a.shape[1]
        xc = a @ self.chol[:m, :m].T + self.mean[:m]
        fixed = self.fixed[:m]
        if fixed.any():
            xc[:, fixed] = self.mean[:m][fixed]
        return _wrap_columns(xc + self.center[:m], self.circular[:m])

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "mean": self.mean.tolist(),
                "chol": self.chol.tolist(), "circular": self.circular.tolist(), "fixed": self.fixed.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Whitening":
        dim = len(d["mean"])
        return cls(d["center"], d["mean"], np.asarray(d["chol"], float).reshape(dim, dim), d["circular"],
                   d.get("fixed"))


def _wrap_columns(x, circular):
    if not np.any(circular):
        return x
    x = np.array(x, dtype=float, copy=True)
    x[:, circular] = wrap_angle(x[:, circular])
    return x


# --------------------------------------------------------------------------
# rows


class SplineRows:
    """Spline rows with one fully connected conditioner per dimension.

    All ``D`` conditioners are evaluated together: weights are stacked along
    a leading row axis and the first layer is masked so that row ``d`` only
    sees inputs ``< d``.
    """

    kind = "spline"

    def __init__(self, dim: int, num_bins: int, hidden, bound: float, params: dict | None = None, rng=None):
        self.dim = dim
        self.num_bins = num_bins
        self.hidden = tuple(hidden)
        self.bound = float(bound)
        self.mask = np.tril(np.ones((dim, dim)), k=-1)[:, :, None]
        self.params = params if params is not None else self._init_params(rng)

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    def _init_params(self, rng) -> dict:
        rng = np.random.default_rng(rng)
        widths = (self.dim,) + self.hidden
        params = {}
        for i in range(len(self.hidden)):
            fan_in = max(widths[i], 1)
            params[f"W{i}"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (self.dim, widths[i], widths[i + 1]))
            params[f"b{i}"] = np.zeros((self.dim, widths[i + 1]))
        last = len(self.hidden)
        p = splines.num_raw_params(self.num_bins)
        # zero output layer: every row starts as the identity spline
        params[f"W{last}"] = np.zeros((self.dim, widths[-1], p))
        params[f"b{last}"] = np.tile(splines.identity_raw(self.num_bins), (self.dim, 1))
        return params

    def _weight(self, i):
        w = self.params[f"W{i}"]
        return w * self.mask if i == 0 else w

    def conditioner(self, a: np.ndarray, keep: bool = False):
        """Raw spline parameters for every row, shape ``(D, n, 3K-1)``."""
        h = a[None, :, :]
        cache = [h]
        for i in range(self.num_layers):
            z = np.matmul(h, self._weight(i)) + self.params[f"b{i}"][:, None, :]
            if i < self.num_layers - 1:
                cache.append(z)
                h = np.tanh(z)
                cache.append(h)
            else:
                h = z
        return (h, cache) if keep else h

    def row_conditioner(self, d: int, prefix: np.ndarray) -> np.ndarray:
        """Raw parameters of row ``d`` given ``prefix`` of shape ``(n, d)``."""
        h = prefix
        for i in range(self.num_layers):
            w = self.params[f"W{i}"][d]
            if i == 0:
                w = w[:d]
            z = h @ w + self.params[f"b{i}"][d]
            h = np.tanh(z) if i < self.num_layers - 1 else z
        return h

    def forward(self, a: np.ndarray):
        raw = self.conditioner(a).transpose(1, 0, 2)
        return splines.forward(a, raw, self.num_bins, self.bound)

    def inverse_row(self, d: int, prefix: np.ndarray, y: np.ndarray) -> np.ndarray:
        raw = self.row_conditioner(d, prefix)
        return splines.inverse(y, raw, self.num_bins, self.bound)

    def forward_row(self, d: int, prefix: np.ndarray, v: np.ndarray):
        raw = self.row_conditioner(d, prefix)
        return splines.forward(v, raw, self.num_bins, self.bound)

    def objective(self, a: np.ndarray) -> float:
        """Mean log-likelihood of whitened rows ``a`` (no gradient)."""
        y, logdet = self.forward(a)
        return float(np.mean(np.sum(-0.5 * y * y + logdet, axis=1))) - 0.5 * self.dim * LOG_2PI

    def objective_and_grad(self, a: np.ndarray):
        n = a.shape[0]
        raw, cache = self.conditioner(a, keep=True)
        y, logdet, backward = splines.forward(a, raw.transpose(1, 0, 2), self.num_bins, self.bound,
                                              with_grad=True)
        objective = float(np.sum(-0.5 * y * y + logdet) / n) - 0.5 * self.dim * LOG_2PI
        g_raw = backward(-y / n, 1.0 / n)
        return objective, self._backward(g_raw.transpose(1, 0, 2), cache)

    def _backward(self, g: np.ndarray, cache) -> dict:
        grads = {}
        top = self.num_layers - 1
        for i in range(top, -1, -1):
            h_in = cache[2 * i] if i > 0 else cache[0]
            if i == 0:
                gw = np.matmul(np.broadcast_to(h_in, (self.dim,) + h_in.shape[1:]).transpose(0, 2, 1), g)
                grads["W0"] = gw * self.mask
            else:
                grads[f"W{i}"] = np.matmul(h_in.transpose(0, 2, 1), g)
            grads[f"b{i}"] = g.sum(axis=1)
            if i > 0:
                gh = np.matmul(g, self.params[f"W{i}"].transpose(0, 2, 1))
                g = gh * (1.0 - cache[2 * i] ** 2)
        return grads

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_bins": self.num_bins, "hidden": list(self.hidden),
                "bound": self.bound, "params": {k: v.tolist() for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, dim: int, d: dict) -> "SplineRows":
        params = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        hidden = tuple(d["hidden"])
        widths = (dim,) + hidden
        p = splines.num_raw_params(d["num_bins"])
        for i in range(len(hidden) + 1):
            out = widths[i + 1] if i < len(hidden) else p
            params[f"W{i}"] = params[f"W{i}"].reshape(dim, widths[i], out)
            params[f"b{i}"] = params[f"b{i}"].reshape(dim, out)
        return cls(dim, d["num_bins"], hidden, d["bound"], params=params)


class AffineRows:
    """``y = (strict_lower(S) + diag(exp(s))) a + b``: the Gaussian family."""

    kind = "affine"

    def __init__(self, dim: int, params: dict | None = None):
        self.dim = dim
        self.mask = np.tril(np.ones((dim, dim)), k=-1)
        if params is None:
            params = {"lower": np.zeros((dim, dim)), "log_scale": np.zeros(dim), "shift": np.zeros(dim)}
        self.params = params

    def matrix(self) -> np.ndarray:
        return self.params["lower"] * self.mask + np.diag(np.exp(self.params["log_scale"]))

    def forward(self, a: np.ndarray):
        y = a @ self.matrix().T + self.params["shift"]
        return y, np.broadcast_to(self.params["log_scale"], y.shape).copy()

    def forward_row(self, d: int, prefix: np.ndarray, v: np.ndarray):
        p = self.params
        y = np.exp(p["log_scale"][d]) * v + prefix @ (p["lower"][d, :d]) + p["shift"][d]
        return y, np.full_like(y, p["log_scale"][d])

    def inverse_row(self, d: int, prefix: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.params
        return (y - p["shift"][d] - prefix @ p["lower"][d, :d]) / np.exp(p["log_scale"][d])

    def objective(self, a: np.ndarray) -> float:
        """Mean log-likelihood of whitened rows ``a`` (no gradient)."""
        y, logdet = self.forward(a)
        return float(np.mean(np.sum(-0.5 * y * y + logdet, axis=1))) - 0.5 * self.dim * LOG_2PI

    def objective_and_grad(self, a: np.ndarray):
        n = a.shape[0]
        y, logdet = self.forward(a)
        objective = float(np.sum(-0.5 * y * y + logdet) / n) - 0.5 * self.dim * LOG_2PI
        gy = -y / n
        grads = {
            "lower": (gy.T @ a) * self.mask,
            "log_scale": np.sum(gy * a, axis=0) * np.exp(self.params["log_scale"]) + 1.0,
            "shift": gy.sum(axis=0),
        }
        return objective, grads

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": {k: v.tolist() for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, dim: int, d: dict) -> "AffineRows":
        p = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        p["lower"] = p["lower"].reshape(dim, dim)
        return cls(dim, p)


# --------------------------------------------------------------------------
# flow


@dataclass
class TrainingReport:
    history: list[float] = field(default_factory=list)
    final_objective: float = float("nan")
    epochs_run: int = 0
    validation_objective: float = float("nan")
    warnings: list[str] = field(default_factory=list)


class TriangularFlow:
    """Whitening followed by triangular rows; maps targets to N(0, I)."""

    def __init__(self, whitening: Whitening, rows, report: TrainingReport | None = None):
        self.whitening = whitening
        self.rows = rows
        self.dim = rows.dim
        self.report = report or TrainingReport()

    @property
    def circular(self) -> np.ndarray:
        return self.whitening.circular

    @classmethod
    def identity(cls, dim: int, num_bins: int = 6, hidden=(8,), bound: float = 5.0,
                 affine: bool = False, circular=None, rng=None) -> "TriangularFlow":
        rows = AffineRows(dim) if affine else SplineRows(dim, num_bins, hidden, bound, rng=rng)
        return cls(Whitening.identity(dim, circular), rows)

    @classmethod
    def standardization(cls, mean, std, **kw) -> "TriangularFlow":
        mean = np.asarray(mean, float)
        flow = cls.identity(len(mean), **kw)
        flow.whitening = Whitening(np.zeros(len(mean)), mean, np.diag(np.asarray(std, float)),
                                   flow.whitening.circular)
        return flow

    # -- evaluation ---------------------------------------------------------

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if not np.all(np.isfinite(x)):
            raise ValueError("flow input contains non-finite values")
        return x, single

    def forward(self, x):
        """Return ``(y, logdet)`` with ``logdet = log |dT/dx|``."""
        x, single = self._check(x)
        a = self.whitening.transform(x)
        y, row_logdet = self.rows.forward(a)
        logdet = row_logdet.sum(axis=1) + self.whitening.logdet
        return (y[0], float(logdet[0])) if single else (y, logdet)

    def row_log_derivatives(self, x) -> np.ndarray:
        """Per-row ``log dT_d/dx_d`` computed one row at a time."""
        x, _ = self._check(x)
        a = self.whitening.transform(x)
        diag = np.log(np.diag(self.whitening.chol_inv))
        out = np.empty_like(a)
        for d in range(self.dim):
            _, ld = self.rows.forward_row(d, a[:, :d], a[:, d])
            out[:, d] = ld + diag[d]
        return out

    def log_prob(self, x):
        y, logdet = self.forward(x)
        y = np.atleast_2d(y)
        lp = -0.5 * np.sum(y * y, axis=1) - 0.5 * self.dim * LOG_2PI + np.atleast_1d(logdet)
        return float(lp[0]) if np.ndim(x) == 1 else lp

    def _invert_rows(self, a: np.ndarray, y: np.ndarray, start: int, stop: int) -> np.ndarray:
        for d in range(start, stop):
            a[:, d] = self.rows.inverse_row(d, a[:, :d], y[:, d - start])
        return a

    def inverse(self, y):
        y, single = self._check(y)
        a = np.zeros_like(y)
        self._invert_rows(a, y, 0, self.dim)
        x = self.whitening.untransform(a)
        return x[0] if single else x

    def conditional_sample(self, prefix, rng, n: int | None = None, stop: int | None = None) -> np.ndarray:
        """Sample dims ``m..stop`` given fixed values of dims ``0..m``.

        ``prefix`` is ``(m,)`` (shared by all draws, then ``n`` is required)
        or ``(n, m)`` (row ``i`` conditions draw ``i``).
        """
        rng = np.random.default_rng(rng)
        prefix = np.asarray(prefix, dtype=float)
        if prefix.ndim == 1:
            if n is None:
                raise ValueError("n is required with a shared prefix")
            prefix = np.broadcast_to(prefix, (n, prefix.shape[0]))
        n, m = prefix.shape
        stop = self.dim if stop is None else stop
        if not m <= stop <= self.dim:
            raise ValueError(f"cannot sample dims {m}..{stop} of a {self.dim}-dim flow")
        y = rng.standard_normal((n, stop - m))
        return self.sample_from_reference(prefix, y)

    def sample_from_reference(self, prefix: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Deterministic part of :meth:`conditional_sample` for given reference draws."""
        n, m = prefix.shape
        stop = m + y.shape[1]
        a = np.zeros((n, stop))
        if m:
            a[:, :m] = self.whitening.transform(prefix)
        self._invert_rows(a, y, m, stop)
        x = self.whitening.untransform(a)
        return x[:, m:]

    def sample(self, n: int, rng) -> np.ndarray:
        return self.conditional_sample(np.zeros(0), rng, n=n)

    def conditional_log_prob(self, prefix, x, stop: int | None = None) -> np.ndarray:
        """log density of dims ``m..stop`` given dims ``0..m``."""
        prefix = np.atleast_2d(np.asarray(prefix, float))
        x = np.atleast_2d(np.asarray(x, float))
        if prefix.shape[0] == 1 and x.shape[0] > 1:
            prefix = np.broadcast_to(prefix, (x.shape[0], prefix.shape[1]))
        full = np.hstack([prefix, x])
        m, stop = prefix.shape[1], full.shape[1]
        a = self.whitening.transform(full)
        diag = np.log(np.diag(self.whitening.chol_inv))
        out = np.zeros(full.shape[0])
        for d in range(m, stop):
            y, ld = self.rows.forward_row(d, a[:, :d], a[:, d])
            out += -0.5 * y * y - 0.5 * LOG_2PI + ld + diag[d]
        return out

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {"format": "triangular-flow/1", "dim": self.dim,
                "whitening": self.whitening.to_dict(), "rows": self.rows.to_dict(),
                "final_objective": self.report.final_objective}

    @classmethod
    def from_dict(cls, d: dict) -> "TriangularFlow":
        dim = d["dim"]
        rows_d = d["rows"]
        rows = AffineRows.from_dict(dim, rows_d) if rows_d["kind"] == "affine" else SplineRows.from_dict(dim, rows_d)
        flow = cls(Whitening.from_dict(d["whitening"]), rows)
        flow.report.final_objective = d.get("final_objective", float("nan"))
        return flow

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "TriangularFlow":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "TriangularFlow":
        with open(path) as fh:
            return cls.loads(fh.read())


# --------------------------------------------------------------------------
# training


def objective_and_gradient(flow: TriangularFlow, batch: np.ndarray):
    """Mean log-likelihood of ``batch`` under ``flow`` and its gradient.

    The gradient covers the row parameters only; whitening is frozen.
    """
    a = flow.whitening.transform(np.atleast_2d(batch))
    objective, grads = flow.rows.objective_and_grad(a)
    return objective + flow.whitening.logdet, grads


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def ascend(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] += lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(samples, config: FlowConfig | None = None, rng=None, circular=None) -> TriangularFlow:
    """Fit a triangular flow to ``samples`` (array or :class:`SampleBlock`)."""
    config = config or FlowConfig()
    rng = np.random.default_rng(rng)
    if isinstance(samples, SampleBlock):
        circular = samples.circular if circular is None else circular
        x = samples.values
    else:
        x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, dim = x.shape
    if n < max(config.min_samples, 2):
        raise ValueError(f"need at least {max(config.min_samples, 2)} samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("training samples contain non-finite values")
    circular = np.zeros(dim, bool) if circular is None else np.asarray(circular, bool)

    whitening, warnings = Whitening.fit(x, circular, config.whiten)
    if config.affine_only:
        rows = AffineRows(dim)
    else:
        rows = SplineRows(dim, config.num_bins, config.hidden, config.bound, rng=rng)
    flow = TriangularFlow(whitening, rows)
    report = flow.report
    report.warnings.extend(warnings)
    for w in warnings:
        # constant columns are expected with noiseless models
        (log.debug if w.startswith("degenerate") else log.warning)(w)

    a_all = whitening.transform(x)
    n_val = int(round(config.validation_fraction * n)) if n >= 10 else 0
    perm = rng.permutation(n)
    a_val, a_fit = a_all[perm[:n_val]], a_all[perm[n_val:]]
    n_fit = len(a_fit)
    # epochs are scored on held-out rows if any, else on the whole fitting set
    a_score = a_val if n_val else a_fit
    batch = min(config.batch_size, n_fit)
    steps_per_epoch = max(1, n_fit // batch)
    total = config.epochs * steps_per_epoch
    frozen = np.flatnonzero(whitening.fixed)
    opt = Adam(rows.params, config.learning_rate)
    # the initial rows (identity after whitening: the Gaussian fit) compete too
    best = rows.objective(a_score) + whitening.logdet
    best_params = {k: v.copy() for k, v in rows.params.items()}
    stale = 0
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_fit)
        acc = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * batch:(b + 1) * batch]
            obj, grads = rows.objective_and_grad(a_fit[idx])
            if frozen.size:
                # constant columns carry no density to learn
                for g in grads.values():
                    g[frozen] = 0.0
            frac = step / max(total - 1, 1)
            lr = config.learning_rate * (config.final_lr_fraction
                                         + (1 - config.final_lr_fraction) * 0.5 * (1 + math.cos(math.pi * frac)))
            opt.ascend(rows.params, grads, lr)
            acc += obj
            step += 1
        score = rows.objective(a_score) + whitening.logdet
        report.history.append(score)
        if score > best + config.min_improvement:
            best = score
            best_params = {k: v.copy() for k, v in rows.params.items()}
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    rows.params.update(best_params)
    report.epochs_run = len(report.history)
    report.final_objective = float(rows.objective(a_all) + whitening.logdet)
    report.validation_objective = float(best) if n_val else float("nan")
    return flow


def config_dict(config: FlowConfig) -> dict:
    return asdict(config)
