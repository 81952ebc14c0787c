"""Unbiased multi-index Monte Carlo with recycled coarse solutions.

Each sample draws a random multi-index ``L`` from a product-geometric law,
solves the PDE once with the F-cycle on grid ``(p0 + L1, q0 + L2)``, reads the
quantity of interest off every grid of the box ``0 <= l <= L`` and forms

    Y = sum_{0 <= l <= L} dQ_l / p_l,

where ``dQ_l`` is the tensor-product difference and ``p_l = P(L >= l)``.
``E[Y]`` is the limit ``E[Q]`` with no discretisation bias, so the stopping
rule only involves the sampling variance.

Samples are generated from the pure stream ``stream(seed, n)``.  The index
law is refitted between fixed-size batches, and every sample records the law
it was drawn from, so the outcome does not depend on the number of worker
threads.
"""

from __future__ import annotations

import itertools
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .field import FieldRealization, HyperPrior, coarsen_realization, realize, stream
from .grid import GridLevel
from .msg import CycleConfig, MsgHierarchy, msg_f_cycle
from .pde import QoISpec, assemble, direct_solve, rhs

SCHEMA_VERSION = 1
LN2 = math.log(2.0)
# Initial rates correspond to beta = 4 and gamma = 1 in each direction.
DEFAULT_RATE = 0.5 * LN2 * (1.0 + 4.0)

MultiIndex = tuple[int, ...]


class DegeneracyWarning(UserWarning):
    """Fitted rates leave no window with finite variance and finite expected cost."""


def as_index(l) -> MultiIndex:
    t = tuple(int(v) for v in l)
    if any(v < 0 for v in t):
        raise ValueError(f"multi-index components must be nonnegative, got {t}")
    return t


def box(L: MultiIndex):
    """All multi-indices ``0 <= l <= L`` in lexicographic order."""
    return itertools.product(*(range(n + 1) for n in L))


# --------------------------------------------------------------------------
# multi-index differences
# --------------------------------------------------------------------------


def delta_tensor(qvals: dict) -> dict:
    """Tensor-product differences ``dQ_l = sum_u (-1)^|u| Q_{l - e_u}`` on a box.

    Terms with a negative component are omitted, so ``dQ_0 = Q_0`` and the
    differences telescope: summing ``dQ`` over ``0 <= l <= L`` gives ``Q_L``.
    """
    if not qvals:
        raise ValueError("no values given")
    keys = [as_index(k) for k in qvals]
    d = len(keys[0])
    L = tuple(max(k[j] for k in keys) for j in range(d))
    out = {}
    for l in box(L):
        s = 0.0
        for u in itertools.product((0, 1), repeat=d):
            k = tuple(a - b for a, b in zip(l, u))
            if min(k) < 0:
                continue
            if k not in qvals:
                raise KeyError(f"missing value for index {k}")
            s += (-1) ** sum(u) * qvals[k]
        out[l] = s
    return out


# --------------------------------------------------------------------------
# index distribution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexPMF:
    """Law of the random truncation index ``L``.

    In ``model`` mode the components are independent geometric variables,
    ``P(L_j = k) = (1 - exp(-r_j)) exp(-r_j k)``, so that
    ``P(L >= l) = prod_j exp(-r_j l_j)``.  An infinite rate puts all mass of
    that component at zero.

    In ``empirical`` mode ``table`` holds a normalised mass over a finite box
    and the law is the mixture ``(1 - tail_weight) * table + tail_weight *
    model``; the model part keeps the mass positive everywhere.
    """

    rates: tuple[float, ...]
    mode: str = "model"
    table: np.ndarray | None = field(default=None, compare=False)
    tail_weight: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if any(not r > 0 for r in self.rates):
            raise ValueError(f"rates must be positive, got {self.rates}")
        if self.mode not in ("model", "empirical"):
            raise ValueError(f"unknown pmf mode {self.mode!r}")
        if self.mode == "empirical":
            t = np.asarray(self.table, dtype=np.float64)
            if t.ndim != self.d or np.any(t < 0) or not math.isclose(t.sum(), 1.0, rel_tol=1e-12):
                raise ValueError("empirical table must be a normalised nonnegative array with one axis per rate")
            if not 0 < self.tail_weight <= 1:
                raise ValueError("tail_weight must lie in (0, 1]")
            object.__setattr__(self, "table", t)

    @classmethod
    def default(cls, d: int = 2) -> IndexPMF:
        return cls((DEFAULT_RATE,) * d)

    @property
    def d(self) -> int:
        return len(self.rates)

    def _model_mass(self, l) -> float:
        m = 1.0
        for r, k in zip(self.rates, l):
            if math.isinf(r):
                m *= 1.0 if k == 0 else 0.0
            else:
                m *= -math.expm1(-r) * math.exp(-r * k)
        return m

    def _model_tail(self, l) -> float:
        t = 1.0
        for r, k in zip(self.rates, l):
            if k > 0:
                t *= math.exp(-r * k)
        return t

    def mass(self, l) -> float:
        l = as_index(l)
        if self.mode == "model":
            return self._model_mass(l)
        m = self.tail_weight * self._model_mass(l)
        if all(k < n for k, n in zip(l, self.table.shape)):
            m += (1.0 - self.tail_weight) * self.table[l]
        return m

    def tail(self, l) -> float:
        l = as_index(l)
        if len(l) != self.d:
            raise ValueError(f"index {l} has the wrong dimension for a {self.d}-d pmf")
        t = self._model_tail(l)
        if self.mode == "model":
            return t
        inner = self.table[tuple(slice(k, None) for k in l)].sum()
        return (1.0 - self.tail_weight) * float(inner) + self.tail_weight * t

    def sample(self, rng: np.random.Generator) -> MultiIndex:
        if self.mode == "empirical" and rng.random() >= self.tail_weight:
            flat = rng.choice(self.table.size, p=self.table.ravel())
            return tuple(int(v) for v in np.unravel_index(flat, self.table.shape))
        out = []
        for r in self.rates:
            u = 1.0 - rng.random()  # in (0, 1]
            out.append(0 if math.isinf(r) else int(math.floor(-math.log(u) / r)))
        return tuple(out)

    def to_json(self) -> dict:
        out = {"mode": self.mode, "rates": list(self.rates)}
        if self.mode == "empirical":
            out["table"] = self.table.tolist()
            out["tail_weight"] = self.tail_weight
        return out


def tail_prob(pmf: IndexPMF, l) -> float:
    """``p_l = P(L >= l)`` componentwise; ``p_0 = 1``."""
    return pmf.tail(l)


def sample_index(pmf: IndexPMF, rng: np.random.Generator) -> MultiIndex:
    """Inverse-CDF draw of ``L`` (per component in model mode)."""
    return pmf.sample(rng)


# --------------------------------------------------------------------------
# problems
# --------------------------------------------------------------------------


@dataclass
class SampleResult:
    """Quantities of interest on every index of a box, plus the cost of producing them."""

    qvals: dict
    wall: float = 0.0


class Problem(Protocol):
    """A family of approximations ``Q_l`` driven by one random input per sample."""

    d: int

    def sample(self, L: MultiIndex, rng: np.random.Generator) -> SampleResult:
        """Values ``Q_l`` for every ``0 <= l <= L`` from a single random input."""

    def cost(self, l: MultiIndex) -> float:
        """Model cost of one solve on index ``l``."""

    def feasible(self, L: MultiIndex) -> bool:
        """Whether index ``L`` can be solved."""


def clamp_index(L: MultiIndex, feasible) -> tuple[MultiIndex, bool]:
    """Shrink the largest component of ``L`` until ``feasible(L)``; report whether it changed."""
    L = list(L)
    clamped = False
    while not feasible(tuple(L)):
        j = int(np.argmax(L))
        if L[j] == 0:
            raise ValueError("the zero index itself is infeasible")
        L[j] -= 1
        clamped = True
    return tuple(L), clamped


@dataclass
class PDEProblem:
    """The lognormal diffusion problem with one F-cycle solve per sample.

    ``base = (p0, q0)`` is the grid of index ``(0, 0)``; it also sets the
    padding of the circulant embedding, so every sample's field has the same
    law regardless of ``L``.  ``max_level`` caps ``p + q`` of the finest grid.
    """

    prior: HyperPrior
    qoi: QoISpec
    base: tuple[int, int] = (4, 4)
    solver: CycleConfig = field(default_factory=CycleConfig)
    max_level: int = 14
    source: float = 1.0
    mean: str = "geometric"
    d: int = 2

    def __post_init__(self):
        need = self.qoi.min_exponent()
        if min(self.base) < need:
            raise ValueError(f"the {self.qoi.kind} quantity needs grids with exponent >= {need}, base is {self.base}")
        if sum(self.base) > self.max_level:
            raise ValueError(f"base grid {self.base} exceeds the cap p + q <= {self.max_level}")

    def level(self, l: MultiIndex) -> GridLevel:
        return GridLevel(self.base[0] + l[0], self.base[1] + l[1])

    def cost(self, l: MultiIndex) -> float:
        lv = self.level(l)
        return float(2 ** (lv.p + lv.q))

    def feasible(self, L: MultiIndex) -> bool:
        lv = self.level(L)
        return lv.p + lv.q <= self.max_level

    def draw_field(self, L: MultiIndex, rng: np.random.Generator) -> FieldRealization:
        return realize(self.prior, self.level(L), rng, base=self.base)

    def evaluate(self, solutions, f: FieldRealization, L: MultiIndex) -> dict:
        """Quantity of interest on every grid of the box from per-grid solutions."""
        out = {}
        for l in box(L):
            lv = self.level(l)
            fl = coarsen_realization(f, lv) if self.qoi.kind == "flux" else None
            out[l] = self.qoi(solutions[lv.p, lv.q], fl)
        return out

    def solve(self, f: FieldRealization):
        h = MsgHierarchy(f, self.mean)
        return msg_f_cycle(h, rhs(f.level, self.source), self.solver)

    def sample(self, L: MultiIndex, rng: np.random.Generator) -> SampleResult:
        t0 = time.perf_counter()
        f = self.draw_field(L, rng)
        res = self.solve(f)
        q = self.evaluate(res.solutions, f, L)
        return SampleResult(q, time.perf_counter() - t0)


def independent_qvals(problem: PDEProblem, f: FieldRealization, L: MultiIndex) -> dict:
    """Reference values from a separate sparse direct solve on every grid of the box."""
    sols = {}
    for l in box(L):
        lv = problem.level(l)
        fl = coarsen_realization(f, lv)
        sols[lv.p, lv.q] = direct_solve(assemble(fl, problem.mean), rhs(lv, problem.source))
    return problem.evaluate(sols, f, L)


@dataclass
class SyntheticProblem:
    """Closed-form family with known limit, for checking the estimator bookkeeping.

    ``Q_l = m + X_0 + prod_j (1 + 2^(-b_j l_j / 2) X_j)`` with independent
    standard normal ``X``.  Hence ``E[Q_l] -> m + 1`` and the variance of the
    mixed differences decays like ``prod_j 2^(-b_j l_j)``.  Cost is
    ``prod_j 2^(g_j l_j)``.
    """

    mean_offset: float = 0.0
    b: tuple[float, ...] = (4.0, 4.0)
    g: tuple[float, ...] = (1.0, 1.0)
    max_level: int = 60

    @property
    def d(self) -> int:
        return len(self.b)

    @property
    def exact(self) -> float:
        return self.mean_offset + 1.0

    def cost(self, l: MultiIndex) -> float:
        return float(np.prod([2.0 ** (g * k) for g, k in zip(self.g, l)]))

    def feasible(self, L: MultiIndex) -> bool:
        return sum(L) <= self.max_level

    def sample(self, L: MultiIndex, rng: np.random.Generator) -> SampleResult:
        x = rng.standard_normal(self.d + 1)
        out = {}
        for l in box(L):
            v = 1.0
            for j, k in enumerate(l):
                v *= 1.0 + 2.0 ** (-0.5 * self.b[j] * k) * x[j + 1]
            out[l] = self.mean_offset + x[0] + v
        return SampleResult(out)


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


@dataclass
class _Acc:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add(self, x: float):
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    @property
    def var(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else math.nan


@dataclass
class RateFit:
    """Per-direction rates with their standard errors; ``None`` where a fit was impossible."""

    alpha: tuple | None
    beta: tuple | None
    gamma: tuple | None
    stderr: dict = field(default_factory=dict)

    @property
    def available(self) -> bool:
        return self.alpha is not None and self.beta is not None and self.gamma is not None

    def to_json(self) -> dict:
        return {
            "alpha": list(self.alpha) if self.alpha else None,
            "beta": list(self.beta) if self.beta else None,
            "gamma": list(self.gamma) if self.gamma else None,
            "stderr": {k: (list(v) if v is not None else None) for k, v in self.stderr.items()},
        }


class IndexStats:
    """Running count, mean and variance of ``dQ_l`` per index and the model cost of each index."""

    def __init__(self, cost_model=None):
        self._acc: dict[MultiIndex, _Acc] = {}
        self._cost: dict[MultiIndex, float] = {}
        self.cost_model = cost_model

    def add(self, l: MultiIndex, dq: float):
        self._acc.setdefault(l, _Acc()).add(dq)
        if self.cost_model is not None and l not in self._cost:
            self._cost[l] = self.cost_model(l)

    def set(self, l: MultiIndex, count: int, mean: float, var: float, cost: float):
        """Install summary statistics directly (synthetic studies)."""
        a = _Acc(int(count), float(mean), float(var) * (count - 1) if count > 1 else 0.0)
        self._acc[as_index(l)] = a
        self._cost[as_index(l)] = float(cost)

    def indices(self) -> list[MultiIndex]:
        return sorted(self._acc)

    def count(self, l) -> int:
        a = self._acc.get(tuple(l))
        return a.count if a else 0

    def mean(self, l) -> float:
        return self._acc[tuple(l)].mean

    def var(self, l) -> float:
        return self._acc[tuple(l)].var

    def cost(self, l) -> float:
        return self._cost[tuple(l)]

    def to_json(self) -> list:
        out = []
        for l in self.indices():
            a = self._acc[l]
            out.append(
                {
                    "index": list(l),
                    "count": a.count,
                    "mean": a.mean,
                    "var": None if a.count < 2 else a.var,
                    "cost": self._cost.get(l),
                }
            )
        return out


def _wls(X: np.ndarray, y: np.ndarray, w: np.ndarray):
    sw = np.sqrt(w)
    A = X * sw[:, None]
    coef, *_ = np.linalg.lstsq(A, y * sw, rcond=None)
    dof = len(y) - X.shape[1]
    if dof > 0:
        res = (y - X @ coef) * sw
        s2 = float(res @ res) / dof
        cov = s2 * np.linalg.pinv(A.T @ A)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    else:
        se = np.full(X.shape[1], np.nan)
    return coef, se


def _design(idx: list[MultiIndex], d: int) -> np.ndarray:
    """Columns ``1, l_1..l_d`` and, where they are identifiable, indicators ``l_j = 0``.

    ``dQ_l`` with ``l_j = 0`` is not a difference in direction ``j`` and does
    not follow the decay in that direction; the indicator absorbs its offset.
    """
    L = np.array(idx, dtype=np.float64).reshape(len(idx), d)
    cols = [np.ones(len(idx))] + [L[:, j] for j in range(d)]
    X = np.column_stack(cols)
    for j in range(d):
        ind = (L[:, j] == 0).astype(np.float64)
        trial = np.column_stack([X, ind])
        if np.linalg.matrix_rank(trial) == trial.shape[1]:
            X = trial
    return X


def _fit_one(stats: IndexStats, value, min_count: int, d: int):
    idx = [l for l in stats.indices() if stats.count(l) >= min_count]
    vals = [value(l) for l in idx]
    keep = [i for i, v in enumerate(vals) if np.isfinite(v)]
    idx = [idx[i] for i in keep]
    y = np.array([vals[i] for i in keep])
    for j in range(d):
        if len({l[j] for l in idx}) < 2:
            return None, None
    X = _design(idx, d)
    if np.linalg.matrix_rank(X) < 1 + d:
        return None, None
    w = np.array([stats.count(l) for l in idx], dtype=np.float64)
    coef, se = _wls(X, y, w)
    return tuple(float(c) for c in coef[1 : 1 + d]), tuple(float(s) for s in se[1 : 1 + d])


def fit_rates(stats: IndexStats, min_count: int = 2, d: int = 2) -> RateFit:
    """Weighted least-squares fit of ``log2 |E_l|``, ``log2 V_l`` and ``log2 C_l`` against ``l``.

    Weights are the per-index sample counts.  ``alpha`` and ``beta`` are the
    negated slopes, ``gamma`` the slope.  Indices with fewer than
    ``min_count`` samples are skipped (variances need at least two).  A
    rate is ``None`` when fewer than two distinct values remain along some
    direction; callers then keep their current index law.
    """
    floor = 1e-300
    a, sa = _fit_one(stats, lambda l: math.log2(max(abs(stats.mean(l)), floor)), min_count, d)
    b, sb = _fit_one(
        stats,
        lambda l: math.log2(max(stats.var(l), floor)) if stats.count(l) > 1 else math.nan,
        max(min_count, 2),
        d,
    )
    g, sg = _fit_one(stats, lambda l: math.log2(stats.cost(l)), min_count, d)
    neg = lambda t: None if t is None else tuple(-v for v in t)
    return RateFit(neg(a), neg(b), g, {"alpha": sa, "beta": sb, "gamma": sg})


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------


@dataclass
class EstimatorConfig:
    """Run parameters.

    ``n_min`` samples are drawn before the first stopping test and the first
    refit; afterwards the index law is refitted every ``refit_every``
    samples.  ``max_samples`` and ``max_wall`` (seconds) bound the run.
    """

    seed: int = 0
    n_min: int = 32
    refit_every: int = 16
    max_samples: int = 10**6
    max_wall: float = math.inf
    threads: int = 1
    learn_pmf: bool = True
    min_count: int = 2
    pmf: IndexPMF | None = None

    def __post_init__(self):
        if self.n_min < 2:
            raise ValueError("n_min must be at least 2")
        if self.refit_every < 1:
            raise ValueError("refit_every must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")


@dataclass
class Draw:
    """One sample: the index drawn, the index solved, ``Y`` and its differences."""

    n: int
    L_drawn: MultiIndex
    L: MultiIndex
    y: float
    dq: dict
    pmf: IndexPMF
    clamped: bool
    wall: float


def draw_Y(n: int, pmf: IndexPMF, problem: Problem, seed: int) -> Draw:
    """Sample ``n``: draw ``L``, solve once, form ``Y = sum dQ_l / p_l`` under ``pmf``.

    An index beyond the problem's feasibility cap is clamped (largest
    component first) and flagged; ``Y`` is then biased.
    """
    rng = stream(seed, n)
    L0 = pmf.sample(rng)
    L, clamped = clamp_index(L0, problem.feasible)
    res = problem.sample(L, rng)
    dq = delta_tensor(res.qvals)
    y = sum(v / pmf.tail(l) for l, v in dq.items())
    return Draw(n, L0, L, float(y), dq, pmf, clamped, res.wall)


class EstimatorState:
    """Accumulated samples and the quantities derived from them."""

    def __init__(self, problem: Problem, pmf: IndexPMF):
        self.problem = problem
        self.d = problem.d
        self.pmf = pmf
        self.stats = IndexStats(problem.cost)
        self.ys: list[float] = []
        self._sum = 0.0
        self._acc = _Acc()
        self.top_counts: dict[MultiIndex, int] = {}
        self.bias = False
        self.n_clamped = 0
        self.wall = 0.0
        self.fit: RateFit | None = None
        self.pmf_history: list[tuple[int, IndexPMF]] = [(0, pmf)]

    @property
    def N(self) -> int:
        return len(self.ys)

    @property
    def E(self) -> float:
        return self._acc.mean

    @property
    def V(self) -> float:
        """Variance of the mean, ``1/(N(N-1)) sum (Y - E)^2``."""
        if self.N < 2:
            raise ValueError("V needs at least two samples")
        return self._acc.var / self.N

    def add(self, dr: Draw):
        update_estimate(self, dr.y)
        for l, v in dr.dq.items():
            self.stats.add(l, v)
        self.top_counts[dr.L] = self.top_counts.get(dr.L, 0) + 1
        if dr.clamped:
            self.bias = True
            self.n_clamped += 1
        self.wall += dr.wall

    def index_set(self) -> list[MultiIndex]:
        return self.stats.indices()

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "E": self.E if self.N else None,
            "V": self.V if self.N > 1 else None,
            "sqrtV": math.sqrt(self.V) if self.N > 1 else None,
            "N": self.N,
            "bias": self.bias,
            "n_clamped": self.n_clamped,
            "pmf": self.pmf.to_json(),
            "pmf_history": [{"after": n, **p.to_json()} for n, p in self.pmf_history],
            "fitted_rates": self.fit.to_json() if self.fit else None,
            "indices": self.stats.to_json(),
            "top_counts": [{"index": list(l), "count": c} for l, c in sorted(self.top_counts.items())],
            "cost": {m: cost_accounting(self, m) for m in COST_MODES},
        }


def update_estimate(state: EstimatorState, y: float) -> tuple[float, float]:
    """Append ``y``; return the running mean and, from two samples on, the variance of the mean."""
    state.ys.append(float(y))
    state._acc.add(float(y))
    return state.E, (state.V if state.N > 1 else math.nan)


def update_pmf(state: EstimatorState, min_count: int = 2) -> IndexPMF:
    """Refit the rates and return the geometric law with ``r_j = ln2 (gamma_j + beta_j) / 2``.

    The current law is kept when the rates are unavailable, or (with a
    :class:`DegeneracyWarning`) when ``beta_j <= gamma_j`` in some direction.
    """
    fit = fit_rates(state.stats, min_count, state.d)
    state.fit = fit
    if fit.beta is None or fit.gamma is None:
        return state.pmf
    if any(b <= g for b, g in zip(fit.beta, fit.gamma)):
        warnings.warn(
            f"fitted beta {fit.beta} does not exceed gamma {fit.gamma}; keeping the current index law",
            DegeneracyWarning,
            stacklevel=2,
        )
        return state.pmf
    return IndexPMF(tuple(0.5 * LN2 * (g + b) for b, g in zip(fit.beta, fit.gamma)))


@dataclass
class EstimatorResult:
    E: float
    sqrtV: float
    N: int
    converged: bool
    state: EstimatorState

    @property
    def status(self) -> str:
        return "converged" if self.converged else "budget"


def _draws(problem, pmf, seed, ns, pool):
    if pool is None:
        return (draw_Y(n, pmf, problem, seed) for n in ns)
    return pool.map(lambda n: draw_Y(n, pmf, problem, seed), ns)


def run_estimator(problem: Problem, eps: float, cfg: EstimatorConfig | None = None) -> EstimatorResult:
    """Draw samples until ``sqrt(V) <= eps`` (after at least ``n_min``) or the budget runs out.

    The first ``n_min`` samples use the initial law; the law is then refitted
    every ``refit_every`` samples.  Batches may be computed by a thread pool;
    samples are merged in order of ``n`` and the stopping test runs after
    each one, so the result does not depend on ``threads``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    cfg = cfg or EstimatorConfig()
    state = EstimatorState(problem, cfg.pmf or IndexPMF.default(problem.d))
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    converged = False
    try:
        n = 0
        while True:
            size = min(cfg.n_min if n == 0 else cfg.refit_every, cfg.max_samples - n)
            if size <= 0:
                break
            for dr in _draws(problem, state.pmf, cfg.seed, range(n, n + size), pool):
                state.add(dr)
                if state.N >= cfg.n_min and math.sqrt(state.V) <= eps:
                    converged = True
                    break
            n += size
            if converged or time.perf_counter() - t0 > cfg.max_wall:
                break
            if cfg.learn_pmf:
                new = update_pmf(state, cfg.min_count)
                if new != state.pmf:
                    state.pmf = new
                    state.pmf_history.append((state.N, new))
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    if cfg.learn_pmf and state.fit is None and state.N > 1:
        state.fit = fit_rates(state.stats, cfg.min_count, state.d)
    sv = math.sqrt(state.V) if state.N > 1 else math.inf
    return EstimatorResult(state.E, sv, state.N, converged, state)


# --------------------------------------------------------------------------
# cost
# --------------------------------------------------------------------------

COST_MODES = ("recycled", "non_recycled", "non_recycled_constituent")


def cost_reduction_factor(beta, gamma) -> float:
    """Expected cost with recycling over the cost without it.

    ``1 - sum_{u != {}} (-1)^(|u|+1) prod_{j in u} 2^(-(gamma_j + beta_j)/2)``,
    which factorises as ``prod_j (1 - 2^(-(gamma_j + beta_j)/2))``.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    gamma = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    if beta.shape != gamma.shape:
        raise ValueError("beta and gamma must have the same length")
    if np.any(beta <= 0) or np.any(gamma <= 0):
        raise ValueError("rates must be positive")
    x = 2.0 ** (-(gamma + beta) / 2.0)
    s = 0.0
    for k in range(1, len(x) + 1):
        for u in itertools.combinations(range(len(x)), k):
            s += (-1) ** (k + 1) * float(np.prod(x[list(u)]))
    return 1.0 - s


def cost_accounting(state: EstimatorState, mode: str = "recycled") -> float:
    """Total model cost of a run.

    ``recycled`` charges one solve on the finest grid of each sample.
    ``non_recycled`` charges a separate solve on the finest grid of every
    difference ``dQ_l`` the sample contributes, ``l <= L``; an F-cycle on
    that grid also produces the coarser grids of the difference.
    ``non_recycled_constituent`` charges every grid of every difference
    separately.
    """
    cost = state.problem.cost
    total = 0.0
    for L, count in state.top_counts.items():
        if mode == "recycled":
            total += count * cost(L)
        elif mode == "non_recycled":
            total += count * sum(cost(l) for l in box(L))
        elif mode == "non_recycled_constituent":
            s = 0.0
            for l in box(L):
                for u in itertools.product((0, 1), repeat=len(l)):
                    k = tuple(a - b for a, b in zip(l, u))
                    if min(k) >= 0:
                        s += cost(k)
            total += count * s
        else:
            raise ValueError(f"unknown cost mode {mode!r}; choose from {COST_MODES}")
    return total


# --------------------------------------------------------------------------
# pilot runs and references
# --------------------------------------------------------------------------


def pilot_stats(
    problem: PDEProblem | SyntheticProblem, L: MultiIndex, n: int, seed: int = 0, threads: int = 1
) -> IndexStats:
    """Statistics of ``dQ_l`` on the box ``0 <= l <= L`` from ``n`` samples solved at ``L``."""
    stats = IndexStats(problem.cost)
    L = as_index(L)

    def one(k):
        res = problem.sample(L, stream(seed, k))
        return delta_tensor(res.qvals)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(k) for k in range(n)]
    for dq in results:
        for l, v in dq.items():
            stats.add(l, v)
    return stats


def plain_mc(problem: PDEProblem, l: MultiIndex, n: int, seed: int = 0) -> tuple[float, float]:
    """Plain Monte Carlo on the single grid of index ``l`` with sparse direct solves.

    Fields are drawn with the same embedding as the estimator.  Returns the
    sample mean and its standard error.
    """
    lv = problem.level(as_index(l))
    vals = np.empty(n)
    for k in range(n):
        f = realize(problem.prior, lv, stream(seed, k), base=problem.base)
        u = direct_solve(assemble(f, problem.mean), rhs(lv, problem.source))
        vals[k] = problem.qoi(u, f)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))
