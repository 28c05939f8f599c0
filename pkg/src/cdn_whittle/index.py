"""Relative-value equations of the decoupled pair problem and the
Whittle-like index computed from them.

For a passive set ``{0, ..., x}`` and subsidy ``lam`` the relative value
function ``V`` (pinned by ``V(0) = 0``) and average cost ``beta`` solve::

    V(y) = f(y) + lam + E_p1[V | y] - beta      y <= x
    V(y) = f(y) + E_p2[V | y] - beta            y >  x

``V`` and ``beta`` are affine in ``lam``. The index of state ``x`` is the
fixed point ``lam = F(lam) := E_p2[V_lam | x] - E_p1[V_lam | x]``, i.e. the
subsidy at which serving and idling are equally desirable in state ``x``.
Smaller (more negative) indices mean more urgent service.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .birth_death import kernels
from .model import DEFAULT_EPSILON, NetworkTopology, PairParameters, pair_parameters

DEFAULT_N_MAX = 200
DEFAULT_ETA = 0.01
DEFAULT_TOL = 1e-6
DEFAULT_RTOL = 1e-5
DEFAULT_MAX_ITER = 100_000
DEFAULT_MAX_QUEUE = 50
RESIDUAL_TOL = 1e-9
DEGENERATE_SLOPE_TOL = 1e-12


class SingularSystemError(RuntimeError):
    """The relative-value system could not be solved to the residual bound."""


class DegenerateAffineMapError(ArithmeticError):
    """``F(lam) = a + b*lam`` has slope within rounding of 1: no finite index."""


class IndexConvergenceError(RuntimeError):
    def __init__(self, message: str, last_iterate: float, residual: float, iterations: int):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual
        self.iterations = iterations


class MissingIndexError(KeyError):
    pass


@dataclass
class RelativeValueSolution:
    V: np.ndarray
    beta: float
    lam: float
    threshold: int
    residual: float


class ThresholdSystem:
    """LU-factored relative-value equations for one passive set ``{0..threshold}``.

    Unknowns are ``(beta, V(1), ..., V(n_max))``; the column of ``V(0)`` is
    replaced by the ``beta`` column since ``V(0) = 0``. The factorization does
    not depend on the subsidy, so repeated solves only pay for the
    triangular sweeps.
    """

    def __init__(self, params: PairParameters, threshold: int, n_max: int = DEFAULT_N_MAX):
        if threshold < 0 or threshold > n_max:
            raise ValueError(f"threshold {threshold} outside 0..{n_max}")
        self.params = params
        self.threshold = threshold
        self.n_max = n_max
        p1, p2 = kernels(params, n_max)
        states = np.arange(n_max + 1)
        self.passive = (states <= threshold).astype(float)
        self.P = np.where(self.passive[:, None] > 0, p1, p2)
        self.costs = np.asarray(params.cost(states), dtype=float)
        A = np.eye(n_max + 1) - self.P
        A[:, 0] = 1.0
        self._A = A
        self._lu = scipy.linalg.lu_factor(A, check_finite=False)
        pivots = np.abs(np.diag(self._lu[0]))
        if not np.all(np.isfinite(pivots)) or pivots.min() <= 1e-14 * max(1.0, pivots.max()):
            raise SingularSystemError(
                f"singular relative-value system for {params.label} threshold {threshold}: "
                f"condition number ~ {np.linalg.cond(A):.3e}"
            )
        self._parts = None

    def _unpack(self, z: np.ndarray) -> tuple[np.ndarray, float]:
        V = z.copy()
        beta = float(V[0])
        V[0] = 0.0
        return V, beta

    def solve(self, lam: float) -> tuple[np.ndarray, float]:
        rhs = self.costs + lam * self.passive
        return self._unpack(scipy.linalg.lu_solve(self._lu, rhs, check_finite=False))

    def parts(self) -> tuple[tuple[np.ndarray, float], tuple[np.ndarray, float]]:
        """Cost-driven and subsidy-driven components: ``V_lam = V_f + lam*V_1``."""
        if self._parts is None:
            rhs = np.column_stack([self.costs, self.passive])
            z = scipy.linalg.lu_solve(self._lu, rhs, check_finite=False)
            self._parts = (self._unpack(z[:, 0]), self._unpack(z[:, 1]))
        return self._parts

    def residual(self, V: np.ndarray, beta: float, lam: float) -> float:
        """Largest equation residual, relative to the size of costs and values."""
        rhs = self.costs + lam * self.passive - beta + self.P @ V
        scale = max(1.0, float(np.max(np.abs(self.costs))), float(np.max(np.abs(V))), abs(lam))
        return float(np.max(np.abs(V - rhs)) / scale)

    def advantage(self, V: np.ndarray, x: int) -> float:
        """``E_p2[V | x] - E_p1[V | x] = mu_k (V(x-1) - V(x))`` for ``x >= 1``."""
        return self.params.mu_k * (V[x - 1] - V[x])


def _check_pre(threshold_x: int, n_max: int):
    if n_max < threshold_x + 10:
        raise ValueError(f"n_max={n_max} must be at least threshold + 10 = {threshold_x + 10}")


def solve_relative_value(
    params: PairParameters, threshold_x: int, lam: float, n_max: int = DEFAULT_N_MAX
) -> RelativeValueSolution:
    """Solve the relative-value equations for passive set ``{0..threshold_x}``.

    Raises :class:`SingularSystemError` if the relative residual exceeds 1e-9.
    """
    _check_pre(threshold_x, n_max)
    system = ThresholdSystem(params, threshold_x, n_max)
    V, beta = system.solve(lam)
    res = system.residual(V, beta, lam)
    if not res <= RESIDUAL_TOL:
        raise SingularSystemError(
            f"residual {res:.3e} > {RESIDUAL_TOL} for {params.label} threshold {threshold_x}: "
            f"condition number ~ {np.linalg.cond(system._A):.3e}"
        )
    return RelativeValueSolution(V, beta, float(lam), threshold_x, res)


@dataclass
class ValueIterationResult:
    values: np.ndarray
    controls: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)


def value_iteration_oracle(
    params: PairParameters,
    lam: float,
    alpha: float,
    horizon: int,
    n_max: int = DEFAULT_N_MAX,
    keep_history: bool = False,
) -> ValueIterationResult:
    """Finite-horizon discounted value iteration with a binary serve decision.

    ``V_0 = f``, and for ``n >= 1``::

        V_n(x) = f(x) + a Lam V(x+1) + a V(x)(1 - Lam - mu_hat - mu_k)
                 + a mu_hat V(x-1) + min_u [(1-u) lam + a (1-u) mu_k V(x)
                                            + a u mu_k V(x-1)]

    with ``V(-1) := V(0)`` and ``V(n_max+1) := V(n_max)``. Only used as a
    structural test oracle.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    lam_a, mk, mh = params.lambda_arr, params.mu_k, params.mu_hat
    f = np.asarray(params.cost(np.arange(n_max + 1)), dtype=float)
    V = f.copy()
    controls = np.zeros(n_max + 1, dtype=int)
    history = [V.copy()] if keep_history else []
    for _ in range(horizon):
        up = np.append(V[1:], V[-1])
        down = np.insert(V[:-1], 0, V[0])
        common = f + alpha * (lam_a * up + V * (1 - lam_a - mh - mk) + mh * down)
        idle = lam + alpha * mk * V
        serve = alpha * mk * down
        controls = (serve < idle).astype(int)
        V = common + np.minimum(idle, serve)
        if keep_history:
            history.append(V.copy())
    return ValueIterationResult(V, controls, history)


@dataclass
class ThresholdReport:
    g: np.ndarray
    strictly_decreasing: bool
    non_increasing: bool
    crossing: int | None

    @property
    def monotone(self) -> bool:
        return self.strictly_decreasing


def check_threshold_structure(
    sol: RelativeValueSolution, params: PairParameters, upto: int | None = None, tol: float = 1e-9
) -> ThresholdReport:
    """Evaluate ``g(x) = mu_k (V(x-1) - V(x))`` on ``1..upto`` and test monotonicity.

    ``upto`` defaults to half the buffer, away from the truncation boundary.
    ``crossing`` is the first state whose ``g`` drops below the subsidy,
    i.e. where serving becomes preferable.
    """
    n_max = len(sol.V) - 1
    upto = n_max // 2 if upto is None else min(upto, n_max)
    g = params.mu_k * (sol.V[: upto] - sol.V[1 : upto + 1])
    d = np.diff(g)
    slack = tol * max(1.0, float(np.max(np.abs(g))) if len(g) else 1.0)
    below = np.nonzero(g < sol.lam)[0]
    return ThresholdReport(
        g=g,
        strictly_decreasing=bool(np.all(d < -slack)),
        non_increasing=bool(np.all(d <= slack)),
        crossing=int(below[0]) + 1 if len(below) else None,
    )


@dataclass
class AffineIndexMap:
    """``F(lam) = intercept + slope * lam`` for one state ``x``."""

    intercept: float
    slope: float
    residual: float

    @property
    def fixed_point(self) -> float:
        if abs(1.0 - self.slope) <= DEGENERATE_SLOPE_TOL:
            raise DegenerateAffineMapError(
                f"degenerate affine map: slope {self.slope!r} is within {DEGENERATE_SLOPE_TOL} of 1"
            )
        return self.intercept / (1.0 - self.slope)


def affine_index_map(params: PairParameters, x: int, n_max: int = DEFAULT_N_MAX) -> AffineIndexMap:
    """Solve at ``lam = 0`` and ``lam = 1`` and read off ``F`` by affinity.

    No distance-from-boundary check; callers sweeping every threshold up to
    ``n_max`` use this directly.
    """
    system = ThresholdSystem(params, x, n_max)
    (Vf, bf), (V1, b1) = system.parts()
    intercept = system.advantage(Vf, x)
    slope = system.advantage(V1, x)
    res = max(system.residual(Vf, bf, 0.0), system.residual(Vf + V1, bf + b1, 1.0))
    return AffineIndexMap(float(intercept), float(slope), res)


def whittle_index_direct(params: PairParameters, x: int, n_max: int = DEFAULT_N_MAX) -> float:
    """Exact fixed point ``a / (1 - b)`` of the affine map ``F``."""
    if x < 1:
        raise ValueError("index is defined for x >= 1")
    _check_pre(x, n_max)
    try:
        return affine_index_map(params, x, n_max).fixed_point
    except DegenerateAffineMapError as exc:
        raise DegenerateAffineMapError(f"{params.label} x={x}: {exc}") from None


@dataclass
class IterativeIndex:
    value: float
    iterations: int
    trace: np.ndarray


def whittle_index_iterative(
    params: PairParameters,
    x: int,
    eta: float = DEFAULT_ETA,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    n_max: int = DEFAULT_N_MAX,
    rtol: float = DEFAULT_RTOL,
    lam0: float = 0.0,
) -> IterativeIndex:
    """Damped fixed-point iteration ``lam <- lam + eta (F(lam) - lam)``.

    Each step re-solves the relative-value equations at the current
    subsidy. Stops once ``|lam_{n+1} - lam_n| < tol + rtol |lam_n|``; the
    relative part keeps the stopping rule invariant to the cost scale.
    """
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    if x < 1:
        raise ValueError("index is defined for x >= 1")
    _check_pre(x, n_max)
    system = ThresholdSystem(params, x, n_max)
    lam = float(lam0)
    trace = [lam]
    for n in range(1, max_iter + 1):
        V, _ = system.solve(lam)
        new = lam + eta * (system.advantage(V, x) - lam)
        trace.append(new)
        if abs(new - lam) < tol + rtol * abs(lam):
            return IterativeIndex(new, n, np.asarray(trace))
        lam = new
    V, _ = system.solve(lam)
    raise IndexConvergenceError(
        f"{params.label} x={x}: no convergence in {max_iter} iterations",
        last_iterate=lam,
        residual=abs(system.advantage(V, x) - lam),
        iterations=max_iter,
    )


def truncation_shift(params: PairParameters, x: int, n_max: int = DEFAULT_N_MAX) -> float:
    """Change in the direct index when the buffer is doubled."""
    return abs(whittle_index_direct(params, x, 2 * n_max) - whittle_index_direct(params, x, n_max))


@dataclass
class IndexTable:
    """Index values for every edge and queue length ``1..max_queue``.

    ``values[(i, k)][x]`` is the index of file ``i`` at server ``k`` with
    ``x`` jobs queued (position 0 unused). Lengths above ``max_queue`` are
    extrapolated linearly from the last two entries. Sole-server pairs carry
    ``-inf``: idling the only server holding a file can never be compensated
    by a finite subsidy.
    """

    values: dict[tuple[int, int], np.ndarray]
    residuals: dict[tuple[int, int], np.ndarray]
    method: str
    max_queue: int
    n_max: int
    iterations: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    notes: dict[tuple[int, int], str] = field(default_factory=dict)
    extrapolation: str = "linear beyond max_queue"

    @property
    def edges(self) -> list[tuple[int, int]]:
        return sorted(self.values)

    def __len__(self) -> int:
        return len(self.values) * self.max_queue

    def lookup(self, file: int, server: int, x: int) -> float:
        try:
            row = self.values[(file, server)]
        except KeyError:
            raise MissingIndexError(f"no index for (file {file}, server {server}, x {x})") from None
        if x < 1:
            raise MissingIndexError(f"no index for (file {file}, server {server}, x {x}): x must be >= 1")
        if x <= self.max_queue:
            return float(row[x])
        last, prev = row[self.max_queue], row[self.max_queue - 1]
        if math.isinf(last):
            return float(last)
        return float(last + (x - self.max_queue) * (last - prev))

    def __getitem__(self, key: tuple[int, int, int]) -> float:
        return self.lookup(*key)

    @property
    def entries(self) -> dict[tuple[int, int, int], float]:
        return {(i, k, x): float(row[x]) for (i, k), row in sorted(self.values.items()) for x in range(1, self.max_queue + 1)}

    def monotone(self, strict: bool = False) -> dict[tuple[int, int], bool]:
        """Per-edge check that the index decreases in the queue length."""
        out = {}
        for key, row in self.values.items():
            body = row[1:]
            if np.all(np.isneginf(body)):
                out[key] = not strict
                continue
            d = np.diff(body)
            out[key] = bool(np.all(d < 0) if strict else np.all(d <= 0))
        return out

    def array(self, edge_order: list[tuple[int, int]]) -> np.ndarray:
        """Dense ``(n_edges, max_queue + 1)`` array in the given edge order."""
        return np.vstack([self.values[e] for e in edge_order])

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["file", "server", "x", "index", "method", "residual"])
        for (i, k), row in sorted(self.values.items()):
            res = self.residuals[(i, k)]
            for x in range(1, self.max_queue + 1):
                w.writerow([i, k, x, f"{row[x]:.12g}", self.method, f"{res[x]:.3g}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "IndexTable":
        rows = list(csv.DictReader(Path(path).read_text().splitlines()))
        if not rows:
            raise ValueError("empty index table")
        max_queue = max(int(r["x"]) for r in rows)
        values, residuals = {}, {}
        for r in rows:
            key = (int(r["file"]), int(r["server"]))
            values.setdefault(key, np.full(max_queue + 1, np.nan))[int(r["x"])] = float(r["index"])
            residuals.setdefault(key, np.full(max_queue + 1, np.nan))[int(r["x"])] = float(r["residual"])
        return cls(values, residuals, rows[0]["method"], max_queue, n_max=-1)


def build_index_table(
    topology: NetworkTopology,
    max_queue: int = DEFAULT_MAX_QUEUE,
    method: str = "direct",
    n_max: int = DEFAULT_N_MAX,
    epsilon: float = DEFAULT_EPSILON,
    eta: float = DEFAULT_ETA,
    tol: float = DEFAULT_TOL,
    rtol: float = DEFAULT_RTOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> IndexTable:
    """Index of every edge at every queue length ``1..max_queue``.

    Solver failures are re-raised with the pair and state attached.
    """
    if method not in ("direct", "iterative"):
        raise ValueError(f"unknown index method {method!r}")
    n_max = max(n_max, max_queue + 10)
    values, residuals, iterations, notes = {}, {}, {}, {}
    for i, k in topology.edges:
        params = pair_parameters(topology, i, k, epsilon)
        row = np.full(max_queue + 1, np.nan)
        res = np.full(max_queue + 1, np.nan)
        its = np.zeros(max_queue + 1, dtype=int)
        if params.sole_server:
            row[1:] = -np.inf
            res[1:] = 0.0
            notes[(i, k)] = "sole server: passive state cannot drain, index is -inf"
        else:
            lam0 = 0.0
            for x in range(1, max_queue + 1):
                try:
                    if method == "direct":
                        amap = affine_index_map(params, x, n_max)
                        row[x] = amap.fixed_point
                        res[x] = amap.residual
                    else:
                        it = whittle_index_iterative(params, x, eta, tol, max_iter, n_max, rtol, lam0=lam0)
                        row[x] = it.value
                        its[x] = it.iterations
                        lam0 = it.value
                        system = ThresholdSystem(params, x, n_max)
                        V, beta = system.solve(it.value)
                        res[x] = system.residual(V, beta, it.value)
                except IndexConvergenceError as exc:
                    where = f"index for (file {i}, server {k}, x {x}) failed: {exc}"
                    raise IndexConvergenceError(where, exc.last_iterate, exc.residual, exc.iterations) from exc
                except (SingularSystemError, DegenerateAffineMapError) as exc:
                    raise type(exc)(f"index for (file {i}, server {k}, x {x}) failed: {exc}") from exc
        values[(i, k)] = row
        residuals[(i, k)] = res
        if method == "iterative":
            iterations[(i, k)] = its
    return IndexTable(values, residuals, method, max_queue, n_max, iterations, notes)


@dataclass
class ThresholdCosts:
    """Average cost of every threshold policy, ``beta(lam, l) = cost[l] + lam * passive[l]``."""

    cost: np.ndarray
    passive: np.ndarray

    def beta(self, lam: float) -> np.ndarray:
        return self.cost + lam * self.passive


def threshold_costs(params: PairParameters, n_max: int = DEFAULT_N_MAX) -> ThresholdCosts:
    """Policy evaluation of thresholds ``0..n_max``."""
    cost = np.empty(n_max + 1)
    passive = np.empty(n_max + 1)
    for ell in range(n_max + 1):
        (_, bf), (_, b1) = ThresholdSystem(params, ell, n_max).parts()
        cost[ell], passive[ell] = bf, b1
    return ThresholdCosts(cost, passive)


@dataclass
class IndexabilityResult:
    lambdas: np.ndarray
    thresholds: np.ndarray
    monotone: bool


def indexability_check(
    params: PairParameters,
    lambda_grid,
    n_max: int = DEFAULT_N_MAX,
    costs: ThresholdCosts | None = None,
    tie_tol: float = 1e-12,
) -> IndexabilityResult:
    """Optimal threshold for each subsidy in ``lambda_grid`` (smallest on ties)
    and whether the sequence is non-increasing."""
    grid = np.asarray(lambda_grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError("lambda_grid must be sorted ascending")
    costs = threshold_costs(params, n_max) if costs is None else costs
    out = np.empty(len(grid), dtype=int)
    for n, lam in enumerate(grid):
        beta = costs.beta(lam)
        best = beta.min()
        out[n] = int(np.nonzero(beta <= best + tie_tol * max(1.0, abs(best)))[0][0])
    return IndexabilityResult(grid, out, bool(np.all(np.diff(out) <= 0)))


def threshold_breakpoints(costs: ThresholdCosts) -> np.ndarray:
    """Subsidies at which thresholds ``x-1`` and ``x`` cost the same, ``x = 1..n_max``.

    Away from the buffer boundary these coincide with the direct index.
    """
    return -np.diff(costs.cost) / np.diff(costs.passive)


def sweep_bound(params: PairParameters, resolution: float = 1e-8, cap: int = DEFAULT_N_MAX, floor: int = 10) -> int:
    """Deepest threshold whose policy is numerically distinguishable from its neighbour.

    Consecutive thresholds differ in passive mass by roughly ``rho**l`` where
    ``rho = min(r, 1/r)`` and ``r = Lambda/mu_hat``; past ``rho**l < resolution``
    their costs tie in double precision.
    """
    if params.mu_hat == 0 or params.lambda_arr == 0:
        return floor
    r = params.lambda_arr / params.mu_hat
    rho = min(r, 1.0 / r)
    if rho >= 1.0:
        return cap
    return int(min(cap, max(floor, math.ceil(math.log(resolution) / math.log(rho)))))


def index_range_grid(
    params: PairParameters, n_max: int, points: int = 50, costs: ThresholdCosts | None = None
) -> np.ndarray:
    """Ascending subsidy grid spanning the index range of the truncated pair.

    The first point lies below every threshold breakpoint and the last above
    every breakpoint, so the optimal threshold should run from ``n_max`` down
    to 0. The other points are spread over the intervals between
    consecutive breakpoints.
    """
    if points < 3:
        raise ValueError("need at least 3 grid points")
    costs = threshold_costs(params, n_max) if costs is None else costs
    bp = threshold_breakpoints(costs)
    span = float(np.max(bp) - np.min(bp)) + 1.0
    xs = np.linspace(1, n_max - 1, points - 2).round().astype(int)
    inner = []
    for x in np.unique(xs):
        k = int(np.count_nonzero(xs == x))
        inner.extend(bp[x] + np.arange(1, k + 1) / (k + 1) * (bp[x - 1] - bp[x]))
    return np.concatenate([[np.min(bp) - 0.01 * span], np.sort(inner), [np.max(bp) + 0.01 * span]])
