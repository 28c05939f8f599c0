"""Batch property checks on the birth-death analytics and the index engine.

Each check returns a :class:`CheckResult`; implementations of the closed
forms can be swapped in so that a deliberately broken formula is caught.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse

from . import birth_death, index
from .model import CostFunction, PairParameters, all_pairs
from .scenario import load_scenario

DEFAULT_PRESETS = ("fig3", "fig5", "fig10")
STRUCTURE_LAMBDAS = (-2.0, -1.0, 0.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0
    failures: list[str] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail} ({self.seconds:.2f}s)"


@dataclass
class VerifyReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = [c.line() for c in self.checks]
        for c in self.checks:
            out.extend(f"  {c.name}: {f}" for f in c.failures[:20])
        return out


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def balance_solve(params: PairParameters, threshold: int, n: int) -> np.ndarray:
    """Stationary law of the chain truncated to ``0..n``, from ``pi Q = 0``.

    ``pi(threshold)`` is pinned to 1 (that state is always recurrent), its
    balance equation is dropped, and the remaining tridiagonal system is
    solved with partial pivoting before normalizing.
    """
    lam, mk, mh = params.lambda_arr, params.mu_k, params.mu_hat
    states = np.arange(n + 1)
    up = np.where(states < n, lam, 0.0)
    down = np.where(states == 0, 0.0, np.where(states <= threshold, mh, mh + mk))
    # balance equation j: up[j-1] pi[j-1] - (up[j] + down[j]) pi[j] + down[j+1] pi[j+1] = 0
    QT = scipy.sparse.diags([up[:-1], -(up + down), down[1:]], [-1, 0, 1], format="csr")
    keep = np.delete(states, threshold)
    A = QT[keep][:, keep].toarray()
    rhs = -QT[keep][:, [threshold]].toarray().ravel()
    ab = np.zeros((3, n))
    ab[0, 1:] = np.diag(A, 1)
    ab[1] = np.diag(A)
    ab[2, :-1] = np.diag(A, -1)
    rest = scipy.linalg.solve_banded((1, 1), ab, rhs)
    pi = np.insert(rest, threshold, 1.0)
    return pi / pi.sum()


def random_stable_pairs(count: int, seed: int = 0) -> list[PairParameters]:
    """Stable pair parameters; about one in ten has no other holder."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        mu_k = rng.uniform(0.05, 1.0)
        mu_hat = 0.0 if rng.random() < 0.1 else rng.uniform(0.01, 1.0)
        lam = rng.uniform(0.01, 0.9) * (mu_hat + mu_k)
        out.append(PairParameters.from_rates(lam, mu_k, mu_hat, CostFunction.linear(1.0)))
    return out


@_timed
def check_stationary(
    count: int = 200,
    thresholds=range(11),
    n_trunc: int = 500,
    tol: float = 1e-10,
    seed: int = 0,
    impl: Callable = None,
) -> CheckResult:
    impl = impl or birth_death.stationary_distribution
    worst, failures = 0.0, []
    for p in random_stable_pairs(count, seed):
        for ell in thresholds:
            chain = birth_death.ThresholdChain(p, ell)
            closed = impl(chain, n_trunc)
            # the truncated reversible chain is the law conditioned on 0..n_trunc
            cond = closed.probabilities / closed.probabilities.sum()
            err = float(np.max(np.abs(cond - balance_solve(p, ell, n_trunc))))
            worst = max(worst, err)
            if not err <= tol or abs(closed.total - 1.0) > 1e-12:
                failures.append(f"rates={tuple(round(v, 4) for v in p.rates)} l={ell}: error {err:.2e}")
    return CheckResult(
        "stationary-oracle", not failures, f"{count} parameter sets x {len(thresholds)} thresholds, max error {worst:.2e}", failures=failures
    )


def _preset_pairs(presets) -> list[tuple[str, PairParameters]]:
    out = []
    for name in presets:
        topo = load_scenario(name).topology
        out.extend((name, p) for p in all_pairs(topo))
    return out


@_timed
def check_passive_mass(presets=DEFAULT_PRESETS, thresholds=range(31), impl: Callable = None) -> CheckResult:
    impl = impl or birth_death.cumulative_passive_mass
    failures, n = [], 0
    for name, p in _preset_pairs(presets):
        seq = np.array([impl(birth_death.ThresholdChain(p, ell)) for ell in thresholds])
        n += 1
        bad = np.nonzero(np.diff(seq) <= 0)[0]
        if len(bad):
            failures.append(f"{name} {p.label}: not increasing at l={int(bad[0]) + 1}")
        if not np.all((seq > 0) & (seq < 1)):
            failures.append(f"{name} {p.label}: value outside (0, 1)")
    return CheckResult("passive-mass-monotone", not failures, f"{n} pairs, l in 0..{max(thresholds)}", failures=failures)


def _structure_failures(tag: str, p: PairParameters, lam: float, n_max: int, strict: bool) -> list[str]:
    ell = int(index.indexability_check(p, [lam], index.sweep_bound(p)).thresholds[0])
    sol = index.solve_relative_value(p, ell, lam, n_max)
    upto = n_max // 2
    V = sol.V[: upto + 1]
    out = []
    dV = np.diff(V)
    if not np.all(dV >= -1e-9 * max(1.0, np.max(np.abs(V)))):
        out.append(f"{tag}: V decreases")
    if strict and not np.all(dV > 0):
        out.append(f"{tag}: V not strictly increasing")
    f = p.cost(np.arange(upto + 1))
    if not np.all(np.diff(V - f, 2) >= -1e-9 * max(1.0, np.max(np.abs(V)))):
        out.append(f"{tag}: V - f not convex")
    rep = index.check_threshold_structure(sol, p, upto)
    if not rep.non_increasing:
        out.append(f"{tag}: g increases")
    if strict and not rep.strictly_decreasing:
        out.append(f"{tag}: g not strictly decreasing")
    if not sol.residual <= index.RESIDUAL_TOL:
        out.append(f"{tag}: residual {sol.residual:.2e}")
    return out


@_timed
def check_structure(presets=DEFAULT_PRESETS, lambdas=STRUCTURE_LAMBDAS, n_max: int = index.DEFAULT_N_MAX) -> CheckResult:
    """Monotone ``V``, convex ``V - f``, monotone ``g`` at the optimal threshold;
    strict versions with ``f(x) = x^2``."""
    failures, n = [], 0
    square = CostFunction.quadratic(1.0, 0.0)
    for name, p in _preset_pairs(presets):
        for lam in lambdas:
            n += 2
            failures += _structure_failures(f"{name} {p.label} lam={lam}", p, lam, n_max, strict=False)
            q = PairParameters(p.lambda_arr, p.mu_k, p.mu_hat, p.scale, p.epsilon, square, p.file, p.server)
            failures += _structure_failures(f"{name} {p.label} x^2 lam={lam}", q, lam, n_max, strict=True)
    return CheckResult("threshold-structure", not failures, f"{n} solved systems", failures=failures)


@_timed
def check_iterative(preset: str = "fig5", states=range(1, 31), eta: float = 0.01, max_count: int = 10_000) -> CheckResult:
    failures, worst_iter, worst_gap = [], 0, 0.0
    for name, p in _preset_pairs([preset]):
        for x in states:
            direct = index.whittle_index_direct(p, x)
            try:
                it = index.whittle_index_iterative(p, x, eta=eta, max_iter=max_count)
            except index.IndexConvergenceError as exc:
                failures.append(f"{name} {p.label} x={x}: {exc}")
                continue
            gap = abs(it.value - direct)
            bound = max(10 * eta * abs(direct), 1e-4)
            worst_iter = max(worst_iter, it.iterations)
            worst_gap = max(worst_gap, gap / bound)
            if gap > bound:
                failures.append(f"{name} {p.label} x={x}: gap {gap:.3e} > {bound:.3e}")
            if it.iterations >= max_count:
                failures.append(f"{name} {p.label} x={x}: {it.iterations} iterations")
    return CheckResult(
        "iterative-vs-direct",
        not failures,
        f"{preset} x in {min(states)}..{max(states)}, max iterations {worst_iter}, max gap/bound {worst_gap:.3f}",
        failures=failures,
    )


@_timed
def check_indexability(presets=DEFAULT_PRESETS, points: int = 50) -> CheckResult:
    failures, n = [], 0
    for name, p in _preset_pairs(presets):
        n_sweep = index.sweep_bound(p)
        costs = index.threshold_costs(p, n_sweep)
        grid = index.index_range_grid(p, n_sweep, points, costs)
        res = index.indexability_check(p, grid, n_sweep, costs)
        n += 1
        if not res.monotone:
            failures.append(f"{name} {p.label}: thresholds not non-increasing")
        if res.thresholds[0] != n_sweep or res.thresholds[-1] != 0:
            failures.append(f"{name} {p.label}: thresholds run {res.thresholds[0]}..{res.thresholds[-1]}, not {n_sweep}..0")
    return CheckResult("indexability-sweep", not failures, f"{n} pairs x {points} subsidies", failures=failures)


def run_verify(
    presets=DEFAULT_PRESETS,
    stationary_impl: Callable | None = None,
    passive_mass_impl: Callable | None = None,
    quick: bool = False,
) -> VerifyReport:
    """All property checks; ``quick`` shrinks the randomized oracle and the iteration range."""
    checks = [
        check_stationary(count=20 if quick else 200, impl=stationary_impl),
        check_passive_mass(presets, impl=passive_mass_impl),
        check_structure(presets),
        check_iterative(states=range(1, 11) if quick else range(1, 31)),
        check_indexability(presets),
    ]
    return VerifyReport(checks)
