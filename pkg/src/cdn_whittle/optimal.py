"""Exactly optimal allocation for small networks by relative value iteration
on the uniformized joint queue-length chain."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import NetworkTopology
from .policies import Allocation

STATE_GUARD = 10**7
DEFAULT_BUFFER = 60
DEFAULT_TOL = 1e-8
DEFAULT_MAX_SWEEPS = 1_000_000


class StateSpaceGuardError(RuntimeError):
    def __init__(self, states: int, limit: int = STATE_GUARD):
        super().__init__(f"joint state space has {states} states, above the limit of {limit}")
        self.states = states
        self.limit = limit


class ValueIterationConvergenceError(RuntimeError):
    pass


@dataclass
class OptimalPolicy:
    """Stationary optimal policy on ``{0..buffer}^N``.

    ``choice[x1, ..., xN, m]`` is the file id served by the ``m``-th server
    (``topology.servers`` order), or -1 when that server idles. States above
    the buffer are looked up at the clamped state.
    """

    topology: NetworkTopology
    buffer: int
    choice: np.ndarray
    values: np.ndarray
    average_cost: float
    gap: float
    sweeps: int

    def server_choices(self, state) -> np.ndarray:
        x = tuple(min(int(v), self.buffer) for v in state)
        return self.choice[x]

    def decide(self, state) -> Allocation:
        alloc = Allocation()
        for s, i in zip(self.topology.servers, self.server_choices(state)):
            if i >= 0:
                alloc.rates[(int(i), s.id)] = s.capacity
        return alloc

    def flat_table(self) -> np.ndarray:
        """``(n_states, M)`` table in C order of the joint state."""
        return self.choice.reshape(-1, len(self.topology.servers))

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{f.id}" for f in self.topology.files] + [f"server{s.id}" for s in self.topology.servers])
        for x in np.ndindex(*self.choice.shape[:-1]):
            w.writerow(list(x) + [int(c) for c in self.choice[x]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _shift(V: np.ndarray, axis: int, step: int) -> np.ndarray:
    """``V`` evaluated one step up (+1) or down (-1) along ``axis``, clamped at the edges."""
    n = V.shape[axis]
    idx = np.clip(np.arange(n) + step, 0, n - 1)
    return np.take(V, idx, axis=axis)


def optimal_policy_vi(
    topology: NetworkTopology,
    buffer: int = DEFAULT_BUFFER,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    guard: int = STATE_GUARD,
) -> OptimalPolicy:
    """Relative value iteration ``V' = sum_i f_i(x_i) - V(0) + min_u E^u[V | x]``.

    Controls assign every server to one of its files. The chain is
    uniformized at ``R = sum Lambda + sum mu``; arrivals at the buffer become
    self-loops. Stops when ``span(V' - V) < tol``.
    """
    files, servers = topology.files, topology.servers
    n_files = len(files)
    states = (buffer + 1) ** n_files
    if states > guard:
        raise StateSpaceGuardError(states, guard)
    pos = {f.id: n for n, f in enumerate(files)}
    lam = np.array([f.arrival_rate for f in files])
    R = float(lam.sum() + sum(s.capacity for s in servers))
    shape = (buffer + 1,) * n_files
    grid = np.indices(shape)
    cost = sum(f.cost(grid[n]) for n, f in enumerate(files))
    busy = [(grid[n] > 0) for n in range(n_files)]

    controls = list(itertools.product(*[topology.files_on[s.id] for s in servers]))
    rates = np.zeros((len(controls), n_files))
    for c, ctrl in enumerate(controls):
        for s, i in zip(servers, ctrl):
            rates[c, pos[i]] += s.capacity

    V = np.zeros(shape)
    gap = np.inf
    for sweep in range(1, max_sweeps + 1):
        base = (R - lam.sum()) * V
        for n in range(n_files):
            base = base + lam[n] * _shift(V, n, 1)
        drops = [np.where(busy[n], _shift(V, n, -1) - V, 0.0) for n in range(n_files)]
        best = None
        for c in range(len(controls)):
            E = base.copy()
            for n in range(n_files):
                if rates[c, n]:
                    E += rates[c, n] * drops[n]
            best = E if best is None else np.minimum(best, E)
        TV = cost + best / R
        diff = TV - V
        gap = float(diff.max() - diff.min())
        V = TV - V.flat[0]
        if gap < tol:
            break
    else:
        raise ValueIterationConvergenceError(f"span {gap:.3e} still above {tol} after {max_sweeps} sweeps")

    # greedy policy w.r.t. the converged values; first minimizer wins ties
    Es = []
    base = (R - lam.sum()) * V + sum(lam[n] * _shift(V, n, 1) for n in range(n_files))
    drops = [np.where(busy[n], _shift(V, n, -1) - V, 0.0) for n in range(n_files)]
    for c in range(len(controls)):
        Es.append(base + sum(rates[c, n] * drops[n] for n in range(n_files)))
    best_c = np.argmin(np.stack(Es), axis=0)
    ctrl_arr = np.array(controls, dtype=int).reshape(len(controls), len(servers))
    choice = ctrl_arr[best_c]
    for m in range(len(servers)):
        served = choice[..., m]
        empty = np.zeros(shape, dtype=bool)
        for f in files:
            empty |= (served == f.id) & ~busy[pos[f.id]]
        choice[..., m] = np.where(empty, -1, served)
    lo, hi = float(diff.min()), float(diff.max())
    return OptimalPolicy(topology, buffer, choice, V, 0.5 * (lo + hi), gap, sweep)
