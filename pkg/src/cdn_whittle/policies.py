"""Server-allocation policies.

Every policy decides each server independently from the current queue
lengths. ``state`` arguments are sequences of queue lengths ordered like
``topology.files``. Ties always go to the lowest file id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .index import IndexTable
from .model import NetworkTopology

POLICY_NAMES = ("whittle", "uniform", "weighted", "random", "max_weight", "optimal")
RESERVED_POLICY_NAMES = ("balanced_fair",)
CAPACITY_SLACK = 1e-12


@dataclass(frozen=True)
class SystemState:
    queue_lengths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "queue_lengths", tuple(int(x) for x in self.queue_lengths))
        if any(x < 0 for x in self.queue_lengths):
            raise ValueError("queue lengths must be non-negative")

    def __len__(self):
        return len(self.queue_lengths)

    def __getitem__(self, pos):
        return self.queue_lengths[pos]


@dataclass
class Allocation:
    """Service rates ``xi[(file, server)]``; absent edges are zero."""

    rates: dict[tuple[int, int], float] = field(default_factory=dict)

    def rate(self, file: int, server: int) -> float:
        return self.rates.get((file, server), 0.0)

    def departure_rates(self, topology: NetworkTopology) -> np.ndarray:
        """Pooled service rate of every file, in ``topology.files`` order."""
        pos = {f.id: n for n, f in enumerate(topology.files)}
        out = np.zeros(len(topology.files))
        for (i, _), r in self.rates.items():
            out[pos[i]] += r
        return out

    def violations(self, topology: NetworkTopology, state: Sequence[int]) -> list[str]:
        edges = set(topology.edges)
        queue = {f.id: state[n] for n, f in enumerate(topology.files)}
        problems = []
        for (i, j), r in self.rates.items():
            if (i, j) not in edges:
                problems.append(f"rate on non-edge ({i}, {j})")
            if r < 0:
                problems.append(f"negative rate on ({i}, {j})")
            if r > 0 and queue.get(i, 0) == 0:
                problems.append(f"file {i} is empty but served by server {j}")
        for s in topology.servers:
            load = sum(r for (i, j), r in self.rates.items() if j == s.id)
            if load > s.capacity + CAPACITY_SLACK:
                problems.append(f"server {s.id}: load {load:g} exceeds capacity {s.capacity:g}")
        return problems


def _queues(state, topology: NetworkTopology) -> dict[int, int]:
    if len(state) != len(topology.files):
        raise ValueError(f"state has {len(state)} entries for {len(topology.files)} files")
    return {f.id: int(state[n]) for n, f in enumerate(topology.files)}


def _nonempty(queue: dict[int, int], topology: NetworkTopology, server: int) -> list[int]:
    return [i for i in topology.files_on[server] if queue[i] > 0]


def _winner_take_all(topology, queue, choose) -> Allocation:
    alloc = Allocation()
    for s in topology.servers:
        cands = _nonempty(queue, topology, s.id)
        if cands:
            alloc.rates[(choose(s.id, cands), s.id)] = s.capacity
    return alloc


def whittle_decide(state, table: IndexTable, topology: NetworkTopology) -> Allocation:
    """Each server serves its nonempty file with the smallest index."""
    queue = _queues(state, topology)
    # min() keeps the first minimum; candidates are in ascending id order
    return _winner_take_all(topology, queue, lambda j, cands: min(cands, key=lambda i: table.lookup(i, j, queue[i])))


def max_weight_decide(state, topology: NetworkTopology) -> Allocation:
    queue = _queues(state, topology)
    return _winner_take_all(topology, queue, lambda j, cands: max(cands, key=lambda i: (queue[i], -i)))


def random_decide(state, topology: NetworkTopology, rng: np.random.Generator) -> Allocation:
    """Uniform choice among nonempty files, one draw per server (always consumed)."""
    queue = _queues(state, topology)
    alloc = Allocation()
    for s in topology.servers:
        u = rng.random()
        cands = _nonempty(queue, topology, s.id)
        if cands:
            alloc.rates[(cands[min(int(u * len(cands)), len(cands) - 1)], s.id)] = s.capacity
    return alloc


def _split(state, topology: NetworkTopology, weights: dict[int, float]) -> Allocation:
    queue = _queues(state, topology)
    alloc = Allocation()
    for s in topology.servers:
        cands = _nonempty(queue, topology, s.id)
        total = sum(weights[i] for i in cands)
        for i in cands:
            alloc.rates[(i, s.id)] = s.capacity * weights[i] / total
    return alloc


def split_weights(topology: NetworkTopology, kind: str) -> dict[int, float]:
    """Relative shares used by the splitting policies.

    Weighted shares are normalized by the largest arrival rate so that equal
    rates give exactly the uniform weights.
    """
    if kind == "uniform":
        return {f.id: 1.0 for f in topology.files}
    if kind == "weighted":
        top = max(f.arrival_rate for f in topology.files)
        return {f.id: f.arrival_rate / top for f in topology.files}
    raise ValueError(f"no split weights for policy {kind!r}")


def uniform_decide(state, topology: NetworkTopology) -> Allocation:
    """Equal split of each server over its nonempty files."""
    return _split(state, topology, split_weights(topology, "uniform"))


def weighted_decide(state, topology: NetworkTopology) -> Allocation:
    """Split proportional to arrival rates over nonempty files."""
    return _split(state, topology, split_weights(topology, "weighted"))


@dataclass
class Policy:
    """A named policy bound to its topology and any precomputed data."""

    kind: str
    topology: NetworkTopology
    table: IndexTable | None = None
    optimal: "OptimalPolicy | None" = None  # noqa: F821

    def __post_init__(self):
        if self.kind in RESERVED_POLICY_NAMES:
            raise NotImplementedError(f"policy {self.kind!r} is reserved but not implemented")
        if self.kind not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.kind!r}; expected one of {POLICY_NAMES}")
        if self.kind == "whittle" and self.table is None:
            raise ValueError("whittle policy needs an index table")
        if self.kind == "optimal" and self.optimal is None:
            raise ValueError("optimal policy needs a value-iteration solution")

    def decide(self, state, rng: np.random.Generator | None = None) -> Allocation:
        if self.kind == "whittle":
            return whittle_decide(state, self.table, self.topology)
        if self.kind == "uniform":
            return uniform_decide(state, self.topology)
        if self.kind == "weighted":
            return weighted_decide(state, self.topology)
        if self.kind == "max_weight":
            return max_weight_decide(state, self.topology)
        if self.kind == "random":
            if rng is None:
                raise ValueError("random policy needs an rng stream")
            return random_decide(state, self.topology, rng)
        return self.optimal.decide(state)
