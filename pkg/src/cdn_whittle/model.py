"""Static problem data: files, servers, the bipartite placement graph, and
the per-(file, server) decoupled subproblem parameters.

Rates are in jobs per unit time with unit-mean exponential job sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

DEFAULT_EPSILON = 0.05
DEFAULT_CHECK_BOUND = 200

COST_KINDS = ("linear", "quadratic", "tabulated")


class TopologyError(ValueError):
    """Raised when a topology or pair lookup is structurally invalid."""


@dataclass(frozen=True)
class CostFunction:
    """Holding cost ``f(x)`` for ``x`` queued jobs.

    ``linear``: ``c*x``; ``quadratic``: ``a*x**2 + b*x``; ``tabulated``: the
    values ``f(0), f(1), ...`` given explicitly.
    """

    kind: str
    coeffs: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}; expected one of {COST_KINDS}")
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        expected = {"linear": 1, "quadratic": 2}.get(self.kind)
        if expected is not None and len(self.coeffs) != expected:
            raise ValueError(f"{self.kind} cost takes {expected} coefficient(s), got {len(self.coeffs)}")
        if self.kind == "tabulated" and len(self.coeffs) < 2:
            raise ValueError("tabulated cost needs at least two values")

    @classmethod
    def linear(cls, c: float) -> "CostFunction":
        return cls("linear", (c,))

    @classmethod
    def quadratic(cls, a: float, b: float = 0.0) -> "CostFunction":
        return cls("quadratic", (a, b))

    @classmethod
    def tabulated(cls, values: Sequence[float]) -> "CostFunction":
        return cls("tabulated", tuple(values))

    @property
    def bound(self) -> float:
        """Largest argument at which the cost is defined."""
        return len(self.coeffs) - 1 if self.kind == "tabulated" else np.inf

    def __call__(self, x):
        x = np.asarray(x)
        if np.any(x < 0):
            raise ValueError("cost evaluated at a negative queue length")
        if self.kind == "linear":
            out = self.coeffs[0] * x
        elif self.kind == "quadratic":
            a, b = self.coeffs
            out = a * x * x + b * x
        else:
            if np.any(x > self.bound):
                raise ValueError(f"tabulated cost only covers 0..{self.bound}, asked for {np.max(x)}")
            out = np.asarray(self.coeffs)[x.astype(int)]
        return float(out) if out.ndim == 0 else out.astype(float)

    def polynomial(self) -> tuple[float, float, float] | None:
        """``(c0, c1, c2)`` with ``f(x) = c0 + c1 x + c2 x^2``, or None if tabulated."""
        if self.kind == "linear":
            return 0.0, self.coeffs[0], 0.0
        if self.kind == "quadratic":
            return 0.0, self.coeffs[1], self.coeffs[0]
        return None

    def violations(self, upto: int = DEFAULT_CHECK_BOUND) -> list[str]:
        """Convexity/monotonicity violations on ``0..upto``."""
        upto = int(min(upto, self.bound))
        values = self(np.arange(upto + 1))
        d = np.diff(values)
        problems = []
        if np.any(d < 0):
            problems.append(f"decreasing at x={int(np.argmax(d < 0))}")
        dd = np.diff(d)
        if np.any(dd < -1e-12 * max(1.0, float(np.max(np.abs(values))))):
            problems.append(f"not convex at x={int(np.argmax(dd < 0)) + 1}")
        if self.kind == "tabulated" and not d[-1] > 0:
            problems.append("tabulated tail is not strictly increasing")
        return problems

    def to_dict(self) -> dict:
        return {"kind": self.kind, "coeffs": list(self.coeffs)}


@dataclass(frozen=True)
class FileType:
    id: int
    arrival_rate: float
    cost: CostFunction


@dataclass(frozen=True)
class Server:
    id: int
    capacity: float


@dataclass(frozen=True)
class NetworkTopology:
    """Bipartite file/server placement graph.

    ``edges`` holds ``(file_id, server_id)`` pairs; an edge means the server
    stores a replica of the file. Construction normalizes ordering and never
    raises on semantic problems; use :func:`validate_topology` for that.
    """

    files: tuple[FileType, ...]
    servers: tuple[Server, ...]
    edges: tuple[tuple[int, int], ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "files", tuple(sorted(self.files, key=lambda f: f.id)))
        object.__setattr__(self, "servers", tuple(sorted(self.servers, key=lambda s: s.id)))
        object.__setattr__(self, "edges", tuple(sorted({(int(i), int(j)) for i, j in self.edges})))

    @classmethod
    def build(
        cls,
        arrival_rates: Sequence[float],
        costs: Sequence[CostFunction],
        capacities: Sequence[float],
        edges: Iterable[tuple[int, int]],
        name: str = "",
    ) -> "NetworkTopology":
        """Convenience constructor with 1-based consecutive ids."""
        files = [FileType(i + 1, float(lam), c) for i, (lam, c) in enumerate(zip(arrival_rates, costs))]
        servers = [Server(j + 1, float(mu)) for j, mu in enumerate(capacities)]
        return cls(tuple(files), tuple(servers), tuple(edges), name=name)

    @property
    def file_ids(self) -> tuple[int, ...]:
        return tuple(f.id for f in self.files)

    @property
    def server_ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.servers)

    @cached_property
    def _file_by_id(self) -> dict[int, FileType]:
        return {f.id: f for f in self.files}

    @cached_property
    def _server_by_id(self) -> dict[int, Server]:
        return {s.id: s for s in self.servers}

    def file(self, file_id: int) -> FileType:
        try:
            return self._file_by_id[file_id]
        except KeyError:
            raise TopologyError(f"unknown file id {file_id}") from None

    def server(self, server_id: int) -> Server:
        try:
            return self._server_by_id[server_id]
        except KeyError:
            raise TopologyError(f"unknown server id {server_id}") from None

    @cached_property
    def servers_of(self) -> dict[int, tuple[int, ...]]:
        """``S_i``: servers holding each file."""
        out = {f.id: [] for f in self.files}
        for i, j in self.edges:
            out.setdefault(i, []).append(j)
        return {i: tuple(sorted(js)) for i, js in out.items()}

    @cached_property
    def files_on(self) -> dict[int, tuple[int, ...]]:
        """``F_j``: files stored on each server."""
        out = {s.id: [] for s in self.servers}
        for i, j in self.edges:
            out.setdefault(j, []).append(i)
        return {j: tuple(sorted(is_)) for j, is_ in out.items()}

    def pooled_capacity(self, file_id: int) -> float:
        return sum(self.server(j).capacity for j in self.servers_of[file_id])

    def scaled(self, factor: float) -> "NetworkTopology":
        """Copy with every rate multiplied by ``factor`` (time rescaling)."""
        files = tuple(FileType(f.id, f.arrival_rate * factor, f.cost) for f in self.files)
        servers = tuple(Server(s.id, s.capacity * factor) for s in self.servers)
        return NetworkTopology(files, servers, self.edges, name=self.name)


def validate_topology(topology: NetworkTopology, cost_bound: int = DEFAULT_CHECK_BOUND) -> list[str]:
    """List every violated structural or stability condition (empty if valid).

    Only the local inequality ``sum_{j in S_i} mu_j > Lambda_i`` is checked;
    the existence of a finite-cost stationary policy is not machine-checkable
    in general.
    """
    report = []
    file_ids = [f.id for f in topology.files]
    server_ids = [s.id for s in topology.servers]
    for kind, ids in (("file", file_ids), ("server", server_ids)):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            report.append(f"duplicate {kind} ids {dup}")
    known_f, known_s = set(file_ids), set(server_ids)
    for i, j in topology.edges:
        if i not in known_f:
            report.append(f"edge ({i}, {j}) references unknown file {i}")
        if j not in known_s:
            report.append(f"edge ({i}, {j}) references unknown server {j}")
    for s in topology.servers:
        if not s.capacity > 0:
            report.append(f"server {s.id}: capacity {s.capacity} is not positive")
    for f in topology.files:
        if not f.arrival_rate > 0:
            report.append(f"file {f.id}: arrival rate {f.arrival_rate} is not positive")
        holders = [j for j in topology.servers_of.get(f.id, ()) if j in known_s]
        if not holders:
            report.append(f"file {f.id}: unserved file (no server stores it)")
            continue
        pooled = sum(topology.server(j).capacity for j in holders)
        if not pooled > f.arrival_rate:
            report.append(
                f"file {f.id}: local stability sum(mu)={pooled:g} > Lambda={f.arrival_rate:g} fails (Σμ > Λ fails)"
            )
        for problem in f.cost.violations(cost_bound):
            report.append(f"file {f.id}: cost {problem}")
        if f.cost.kind == "tabulated" and f.cost.bound < cost_bound:
            report.append(f"file {f.id}: tabulated cost covers 0..{f.cost.bound} < bound {cost_bound}")
    return report


@dataclass(frozen=True)
class PairParameters:
    """Uniformized rates of one decoupled (file, server) subproblem.

    ``lambda_arr``, ``mu_k`` and ``mu_hat`` are the original rates divided by
    ``scale``, so they are one-step transition probabilities. The cost is
    left in original units, which keeps subsidies, indices and average costs
    in cost-per-unit-time and makes them invariant to time rescaling.
    """

    lambda_arr: float
    mu_k: float
    mu_hat: float
    scale: float
    epsilon: float
    cost: CostFunction
    file: int | None = None
    server: int | None = None

    @classmethod
    def from_rates(
        cls,
        arrival: float,
        mu_k: float,
        mu_hat: float,
        cost: CostFunction,
        epsilon: float = DEFAULT_EPSILON,
        file: int | None = None,
        server: int | None = None,
    ) -> "PairParameters":
        if not 0 < epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if arrival < 0 or mu_k < 0 or mu_hat < 0:
            raise ValueError("rates must be non-negative")
        total = arrival + mu_k + mu_hat
        if total <= 0:
            raise ValueError("at least one rate must be positive")
        scale = total / (1.0 - epsilon)
        return cls(arrival / scale, mu_k / scale, mu_hat / scale, scale, epsilon, cost, file, server)

    @property
    def rates(self) -> tuple[float, float, float]:
        """Original ``(Lambda, mu_k, mu_hat)`` before uniformization."""
        return self.lambda_arr * self.scale, self.mu_k * self.scale, self.mu_hat * self.scale

    @property
    def sole_server(self) -> bool:
        """True when no other server holds the file (``mu_hat == 0``)."""
        return self.mu_hat == 0.0

    @property
    def label(self) -> str:
        return f"(file {self.file}, server {self.server})"


def pair_parameters(
    topology: NetworkTopology, file: int, server: int, epsilon: float = DEFAULT_EPSILON
) -> PairParameters:
    """Decoupled subproblem for ``(file, server)`` with the other holders of the
    file fixed at full capacity."""
    if (file, server) not in set(topology.edges):
        raise TopologyError(f"pair not in topology: (file {file}, server {server})")
    f = topology.file(file)
    mu_k = topology.server(server).capacity
    mu_hat = sum(topology.server(j).capacity for j in topology.servers_of[file] if j != server)
    return PairParameters.from_rates(f.arrival_rate, mu_k, mu_hat, f.cost, epsilon, file, server)


def all_pairs(topology: NetworkTopology, epsilon: float = DEFAULT_EPSILON) -> list[PairParameters]:
    return [pair_parameters(topology, i, j, epsilon) for i, j in topology.edges]
