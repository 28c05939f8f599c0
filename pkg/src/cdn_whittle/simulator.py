"""Event-driven simulation of the cluster at the queue-length level.

Randomness is pre-drawn per replication from independent streams, one per
(file, event kind), so that different policies see the same arrival times
and the same job sizes (common random numbers). The head-of-line job of
file ``i`` carries an Exp(1) amount of work that drains at the pooled rate
``sum_j xi_ij``; by memorylessness this has the law of an Exp(rate) clock
that is re-drawn at every decision epoch.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.stats

from .model import NetworkTopology
from .policies import Policy, split_weights

ARRIVAL, DEPARTURE = 0, 1
POLICY_CODES = {"whittle": 0, "uniform": 1, "weighted": 2, "random": 3, "max_weight": 4, "optimal": 5}
STREAM_ARRIVAL, STREAM_SERVICE, STREAM_POLICY = 0, 1, 2

STATUS_OK = 0
STATUS_COST_RANGE = 1
STATUS_RNG_EXHAUSTED = 2


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    topology: NetworkTopology
    policy: Policy
    horizon: float
    warmup: float | None = None
    seed: int = 0
    replications: int = 1
    record: bool = False

    def __post_init__(self):
        if self.warmup is None:
            object.__setattr__(self, "warmup", 0.1 * self.horizon)
        if not self.horizon > self.warmup >= 0:
            raise ValueError("need horizon > warmup >= 0")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")

    @property
    def window(self) -> float:
        return self.horizon - self.warmup


@dataclass
class SimTrace:
    integrated_cost: float
    horizon: float
    warmup: float
    final_state: np.ndarray
    arrivals: np.ndarray
    departures: np.ndarray
    events: int
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    kinds: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int8))
    files: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    states: np.ndarray = field(default_factory=lambda: np.empty((0, 0), dtype=np.int64))
    allocations: np.ndarray | None = None  # per epoch, edge rates in topology.edges order

    @property
    def average_cost(self) -> float:
        return self.integrated_cost / (self.horizon - self.warmup)

    def to_csv(self, topology: NetworkTopology, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "event"] + [f"x{f.id}" for f in topology.files])
        ids = topology.file_ids
        for t, k, n, s in zip(self.times, self.kinds, self.files, self.states):
            name = "arrival" if k == ARRIVAL else "departure"
            w.writerow([f"{t:.12g}", f"{name}({ids[n]})"] + [int(v) for v in s])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class CostEstimate:
    """Mean across replications with a Student-t 95% half-width (NaN for one replication)."""

    mean: float
    ci_halfwidth: float
    per_replication: np.ndarray

    @classmethod
    def from_samples(cls, samples) -> "CostEstimate":
        x = np.asarray(samples, dtype=float)
        mean = float(x.mean())
        if len(x) < 2:
            return cls(mean, math.nan, x)
        half = float(scipy.stats.t.ppf(0.975, len(x) - 1) * x.std(ddof=1) / math.sqrt(len(x)))
        return cls(mean, half, x)

    @property
    def replications(self) -> int:
        return len(self.per_replication)

    @property
    def interval(self) -> tuple[float, float]:
        return self.mean - self.ci_halfwidth, self.mean + self.ci_halfwidth

    def to_dict(self) -> dict:
        ci = None if math.isnan(self.ci_halfwidth) else self.ci_halfwidth
        return {
            "mean": self.mean,
            "ci": ci,
            "ci_status": "ok" if ci is not None else "not-available",
            "replications": self.replications,
            "per_replication": [float(v) for v in self.per_replication],
        }


@dataclass
class SimResult:
    config: SimConfig
    traces: list[SimTrace]
    estimate: CostEstimate

    def to_json(self) -> dict:
        out = {"policy": self.config.policy.kind}
        out.update(self.estimate.to_dict())
        out.update({"horizon": self.config.horizon, "warmup": self.config.warmup, "seed": self.config.seed})
        return out


# ----------------------------------------------------------------------------
# random streams


def _stream(seed: int, rep: int, kind: int, n: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep, kind, n)))


def _arrival_times(rng: np.random.Generator, rate: float, horizon: float) -> np.ndarray:
    if rate <= 0:
        return np.empty(0)
    mean = rate * horizon
    chunk = int(mean + 10 * math.sqrt(mean) + 100)
    times = np.cumsum(rng.exponential(1.0 / rate, chunk))
    while times[-1] <= horizon:
        more = times[-1] + np.cumsum(rng.exponential(1.0 / rate, chunk))
        times = np.concatenate([times, more])
    return times


@dataclass
class Streams:
    arrivals: list[np.ndarray]
    work: list[np.ndarray]
    uniforms: np.ndarray | None


def draw_streams(topology: NetworkTopology, horizon: float, seed: int, rep: int, need_uniforms: bool) -> Streams:
    """Arrival epochs and job sizes for one replication (shared by all policies)."""
    arrivals, work = [], []
    for n, f in enumerate(topology.files):
        times = _arrival_times(_stream(seed, rep, STREAM_ARRIVAL, n), f.arrival_rate, horizon)
        arrivals.append(times)
        work.append(_stream(seed, rep, STREAM_SERVICE, n).exponential(1.0, len(times)))
    uniforms = None
    if need_uniforms:
        # at most one decision per event plus the initial one
        epochs = 2 * sum(len(a) for a in arrivals) + 2
        uniforms = _stream(seed, rep, STREAM_POLICY, 0).random((epochs, len(topology.servers)))
    return Streams(arrivals, work, uniforms)


# ----------------------------------------------------------------------------
# compiled kernel


@dataclass
class _Compiled:
    """Flat array encoding of a topology + policy for the kernel."""

    lam: np.ndarray
    cap: np.ndarray
    srv_ptr: np.ndarray
    srv_file: np.ndarray
    srv_edge: np.ndarray
    code: int
    table: np.ndarray
    max_queue: int
    weights: np.ndarray
    opt: np.ndarray
    opt_buffer: int
    cost_poly: np.ndarray
    cost_tab: np.ndarray
    cost_len: np.ndarray


def _compile(topology: NetworkTopology, policy: Policy) -> _Compiled:
    files, servers = topology.files, topology.servers
    pos = {f.id: n for n, f in enumerate(files)}
    edge_pos = {e: n for n, e in enumerate(topology.edges)}
    ptr, sf, se = [0], [], []
    for s in servers:
        for i in topology.files_on[s.id]:
            sf.append(pos[i])
            se.append(edge_pos[(i, s.id)])
        ptr.append(len(sf))
    table = np.zeros((1, 2))
    max_queue = 1
    if policy.kind == "whittle":
        table = np.ascontiguousarray(policy.table.array(list(topology.edges)))
        max_queue = policy.table.max_queue
    weights = np.ones(len(files))
    if policy.kind in ("uniform", "weighted"):
        w = split_weights(topology, policy.kind)
        weights = np.array([w[f.id] for f in files])
    opt = np.full((1, len(servers)), -1, dtype=np.int64)
    opt_buffer = 0
    if policy.kind == "optimal":
        flat = policy.optimal.flat_table()
        opt = np.where(flat >= 0, np.vectorize(lambda i: pos.get(int(i), -1))(flat), -1).astype(np.int64)
        opt_buffer = policy.optimal.buffer
    poly = np.zeros((len(files), 3))
    tab_len = np.zeros(len(files), dtype=np.int64)
    tabs = []
    for n, f in enumerate(files):
        p = f.cost.polynomial()
        if p is None:
            tab_len[n] = len(f.cost.coeffs)
            tabs.append(np.asarray(f.cost.coeffs))
        else:
            poly[n] = p
    tab = np.zeros((len(files), max([len(t) for t in tabs], default=1)))
    for n, f in enumerate(files):
        if tab_len[n]:
            tab[n, : tab_len[n]] = f.cost.coeffs
    return _Compiled(
        lam=np.array([f.arrival_rate for f in files]),
        cap=np.array([s.capacity for s in servers]),
        srv_ptr=np.array(ptr, dtype=np.int64),
        srv_file=np.array(sf, dtype=np.int64),
        srv_edge=np.array(se, dtype=np.int64),
        code=POLICY_CODES[policy.kind],
        table=table,
        max_queue=max_queue,
        weights=weights,
        opt=opt,
        opt_buffer=opt_buffer,
        cost_poly=poly,
        cost_tab=tab,
        cost_len=tab_len,
    )


@numba.njit(cache=True)
def _cost(n, x, poly, tab, tab_len):
    if tab_len[n] > 0:
        return tab[n, x]
    return poly[n, 0] + poly[n, 1] * x + poly[n, 2] * x * x


@numba.njit(cache=True)
def _index(table, e, x, q):
    if x <= q:
        return table[e, x]
    last = table[e, q]
    if last == -np.inf:
        return last
    return last + (x - q) * (last - table[e, q - 1])


@numba.njit(cache=True)
def _decide(X, cap, srv_ptr, srv_file, srv_edge, code, table, q, weights, opt, opt_b, u_row, r, edge_rate):
    r[:] = 0.0
    edge_rate[:] = 0.0
    n_files = X.shape[0]
    flat = 0
    if code == 5:
        for n in range(n_files):
            flat = flat * (opt_b + 1) + min(X[n], opt_b)
    for m in range(cap.shape[0]):
        lo, hi = srv_ptr[m], srv_ptr[m + 1]
        if code == 1 or code == 2:
            total = 0.0
            for k in range(lo, hi):
                if X[srv_file[k]] > 0:
                    total += weights[srv_file[k]]
            if total > 0.0:
                for k in range(lo, hi):
                    n = srv_file[k]
                    if X[n] > 0:
                        share = cap[m] * weights[n] / total
                        r[n] += share
                        edge_rate[srv_edge[k]] = share
            continue
        best = -1
        if code == 0:
            best_val = np.inf
            for k in range(lo, hi):
                n = srv_file[k]
                if X[n] > 0:
                    v = _index(table, srv_edge[k], X[n], q)
                    if best < 0 or v < best_val:
                        best, best_val = k, v
        elif code == 4:
            for k in range(lo, hi):
                n = srv_file[k]
                if X[n] > 0 and (best < 0 or X[n] > X[srv_file[best]]):
                    best = k
        elif code == 3:
            count = 0
            for k in range(lo, hi):
                if X[srv_file[k]] > 0:
                    count += 1
            if count > 0:
                pick = min(int(u_row[m] * count), count - 1)
                for k in range(lo, hi):
                    if X[srv_file[k]] > 0:
                        if pick == 0:
                            best = k
                            break
                        pick -= 1
        elif code == 5:
            target = opt[flat, m]
            if target >= 0 and X[target] > 0:
                for k in range(lo, hi):
                    if srv_file[k] == target:
                        best = k
        if best >= 0:
            r[srv_file[best]] += cap[m]
            edge_rate[srv_edge[best]] = cap[m]


@numba.njit(cache=True)
def _kernel(
    lam, cap, srv_ptr, srv_file, srv_edge, code, table, q, weights, opt, opt_b,
    poly, tab, tab_len, arr, arr_ptr, work, uniforms, horizon, warmup,
    record, rec_time, rec_kind, rec_file, rec_state, rec_alloc, n_edges,
):
    n_files = lam.shape[0]
    X = np.zeros(n_files, dtype=np.int64)
    W = np.zeros(n_files)
    r = np.zeros(n_files)
    edge_rate = np.zeros(n_edges)
    next_arr = arr_ptr[:-1].copy()
    next_job = arr_ptr[:-1].copy()
    n_arr = np.zeros(n_files, dtype=np.int64)
    n_dep = np.zeros(n_files, dtype=np.int64)
    cost_now = 0.0
    for n in range(n_files):
        cost_now += _cost(n, 0, poly, tab, tab_len)
    epoch = 0
    _decide(X, cap, srv_ptr, srv_file, srv_edge, code, table, q, weights, opt, opt_b, uniforms[0], r, edge_rate)
    t = 0.0
    total = 0.0
    events = 0
    while True:
        best_t = np.inf
        kind = -1
        who = -1
        for n in range(n_files):
            if next_arr[n] < arr_ptr[n + 1] and arr[next_arr[n]] < best_t:
                best_t, kind, who = arr[next_arr[n]], 0, n
        for n in range(n_files):
            if X[n] > 0 and r[n] > 0.0:
                td = t + W[n] / r[n]
                if td < best_t:
                    best_t, kind, who = td, 1, n
        stop = best_t > horizon
        t_end = horizon if stop else best_t
        a, b = max(t, warmup), min(t_end, horizon)
        if b > a:
            total += cost_now * (b - a)
        if stop:
            break
        dt = best_t - t
        for n in range(n_files):
            if X[n] > 0 and r[n] > 0.0:
                W[n] -= r[n] * dt
        t = best_t
        n = who
        if kind == 0:
            X[n] += 1
            n_arr[n] += 1
            next_arr[n] += 1
            if X[n] == 1:
                W[n] = work[next_job[n]]
                next_job[n] += 1
        else:
            X[n] -= 1
            n_dep[n] += 1
            if X[n] > 0:
                W[n] = work[next_job[n]]
                next_job[n] += 1
            else:
                W[n] = 0.0
        if tab_len[n] > 0 and X[n] >= tab_len[n]:
            return total, X, n_arr, n_dep, events, 1
        cost_now = 0.0
        for k in range(n_files):
            cost_now += _cost(k, X[k], poly, tab, tab_len)
        epoch += 1
        if epoch >= uniforms.shape[0]:
            return total, X, n_arr, n_dep, events, 2
        _decide(X, cap, srv_ptr, srv_file, srv_edge, code, table, q, weights, opt, opt_b, uniforms[epoch], r, edge_rate)
        if record:
            rec_time[events] = t
            rec_kind[events] = kind
            rec_file[events] = n
            rec_state[events, :] = X
            rec_alloc[events, :] = edge_rate
        events += 1
    return total, X, n_arr, n_dep, events, 0


def simulate_replication(config: SimConfig, rep: int, streams: Streams | None = None) -> SimTrace:
    """One replication on the compiled kernel."""
    topo = config.topology
    c = _compile(topo, config.policy)
    if streams is None:
        streams = draw_streams(topo, config.horizon, config.seed, rep, config.policy.kind == "random")
    arr_ptr = np.concatenate([[0], np.cumsum([len(a) for a in streams.arrivals])]).astype(np.int64)
    arr = np.concatenate(streams.arrivals + [np.empty(0)])
    work = np.concatenate(streams.work + [np.empty(0)])
    n_files, n_edges = len(topo.files), len(topo.edges)
    if streams.uniforms is not None:
        uniforms = streams.uniforms
    else:
        uniforms = np.zeros((2 * len(arr) + 2, len(topo.servers)))
    cap = 2 * len(arr) + 1 if config.record else 1
    rec_time = np.zeros(cap)
    rec_kind = np.zeros(cap, dtype=np.int8)
    rec_file = np.zeros(cap, dtype=np.int64)
    rec_state = np.zeros((cap, n_files), dtype=np.int64)
    rec_alloc = np.zeros((cap, n_edges))
    total, X, n_arr, n_dep, events, status = _kernel(
        c.lam, c.cap, c.srv_ptr, c.srv_file, c.srv_edge, c.code, c.table, c.max_queue, c.weights,
        c.opt, c.opt_buffer, c.cost_poly, c.cost_tab, c.cost_len, arr, arr_ptr, work, uniforms,
        float(config.horizon), float(config.warmup), config.record,
        rec_time, rec_kind, rec_file, rec_state, rec_alloc, n_edges,
    )
    if status == STATUS_COST_RANGE:
        raise SimulationError("queue length left the range of a tabulated cost")
    if status == STATUS_RNG_EXHAUSTED:
        raise SimulationError("pre-drawn policy randomness exhausted")
    trace = SimTrace(float(total), config.horizon, config.warmup, X.copy(), n_arr.copy(), n_dep.copy(), int(events))
    if config.record:
        trace.times = rec_time[:events].copy()
        trace.kinds = rec_kind[:events].copy()
        trace.files = rec_file[:events].copy()
        trace.states = rec_state[:events].copy()
        trace.allocations = rec_alloc[:events].copy()
    return trace


def simulate_reference(config: SimConfig, rep: int, streams: Streams | None = None) -> SimTrace:
    """Plain-Python event loop driven by ``Policy.decide``.

    Slow; exists to cross-check the compiled kernel on short horizons.
    """
    topo = config.topology
    if streams is None:
        streams = draw_streams(topo, config.horizon, config.seed, rep, config.policy.kind == "random")
    files = topo.files
    n_files = len(files)
    edge_pos = {e: n for n, e in enumerate(topo.edges)}

    class _Rows:
        # hands out one row of pre-drawn uniforms per server, in order
        def __init__(self, u):
            self.u, self.epoch, self.col = u, 0, 0

        def random(self):
            v = self.u[self.epoch, self.col]
            self.col += 1
            return float(v)

        def next_epoch(self):
            self.epoch += 1
            self.col = 0

    rows = _Rows(streams.uniforms) if streams.uniforms is not None else None
    X = [0] * n_files
    W = [0.0] * n_files
    next_arr = [0] * n_files
    next_job = [0] * n_files
    n_arr = [0] * n_files
    n_dep = [0] * n_files

    def decide():
        alloc = config.policy.decide(X, rows)
        return alloc, alloc.departure_rates(topo)

    def cost_of(state):
        out = 0.0
        for n, f in enumerate(files):
            out += f.cost(state[n])
        return out

    alloc, r = decide()
    cost_now = cost_of(X)
    t, total = 0.0, 0.0
    times, kinds, who_list, states, allocs = [], [], [], [], []
    while True:
        best_t, kind, who = math.inf, -1, -1
        for n in range(n_files):
            a = streams.arrivals[n]
            if next_arr[n] < len(a) and a[next_arr[n]] < best_t:
                best_t, kind, who = a[next_arr[n]], ARRIVAL, n
        for n in range(n_files):
            if X[n] > 0 and r[n] > 0.0:
                td = t + W[n] / r[n]
                if td < best_t:
                    best_t, kind, who = td, DEPARTURE, n
        stop = best_t > config.horizon
        lo, hi = max(t, config.warmup), min(config.horizon if stop else best_t, config.horizon)
        if hi > lo:
            total += cost_now * (hi - lo)
        if stop:
            break
        dt = best_t - t
        for n in range(n_files):
            if X[n] > 0 and r[n] > 0.0:
                W[n] -= r[n] * dt
        t = best_t
        n = who
        if kind == ARRIVAL:
            X[n] += 1
            n_arr[n] += 1
            next_arr[n] += 1
            if X[n] == 1:
                W[n] = streams.work[n][next_job[n]]
                next_job[n] += 1
        else:
            X[n] -= 1
            n_dep[n] += 1
            if X[n] > 0:
                W[n] = streams.work[n][next_job[n]]
                next_job[n] += 1
            else:
                W[n] = 0.0
        cost_now = cost_of(X)
        if rows is not None:
            rows.next_epoch()
        alloc, r = decide()
        if config.record:
            times.append(t)
            kinds.append(kind)
            who_list.append(n)
            states.append(list(X))
            row = np.zeros(len(topo.edges))
            for e, v in alloc.rates.items():
                row[edge_pos[e]] = v
            allocs.append(row)
    trace = SimTrace(total, config.horizon, config.warmup, np.array(X), np.array(n_arr), np.array(n_dep), len(times) if config.record else sum(n_arr) + sum(n_dep))
    if config.record:
        trace.times = np.array(times)
        trace.kinds = np.array(kinds, dtype=np.int8)
        trace.files = np.array(who_list, dtype=np.int64)
        trace.states = np.array(states, dtype=np.int64).reshape(-1, n_files)
        trace.allocations = np.array(allocs).reshape(-1, len(topo.edges))
    return trace


def run(config: SimConfig) -> SimResult:
    """All replications of one policy, with the cross-replication estimate."""
    traces = [simulate_replication(config, rep) for rep in range(config.replications)]
    return SimResult(config, traces, CostEstimate.from_samples([tr.average_cost for tr in traces]))


@dataclass
class Comparison:
    results: dict[str, SimResult]
    differences: dict[tuple[str, str], CostEstimate]

    @property
    def estimates(self) -> dict[str, CostEstimate]:
        return {name: res.estimate for name, res in self.results.items()}

    def to_json(self) -> dict:
        return {
            "policies": {name: res.to_json() for name, res in self.results.items()},
            "differences": [
                {"a": a, "b": b, **est.to_dict()} for (a, b), est in self.differences.items()
            ],
        }


def compare(
    topology: NetworkTopology,
    policies: list[Policy],
    horizon: float,
    seed: int = 0,
    replications: int = 1,
    warmup: float | None = None,
    labels: list[str] | None = None,
) -> Comparison:
    """Run every policy on the same per-replication streams and difference them pairwise."""
    if len(policies) < 2:
        raise ValueError("compare needs at least two policies")
    labels = labels or [p.kind for p in policies]
    if len(set(labels)) != len(labels):
        raise ValueError("policy labels must be unique")
    need_u = any(p.kind == "random" for p in policies)
    configs = {
        lab: SimConfig(topology, p, horizon, warmup, seed, replications) for lab, p in zip(labels, policies)
    }
    traces = {lab: [] for lab in labels}
    for rep in range(replications):
        streams = draw_streams(topology, horizon, seed, rep, need_u)
        for lab in labels:
            traces[lab].append(simulate_replication(configs[lab], rep, streams))
    results = {
        lab: SimResult(configs[lab], traces[lab], CostEstimate.from_samples([t.average_cost for t in traces[lab]]))
        for lab in labels
    }
    diffs = {}
    for n, a in enumerate(labels):
        for b in labels[n + 1 :]:
            d = results[a].estimate.per_replication - results[b].estimate.per_replication
            diffs[(a, b)] = CostEstimate.from_samples(d)
    return Comparison(results, diffs)


def dump_json(obj, path: str | Path | None = None) -> str:
    """JSON with NaN mapped to null and floats at 12 significant digits."""

    def clean(v):
        if isinstance(v, float):
            return None if math.isnan(v) else float(f"{v:.12g}")
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return clean(v.item())
        return v

    text = json.dumps(clean(obj), indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text
