import json
import math

import numpy as np
import pytest
import scipy.stats

from cdn_whittle.model import CostFunction, NetworkTopology
from cdn_whittle.optimal import optimal_policy_vi
from cdn_whittle.policies import Policy
from cdn_whittle.simulator import (
    ARRIVAL,
    CostEstimate,
    SimConfig,
    compare,
    draw_streams,
    dump_json,
    run,
    simulate_reference,
    simulate_replication,
)

MM1 = NetworkTopology.build([0.2], [CostFunction.linear(1)], [0.4], [(1, 1)])


def mm1_config(**kw):
    kw.setdefault("horizon", 5e4)
    return SimConfig(MM1, Policy("uniform", MM1), **kw)


def test_short_mm1():
    est = run(mm1_config(horizon=2e5, seed=3, replications=4)).estimate
    assert est.mean == pytest.approx(1.0, rel=0.1)


def test_no_arrivals_constant_cost():
    topo = NetworkTopology.build([0.0], [CostFunction.tabulated([3.0, 4.0])], [1.0], [(1, 1)])
    tr = simulate_replication(SimConfig(topo, Policy("uniform", topo), 100.0), 0)
    assert tr.average_cost == pytest.approx(3.0, abs=1e-12)
    assert tr.events == 0


def test_bitwise_determinism(fig5, fig5_table):
    cfg = SimConfig(fig5, Policy("whittle", fig5, table=fig5_table), 2e4, seed=11, replications=3)
    a, b = run(cfg).estimate, run(cfg).estimate
    assert a.per_replication.tobytes() == b.per_replication.tobytes()
    assert a.mean == b.mean and a.ci_halfwidth == b.ci_halfwidth
    c = run(SimConfig(fig5, cfg.policy, 2e4, seed=12, replications=3)).estimate
    assert c.mean != a.mean


@pytest.fixture(scope="module")
def fig3_optimal(fig3):
    return optimal_policy_vi(fig3, 60)


@pytest.mark.parametrize("kind", ["whittle", "uniform", "weighted", "random", "max_weight", "optimal"])
def test_kernel_matches_reference(kind, fig3, fig3_table, fig3_optimal):
    pol = Policy(kind, fig3, table=fig3_table, optimal=fig3_optimal if kind == "optimal" else None)
    cfg = SimConfig(fig3, pol, 3e3, seed=5, record=True)
    fast, slow = simulate_replication(cfg, 0), simulate_reference(cfg, 0)
    assert fast.integrated_cost == slow.integrated_cost
    np.testing.assert_array_equal(fast.times, slow.times)
    np.testing.assert_array_equal(fast.states, slow.states)
    np.testing.assert_array_equal(fast.allocations, slow.allocations)


@pytest.mark.parametrize("kind", ["whittle", "uniform", "weighted", "random", "max_weight"])
def test_trace_invariants(kind, fig5, fig5_table):
    cfg = SimConfig(fig5, Policy(kind, fig5, table=fig5_table), 5e3, seed=2, record=True)
    tr = simulate_replication(cfg, 0)
    assert np.all(np.diff(tr.times) > 0)
    assert np.all(tr.states >= 0)
    np.testing.assert_array_equal(tr.arrivals - tr.departures, tr.final_state)
    caps = {s.id: s.capacity for s in fig5.servers}
    for state, alloc in zip(tr.states, tr.allocations):
        load = dict.fromkeys(caps, 0.0)
        for (i, j), r in zip(fig5.edges, alloc):
            assert r >= 0
            if state[i - 1] == 0:
                assert r == 0
            load[j] += r
        for j, c in caps.items():
            assert load[j] <= c + 1e-12


def test_identical_policy_difference_is_zero(fig5):
    cmp = compare(fig5, [Policy("max_weight", fig5)] * 2, 1e4, seed=4, replications=5, labels=["a", "b"])
    d = cmp.differences[("a", "b")]
    assert d.mean == 0.0
    lo, hi = d.interval
    assert lo <= 0 <= hi


def test_uniform_and_weighted_agree_under_equal_rates():
    topo = NetworkTopology.build(
        [0.1, 0.1], [CostFunction.linear(2), CostFunction.linear(5)], [0.2, 0.3], [(1, 1), (1, 2), (2, 1), (2, 2)]
    )
    a = simulate_replication(SimConfig(topo, Policy("uniform", topo), 1e4, seed=9, record=True), 0)
    b = simulate_replication(SimConfig(topo, Policy("weighted", topo), 1e4, seed=9, record=True), 0)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.integrated_cost == b.integrated_cost


def test_service_durations_are_exponential():
    tr = simulate_replication(mm1_config(horizon=6e4, warmup=0.0, seed=21, record=True), 0)
    durations, start = [], None
    for t, kind, x in zip(tr.times, tr.kinds, tr.states[:, 0]):
        if kind == ARRIVAL:
            if x == 1:
                start = t
        else:
            durations.append(t - start)
            start = t if x > 0 else None
    durations = np.array(durations[:10_000])
    assert len(durations) == 10_000
    assert scipy.stats.kstest(durations, "expon", args=(0, 1 / 0.4)).pvalue > 0.01


def test_ci_shrinks_like_root_horizon():
    a = run(mm1_config(horizon=2e4, seed=31, replications=20)).estimate.ci_halfwidth
    b = run(mm1_config(horizon=4e4, seed=31, replications=20)).estimate.ci_halfwidth
    assert math.sqrt(2) / 1.6 <= a / b <= math.sqrt(2) * 1.6


def test_streams_are_shared_across_policies(fig5):
    s1 = draw_streams(fig5, 100.0, 7, 0, False)
    s2 = draw_streams(fig5, 100.0, 7, 0, True)
    for x, y in zip(s1.arrivals, s2.arrivals):
        np.testing.assert_array_equal(x, y)
    assert s1.uniforms is None and s2.uniforms.shape[1] == 2


def test_single_replication_has_no_ci():
    res = run(mm1_config(horizon=1e3))
    out = res.to_json()
    assert out["ci"] is None and out["ci_status"] == "not-available"
    assert json.loads(dump_json(out))["ci"] is None


def test_estimate_from_samples():
    est = CostEstimate.from_samples([1.0, 2.0, 3.0])
    assert est.mean == 2.0
    assert est.ci_halfwidth == pytest.approx(scipy.stats.t.ppf(0.975, 2) / math.sqrt(3))


def test_exports(tmp_path, fig5):
    tr = simulate_replication(SimConfig(fig5, Policy("uniform", fig5), 200.0, seed=1, record=True), 0)
    text = tr.to_csv(fig5, tmp_path / "trace.csv")
    lines = text.splitlines()
    assert lines[0] == "time,event,x1,x2,x3"
    assert len(lines) == tr.events + 1
    assert (tmp_path / "trace.csv").read_text() == text
    res = run(SimConfig(fig5, Policy("uniform", fig5), 500.0, seed=1, replications=2))
    data = json.loads(dump_json(res.to_json(), tmp_path / "est.json"))
    assert {"policy", "mean", "ci", "replications", "horizon", "seed"} <= set(data)


def test_config_validation():
    with pytest.raises(ValueError):
        mm1_config(horizon=10.0, warmup=20.0)
    with pytest.raises(ValueError):
        mm1_config(replications=0)
    assert mm1_config(horizon=10.0).warmup == 1.0
