import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdn_whittle.index import IndexTable, build_index_table
from cdn_whittle.model import CostFunction, NetworkTopology
from cdn_whittle.policies import (
    Allocation,
    Policy,
    SystemState,
    max_weight_decide,
    random_decide,
    uniform_decide,
    weighted_decide,
    whittle_decide,
)

L = CostFunction.linear


def one_server(lams=(0.1, 0.2), mu=0.3):
    return NetworkTopology.build(list(lams), [L(1)] * len(lams), [mu], [(i + 1, 1) for i in range(len(lams))])


def test_whittle_empty_and_single(fig5, fig5_table):
    assert whittle_decide((0, 0, 0), fig5_table, fig5).rates == {}
    a = whittle_decide((0, 3, 0), fig5_table, fig5)
    assert a.rates == {(2, 1): 0.2, (2, 2): 0.3}


def test_whittle_picks_minimum_index(fig5, fig5_table):
    state = (4, 9, 1)
    a = whittle_decide(state, fig5_table, fig5)
    for s in fig5.servers:
        cands = [i for i in fig5.files_on[s.id] if state[i - 1] > 0]
        best = min(cands, key=lambda i: fig5_table.lookup(i, s.id, state[i - 1]))
        assert a.rates == {**a.rates, (best, s.id): s.capacity}
    assert a.violations(fig5, state) == []


def test_whittle_shift_invariance(fig5, fig5_table):
    shifted = IndexTable(
        {k: v + 123.0 for k, v in fig5_table.values.items()}, fig5_table.residuals, "direct", fig5_table.max_queue, 200
    )
    rng = np.random.default_rng(1)
    for _ in range(200):
        state = tuple(rng.integers(0, 60, 3))
        assert whittle_decide(state, fig5_table, fig5).rates == whittle_decide(state, shifted, fig5).rates


def test_whittle_tie_goes_to_lowest_file(fig5_chain):
    tab = build_index_table(fig5_chain, max_queue=10)
    # file 1 is the sole holder at server 1 (index -inf) and wins there
    assert whittle_decide((2, 2, 0), tab, fig5_chain).rate(1, 1) == 0.2


def test_whittle_missing_entry(fig5):
    tab = IndexTable({(1, 1): np.zeros(3)}, {(1, 1): np.zeros(3)}, "direct", 2, 20)
    with pytest.raises(KeyError, match=r"file 2, server 1, x 5"):
        whittle_decide((1, 5, 0), tab, fig5)


def test_uniform():
    topo = one_server()
    assert uniform_decide((2, 3), topo).rates == {(1, 1): 0.15, (2, 1): 0.15}
    assert uniform_decide((0, 3), topo).rates == {(2, 1): 0.3}
    assert uniform_decide((0, 0), topo).rates == {}


def test_weighted():
    topo = one_server()
    a = weighted_decide((1, 1), topo)
    assert a.rate(1, 1) == pytest.approx(0.1) and a.rate(2, 1) == pytest.approx(0.2)
    assert weighted_decide((0, 5), topo).rates == {(2, 1): 0.3}
    eq = one_server((0.2, 0.2))
    assert weighted_decide((1, 4), eq).rates == uniform_decide((1, 4), eq).rates


def test_random():
    topo = one_server()
    rng = np.random.default_rng(0)
    assert random_decide((0, 3), topo, rng).rates == {(2, 1): 0.3}
    assert random_decide((0, 0), topo, rng).rates == {}
    picks = [random_decide((1, 1), topo, rng).rate(1, 1) > 0 for _ in range(100_000)]
    assert np.mean(picks) == pytest.approx(0.5, abs=0.01)
    a = [random_decide((1, 1), topo, np.random.default_rng(5)).rates for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_max_weight():
    topo = one_server()
    assert max_weight_decide((3, 5), topo).rates == {(2, 1): 0.3}
    assert max_weight_decide((4, 4), topo).rates == {(1, 1): 0.3}
    assert max_weight_decide((0, 0), topo).rates == {}


@st.composite
def network_and_state(draw):
    n = draw(st.integers(1, 5))
    m = draw(st.integers(1, 4))
    edges = {(i + 1, draw(st.integers(1, m))) for i in range(n)}
    edges |= {(draw(st.integers(1, n)), draw(st.integers(1, m))) for _ in range(draw(st.integers(0, 6)))}
    lams = [draw(st.floats(0.01, 1.0)) for _ in range(n)]
    caps = [draw(st.floats(0.01, 2.0)) for _ in range(m)]
    topo = NetworkTopology.build(lams, [L(1 + i) for i in range(n)], caps, sorted(edges))
    state = tuple(draw(st.integers(0, 70)) for _ in range(n))
    return topo, state


@settings(max_examples=40, deadline=None)
@given(network_and_state(), st.integers(0, 2**32 - 1))
def test_every_policy_is_feasible(ns, seed):
    topo, state = ns
    table = build_index_table(topo, max_queue=12, n_max=40)
    rng = np.random.default_rng(seed)
    for kind in ("whittle", "uniform", "weighted", "random", "max_weight"):
        a = Policy(kind, topo, table=table).decide(state, rng)
        assert a.violations(topo, state) == []
        for s in topo.servers:
            busy = any(state[i - 1] > 0 for i in topo.files_on[s.id])
            load = sum(r for (i, j), r in a.rates.items() if j == s.id)
            assert (load > 0) == busy  # work-conserving


def test_policy_construction_errors(fig5):
    with pytest.raises(ValueError):
        Policy("whittle", fig5)
    with pytest.raises(ValueError):
        Policy("optimal", fig5)
    with pytest.raises(ValueError):
        Policy("fastest", fig5)
    with pytest.raises(NotImplementedError):
        Policy("balanced_fair", fig5)
    with pytest.raises(ValueError):
        Policy("random", fig5).decide((1, 1, 1))


def test_allocation_violations(fig5):
    a = Allocation({(1, 1): 0.5, (2, 1): 0.1})
    problems = a.violations(fig5, (0, 1, 0))
    assert any("exceeds capacity" in p for p in problems)
    assert any("file 1 is empty" in p for p in problems)
    np.testing.assert_allclose(a.departure_rates(fig5), [0.5, 0.1, 0.0])


def test_system_state():
    s = SystemState((1, 2))
    assert len(s) == 2 and s[1] == 2
    with pytest.raises(ValueError):
        SystemState((1, -1))
