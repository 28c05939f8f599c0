import numpy as np
import pytest

from cdn_whittle.model import CostFunction, NetworkTopology
from cdn_whittle.optimal import (
    StateSpaceGuardError,
    ValueIterationConvergenceError,
    optimal_policy_vi,
)

L = CostFunction.linear


@pytest.fixture(scope="module")
def fig3_opt(fig3):
    return optimal_policy_vi(fig3, 60)


def test_fig3_converges(fig3_opt):
    assert fig3_opt.gap < 1e-8
    # serving the costlier file first is optimal here
    assert fig3_opt.average_cost == pytest.approx(33.0, abs=1e-4)
    assert tuple(fig3_opt.server_choices((3, 3))) == (1, 1)
    assert tuple(fig3_opt.server_choices((0, 0))) == (-1, -1)


def test_buffer_doubling(fig3, fig3_opt):
    assert optimal_policy_vi(fig3, 120).average_cost == pytest.approx(fig3_opt.average_cost, rel=1e-6)


def test_values_convex_along_axes(fig3_opt):
    # away from the buffer, where the reflecting edge bends the values
    V = fig3_opt.values[:25, :25]
    assert np.all(np.diff(V, 2, axis=0) >= -1e-7)
    assert np.all(np.diff(V, 2, axis=1) >= -1e-7)


def test_symmetric_instance():
    topo = NetworkTopology.build([0.15, 0.15], [L(4), L(4)], [0.2, 0.2], [(1, 1), (1, 2), (2, 1), (2, 2)])
    opt = optimal_policy_vi(topo, 30)
    np.testing.assert_allclose(opt.values, opt.values.T, atol=1e-6)
    for x1 in range(8):
        for x2 in range(8):
            if x1 == x2:
                continue
            a = opt.decide((x1, x2)).departure_rates(topo)
            b = opt.decide((x2, x1)).departure_rates(topo)
            np.testing.assert_allclose(a, b[::-1])


def test_no_arrivals():
    topo = NetworkTopology.build([0.0, 0.0], [CostFunction.tabulated([2.0 + x for x in range(11)])] * 2, [0.3], [(1, 1), (2, 1)])
    assert optimal_policy_vi(topo, 10).average_cost == pytest.approx(4.0, abs=1e-8)


def test_guard(fig10):
    with pytest.raises(StateSpaceGuardError, match="states"):
        optimal_policy_vi(fig10, 60)


def test_sweep_limit(fig3):
    with pytest.raises(ValueIterationConvergenceError):
        optimal_policy_vi(fig3, 20, max_sweeps=3)


def test_csv_and_clamp(fig3, tmp_path):
    opt = optimal_policy_vi(fig3, 6)
    text = opt.to_csv(tmp_path / "opt.csv")
    assert text.splitlines()[0] == "x1,x2,server1,server2"
    assert len(text.splitlines()) == 1 + 49
    assert opt.decide((50, 2)).rates == opt.decide((6, 2)).rates
    assert opt.decide((3, 0)).violations(fig3, (3, 0)) == []
