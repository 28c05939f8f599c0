import numpy as np
import pytest

from cdn_whittle.model import (
    CostFunction,
    FileType,
    NetworkTopology,
    PairParameters,
    Server,
    TopologyError,
    all_pairs,
    pair_parameters,
    validate_topology,
)

L = CostFunction.linear


def test_two_by_two_is_valid():
    topo = NetworkTopology.build([0.2, 0.1], [L(13), L(10)], [0.2, 0.2], [(1, 1), (1, 2), (2, 1), (2, 2)])
    assert validate_topology(topo) == []


def test_boundary_load_is_rejected():
    topo = NetworkTopology.build([0.2], [L(1)], [0.2], [(1, 1)])
    report = validate_topology(topo)
    assert any("Σμ > Λ fails" in r and "file 1" in r for r in report)


def test_unserved_file():
    topo = NetworkTopology.build([0.1, 0.1], [L(1), L(1)], [0.5], [(1, 1)])
    assert any("unserved file" in r and "file 2" in r for r in validate_topology(topo))


def test_unknown_and_duplicate_ids():
    files = (FileType(1, 0.1, L(1)), FileType(1, 0.1, L(1)))
    topo = NetworkTopology(files, (Server(1, 1.0),), ((1, 1), (1, 7), (9, 1)))
    report = validate_topology(topo)
    assert any("duplicate file ids" in r for r in report)
    assert any("unknown server 7" in r for r in report)
    assert any("unknown file 9" in r for r in report)


def test_nonpositive_rates():
    topo = NetworkTopology.build([0.0], [L(1)], [-1.0], [(1, 1)])
    report = validate_topology(topo)
    assert any("arrival rate" in r for r in report)
    assert any("capacity" in r for r in report)


def test_cost_shape_violations():
    concave = CostFunction.tabulated([0, 5, 8, 9, 9.5])
    assert any("not convex" in v for v in concave.violations())
    decreasing = CostFunction.tabulated([3, 2, 4])
    assert any("decreasing" in v for v in decreasing.violations())
    flat_tail = CostFunction.tabulated([0, 0, 0])
    assert any("tail" in v for v in flat_tail.violations())
    assert CostFunction.quadratic(1, 2).violations() == []


def test_short_tabulated_cost_reported():
    topo = NetworkTopology.build([0.1], [CostFunction.tabulated(range(10))], [1.0], [(1, 1)])
    assert any("covers 0..9" in r for r in validate_topology(topo, cost_bound=50))


def test_cost_evaluation():
    q = CostFunction.quadratic(2.0, 1.0)
    assert q(3) == 21.0
    np.testing.assert_array_equal(q(np.arange(3)), [0.0, 3.0, 10.0])
    with pytest.raises(ValueError):
        q(-1)
    t = CostFunction.tabulated([0, 1, 3])
    assert t(2) == 3.0
    with pytest.raises(ValueError):
        t(3)
    with pytest.raises(ValueError):
        CostFunction("cubic", (1,))
    with pytest.raises(ValueError):
        CostFunction("linear", (1, 2))


def test_shared_file_pair(fig5_chain):
    p = pair_parameters(fig5_chain, 2, 1)
    lam, mu_k, mu_hat = p.rates
    assert lam == pytest.approx(0.2)
    assert mu_k == pytest.approx(0.2)
    assert mu_hat == pytest.approx(0.3)


def test_sole_holder_has_zero_mu_hat(fig5_chain):
    p = pair_parameters(fig5_chain, 1, 1)
    assert p.mu_hat == 0.0 and p.sole_server


def test_uniformization_scale():
    topo = NetworkTopology.build([0.2], [L(1)], [0.15, 0.25], [(1, 1), (1, 2)])
    p = pair_parameters(topo, 1, 1, epsilon=0.05)
    assert p.scale == pytest.approx(0.6 / 0.95)
    assert p.scale == pytest.approx(0.6316, abs=1e-4)
    assert p.lambda_arr + p.mu_k + p.mu_hat == pytest.approx(0.95, abs=1e-15)
    assert p.lambda_arr * p.scale == pytest.approx(0.2, abs=1e-15)


def test_missing_pair(fig5_chain):
    with pytest.raises(TopologyError, match="pair not in topology"):
        pair_parameters(fig5_chain, 1, 2)


def test_rescaled_rates_give_same_parameters(fig10):
    for c in (0.5, 3.0, 17.0):
        for a, b in zip(all_pairs(fig10), all_pairs(fig10.scaled(c))):
            assert a.lambda_arr == pytest.approx(b.lambda_arr, rel=1e-14)
            assert a.mu_k == pytest.approx(b.mu_k, rel=1e-14)
            assert a.mu_hat == pytest.approx(b.mu_hat, rel=1e-14)


def test_presets_validate(fig3, fig5, fig5_chain, fig10):
    for topo in (fig3, fig5, fig5_chain, fig10):
        assert validate_topology(topo) == []


def test_adjacency(fig10):
    assert fig10.servers_of[10] == (1, 10)
    assert fig10.files_on[1] == (1, 10)
    assert fig10.pooled_capacity(2) == pytest.approx(0.5)
    with pytest.raises(TopologyError):
        fig10.file(11)


def test_parameter_guards():
    with pytest.raises(ValueError):
        PairParameters.from_rates(0.1, 0.1, 0.1, L(1), epsilon=1.0)
    with pytest.raises(ValueError):
        PairParameters.from_rates(-0.1, 0.1, 0.1, L(1))
