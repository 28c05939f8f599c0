import pytest

from cdn_whittle.scenario import PRESETS, ScenarioError, load_scenario, parse_scenario

BASE = """\
schema_version: 1
name: tiny
files:
  - {id: 1, lambda: 0.1, cost: {kind: linear, coeffs: [2]}}
  - {id: 2, lambda: 0.1, cost: {kind: quadratic, coeffs: [1, 0.5]}}
servers:
  - {id: 1, mu: 0.5}
edges:
  - {file: 1, server: 1}
  - {file: 2, server: 1}
"""


def params(topo):
    return (
        [f.arrival_rate for f in topo.files],
        [f.cost.coeffs for f in topo.files],
        [s.capacity for s in topo.servers],
        list(topo.edges),
    )


def test_fig3_preset():
    lam, cost, mu, edges = params(load_scenario("fig3").topology)
    assert lam == [0.2, 0.1] and cost == [(13.0,), (10.0,)] and mu == [0.2, 0.2]
    assert edges == [(1, 1), (1, 2), (2, 1), (2, 2)]


def test_fig5_presets():
    for name, edges in [
        ("fig5", [(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)]),
        ("fig5-chain", [(1, 1), (2, 1), (2, 2), (3, 2)]),
    ]:
        lam, cost, mu, e = params(load_scenario(name).topology)
        assert lam == [0.1, 0.2, 0.1] and cost == [(10.0,), (20.0,), (10.0,)] and mu == [0.2, 0.3]
        assert e == edges


def test_fig10_preset():
    topo = load_scenario("fig10").topology
    assert len(topo.files) == len(topo.servers) == 10
    assert set(topo.edges) == {(i, i) for i in range(1, 11)} | {(i, i % 10 + 1) for i in range(1, 11)}
    classes = {
        (0.2, 15.0, 0.2): [1, 4, 7, 10],
        (0.3, 20.0, 0.3): [2, 5, 8],
        (0.1, 10.0, 0.2): [3, 6, 9],
    }
    for (lam, c, mu), ids in classes.items():
        for i in ids:
            f = topo.file(i)
            assert (f.arrival_rate, f.cost.coeffs[0], topo.server(i).capacity) == (lam, c, mu)


@pytest.mark.parametrize("name", PRESETS)
def test_round_trip(name):
    scn = load_scenario(name)
    again = parse_scenario(scn.dump())
    assert again.to_dict() == scn.to_dict()
    assert again.digest() == scn.digest()


def test_digest_tracks_content():
    a = parse_scenario(BASE)
    assert parse_scenario(BASE).digest() == a.digest()
    assert parse_scenario(BASE.replace("mu: 0.5", "mu: 0.6")).digest() != a.digest()


def test_unknown_key_has_line_number():
    with pytest.raises(ScenarioError, match=r"line 7: unknown key 'speed'"):
        parse_scenario(BASE.replace("{id: 1, mu: 0.5}", "{id: 1, mu: 0.5, speed: 2}"))


def test_bad_number():
    with pytest.raises(ScenarioError, match=r"line 4: files\[0\].lambda must be a number"):
        parse_scenario(BASE.replace("lambda: 0.1", "lambda: fast", 1))


def test_exponent_strings_are_numbers():
    scn = parse_scenario(BASE + "index: {tol: 1e-6}\n")
    assert scn.index.tol == 1e-6


def test_policy_names():
    with pytest.raises(ScenarioError, match="reserved"):
        parse_scenario(BASE + "experiment: {policies: [whittle, balanced_fair]}\n")
    with pytest.raises(ScenarioError, match="unknown policy 'greedy'"):
        parse_scenario(BASE + "experiment: {policies: [greedy]}\n")


def test_empty_edges():
    text = BASE.split("edges:")[0] + "edges: []\n"
    with pytest.raises(ScenarioError, match="edge list is empty"):
        parse_scenario(text)


def test_schema_version_and_required_keys():
    with pytest.raises(ScenarioError, match="unsupported schema_version 2"):
        parse_scenario(BASE.replace("schema_version: 1", "schema_version: 2"))
    with pytest.raises(ScenarioError, match="missing required key 'servers'"):
        parse_scenario(BASE.split("servers:")[0])


def test_invalid_topology_is_reported():
    with pytest.raises(ScenarioError, match="invalid topology"):
        parse_scenario(BASE.replace("{file: 2, server: 1}", "{file: 2, server: 9}"))


def test_unknown_preset():
    with pytest.raises(ScenarioError, match="scenario not found"):
        load_scenario("fig99")
