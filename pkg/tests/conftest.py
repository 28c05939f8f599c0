import pytest

from cdn_whittle.index import build_index_table
from cdn_whittle.scenario import load_scenario


@pytest.fixture(scope="session")
def fig3():
    return load_scenario("fig3").topology


@pytest.fixture(scope="session")
def fig5():
    return load_scenario("fig5").topology


@pytest.fixture(scope="session")
def fig5_chain():
    return load_scenario("fig5-chain").topology


@pytest.fixture(scope="session")
def fig10():
    return load_scenario("fig10").topology


@pytest.fixture(scope="session")
def fig5_table(fig5):
    return build_index_table(fig5)


@pytest.fixture(scope="session")
def fig3_table(fig3):
    return build_index_table(fig3)
