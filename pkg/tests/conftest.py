from pathlib import Path

import pytest

from dosm.catalog import load_catalog

DATA = Path(__file__).parent / "data"
TINY = DATA / "tiny.ini"


@pytest.fixture(scope="session")
def catalog():
    return load_catalog(seed=0)


@pytest.fixture(scope="session")
def tiny_scenario():
    from dosm.sim import build_scenario, parse_scenario
    return build_scenario(parse_scenario(str(TINY)), seed=1)
