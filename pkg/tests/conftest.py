import pytest

from mapreloc.geom import MapSpec
from mapreloc.worldgen import WorldGenConfig, generate_map


@pytest.fixture(scope="session")
def spec():
    return MapSpec()


@pytest.fixture(scope="session")
def maps(spec):
    """The four default maps (seeds 0-3) shared by the integration tests."""
    return {f"m{k}": generate_map(WorldGenConfig(seed=k), spec) for k in range(4)}


@pytest.fixture(scope="session")
def map0(maps):
    return maps["m0"]
