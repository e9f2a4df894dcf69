import pytest

from scorebridge.models import BridgeConfig, TorchScorer
from scorebridge.server import BridgeServer


@pytest.fixture(scope="session")
def config() -> BridgeConfig:
    # Seeded random weights: a real 1000-class architecture that loads
    # offline and scores deterministically.  batch_cap=8 keeps every
    # multi-image test exercising the internal splitting path.
    return BridgeConfig(model="resnet18", random_init=True, init_seed=7, batch_cap=8)


@pytest.fixture(scope="session")
def scorer(config) -> TorchScorer:
    return TorchScorer.from_config(config)


@pytest.fixture(scope="session")
def server(scorer):
    with BridgeServer(scorer) as srv:
        yield srv
