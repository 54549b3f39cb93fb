import numpy as np
import pytest

from branchnet.core import BranchedModel
from branchnet.data import synth_splits
from branchnet.layers import build_preact_resnet
from branchnet.tensor import reset_graph
from branchnet.training import OptimConfig, train

# desk recipe: 16x16 glyphs, PreAct with one block per stage
DESK_SIZE = 16
DESK_TRAIN, DESK_TEST = 4000, 1000
DESK_WIDTHS = (8, 16, 32)
DESK_OPTIM = dict(lr0=0.1, momentum=0.9, weight_decay=5e-4, schedule=[(4, 10)], epochs=5, batch_size=64)


@pytest.fixture(autouse=True)
def _fresh_graph():
    reset_graph()
    yield
    reset_graph()


@pytest.fixture(scope="session")
def desk_data():
    return synth_splits(DESK_TRAIN, DESK_TEST, DESK_SIZE, 8, seed=0)


def desk_model(seed=0, depth_n=1):
    blocks, head = build_preact_resnet(depth_n, 8, DESK_WIDTHS, seed=seed)
    return BranchedModel(blocks, head)


@pytest.fixture(scope="session")
def trained_desk(desk_data):
    """Vanilla desk model after the 5-epoch recipe, with its history."""
    train_set, test_set = desk_data
    model = desk_model()
    history = train(model, train_set, test_set, OptimConfig(**DESK_OPTIM, seed=0), "vanilla",
                    rng=np.random.default_rng(0))
    return model, history


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
