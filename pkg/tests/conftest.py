import numpy as np
import pytest

from fieldst.fieldsim import GenConfig, build_dataset
from fieldst.numnet import LrSchedule
from fieldst.sensing import place_sensors
from fieldst.ssl_train import TrainConfig

SMALL_GEN = GenConfig(grid=(12, 12), n_sources=(1, 3))


@pytest.fixture(scope="session")
def small_dataset():
    layout = place_sensors((12, 12), 4, seed=3)
    return build_dataset(8, 24, 8, layout, seed=11, gen_config=SMALL_GEN)


@pytest.fixture(scope="session")
def small_arrays(small_dataset):
    ds = small_dataset
    out = {}
    for split in ("labeled", "unlabeled", "test"):
        out[split] = (
            ds.normalize(ds.split_observations(split)),
            ds.normalize(ds.split_fields(split)).reshape(-1, 144),
        )
    return out


@pytest.fixture
def tiny_config():
    return TrainConfig(
        epochs=6,
        batch_size=4,
        hidden=(8,),
        schedule=LrSchedule(lr_max=1e-2, T_0=2),
        ensemble_size=2,
        seed=5,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
