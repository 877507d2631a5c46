import numpy as np
import pytest

from i2iunlearn.harness import Lab, load_config
from i2iunlearn.models import init_model

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def default_lab(tmp_path_factory):
    """The packaged default config with its original model and probe trained."""
    lab = Lab(load_config(), out=str(tmp_path_factory.mktemp("default_run")))
    lab.original()
    lab.probe()
    return lab


@pytest.fixture(scope="session")
def tiny_config():
    cfg = load_config()
    d = cfg.data
    d["dataset"].update(num_classes=12, samples_per_class=16)
    d["splits"].update(per_group=3, samples_per_class=12, heldout_per_class=4)
    d["pretrain"].update(epochs=2)
    d["probe"].update(epochs=2)
    d["unlearn"].update(epochs=1)
    d["sweeps"].update(alphas=[0.01, 0.25], retain_per_class=[1, 12], mask_sizes=[2, 4])
    d["theory"].update(trials=6, mixtures=2, kl_pairs=3, ks=[4, 8])
    return cfg


@pytest.fixture
def model():
    return init_model(3)


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(size=(6, 1, 32, 32))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
