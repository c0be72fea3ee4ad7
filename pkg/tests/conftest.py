import pytest

from ctkd.config import parse_config
from ctkd.trainer import load_data, train_teacher


def small_config(**overrides):
    """A few-second experiment: 4 classes in 6 dimensions."""
    base = {
        "seed": 0,
        "epochs": 6,
        "batch_size": 32,
        "dataset": {"classes": 4, "dim": 6, "per_class": 40, "test_per_class": 20},
        "teacher": {"hidden": [16], "epochs": 8},
        "curriculum": {"e_loops": 3},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return parse_config(base)


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_data(small_cfg):
    return load_data(small_cfg)


@pytest.fixture(scope="session")
def small_teacher(small_cfg, small_data):
    return train_teacher(small_cfg, small_data, write=False).model


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
