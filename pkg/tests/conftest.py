import numpy as np
import pytest
import torch

from gssl.datasets import DatasetSplit, write_synthetic_cifar


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow comparative smoke tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_synthetic_cifar(root, train_per_class=30, test_per_class=10, seed=0)
    return root


@pytest.fixture
def tiny_split():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(40, 32, 32, 3), dtype=np.uint8)
    labels = np.repeat(np.arange(10), 4)
    return DatasetSplit(images, labels, 10)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for report in reports:
            for name, value in getattr(report, "user_properties", []):
                if name == "acceptance" and getattr(report, "when", "call") == "call":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: (int(s.split()[1].rstrip(":")), "note" in s)):
            terminalreporter.write_line(line)
