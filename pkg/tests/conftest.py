import logging

import pytest

SMALL_CONFIG = """
[bias]
num_classes=6
num_context_types=3
beta=0.9
occlusion_rate=0.5
d_s=8
d_c=8

[train]
epochs=2
batch_size=32
seed=0

[model]
width=8
depth=1

[experiment]
out_dir={out_dir}
n_train=200
n_val=50
n_test=100
test_split=anti_correlated
seeds=0
ablations=vanilla, clef
workers=1
"""


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size benchmark runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger("")
    handlers = list(root.handlers)
    yield
    for h in list(root.handlers):
        if h not in handlers:
            root.removeHandler(h)
            h.close()


@pytest.fixture
def small_config(tmp_path):
    """Path to a tiny experiment config writing below tmp_path/out"""
    path = tmp_path / "config.ini"
    path.write_text(SMALL_CONFIG.format(out_dir=tmp_path / "out"))
    return str(path)
