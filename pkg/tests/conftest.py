import os

import pytest

import acceptance_log
from leafvit import cli
from leafvit.data import make_toy_dataset

# single-threaded BLAS keeps byte-level determinism checks meaningful
os.environ.setdefault(cli.THREADS_ENV, "1")


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """The shipped 3-class color-patch fixture: 64 PPMs per class at 224x224."""
    return make_toy_dataset(tmp_path_factory.mktemp("toy") / "data", per_class=64, seed=0)


@pytest.fixture(scope="session")
def small_toy_root(tmp_path_factory):
    return make_toy_dataset(tmp_path_factory.mktemp("toy_small") / "data", per_class=8, seed=3)


@pytest.fixture(scope="session")
def trained_run(toy_root, tmp_path_factory):
    """One `leafvit train` run on the toy fixture (seed 0, defaults, timing column off)."""
    out = tmp_path_factory.mktemp("run0")
    argv = ["train", "--data-dir", str(toy_root), "--num-classes", "3", "--epochs", "5",
            "--seed", "0", "--out", str(out / "best.mvw"), "--log", str(out / "train.csv"),
            "--labels-out", str(out / "labels.txt"), "--no-timing"]
    assert cli.main(argv) == 0
    return out


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance_log.RESULTS):
        terminalreporter.write_line(acceptance_log.line(number))
