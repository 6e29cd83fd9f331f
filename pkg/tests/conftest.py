import numpy as np
import pytest
import torch

from lvsnet.config import ModelConfig
from lvsnet.data import Dataset
from lvsnet.synthetic import write_layout


def small_config(**kw) -> ModelConfig:
    base = dict(input_height=32, input_width=32, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def drive_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "DRIVE"
    write_layout(root, Dataset.DRIVE, seed=0)
    return root


@pytest.fixture(scope="session")
def synthetic_roots(tmp_path_factory):
    """Small-resolution copies of every supported layout."""
    base = tmp_path_factory.mktemp("layouts")
    roots = {}
    for ds in Dataset:
        roots[ds] = write_layout(base / ds.value, ds, size=(48, 40), seed=1)
    return roots


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


# -- acceptance bookkeeping ---------------------------------------------------

ACCEPTANCE_RESULTS = []


class _Criterion:
    def __init__(self, name, capsys):
        self.name = name
        self.capsys = capsys
        self.details = []

    def note(self, text):
        self.details.append(str(text))

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc is not None and not detail:
            detail = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
        line = f"[{status}] {self.name}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_RESULTS.append(line)
        with self.capsys.disabled():
            print("\n" + line)
        return False


@pytest.fixture
def criterion(capsys):
    return lambda name: _Criterion(name, capsys)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
