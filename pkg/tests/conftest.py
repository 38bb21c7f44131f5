import numpy as np
import pytest

from hs3bench.dataset_io import FixtureSpec, generate_fixture, list_samples, make_splits


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_fixture(root, name="fixture", splits=True, **spec_kw):
    """Write a synthetic dataset (and its split manifest) under root; return the descriptor."""
    spec = FixtureSpec(**{"n_images": 8, "height": 16, "width": 16, "channels": 6, "K": 3,
                          "noise_sigma": 0.01, "seed": 0, **spec_kw})
    desc = generate_fixture(spec, root, name=name)
    if splits:
        make_splits(desc, list_samples(desc)).save(desc.manifest_path)
    return desc


@pytest.fixture
def fixture_dataset(tmp_path):
    return make_fixture(tmp_path / "fixture")


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
