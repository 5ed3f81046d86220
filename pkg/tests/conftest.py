"""Shared fixtures: a small procedural dataset built once per session."""
import numpy as np
import pytest

from demoire import procedural, synth
from demoire.data import TrainingData


@pytest.fixture(scope="session")
def source_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sources")
    procedural.write_sources(d, 6, seed=0, size=256)
    return d


@pytest.fixture(scope="session")
def small_manifest(source_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    return synth.build_dataset(source_dir, 12, out, master_seed=0, patch_size=128, n_clean=4, n_real=4, workers=2)


@pytest.fixture(scope="session")
def small_data(small_manifest):
    return TrainingData.from_manifest(small_manifest)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: slow end-to-end acceptance criteria (about an hour)")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
