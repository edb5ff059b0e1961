import numpy as np
import pytest

from usat.data.store import Dataset
from usat.data.synth import SynthConfig, synth_generate
from usat.encodings import EncodingParams
from usat.geometry import usatlas_geometry
from usat.model.usat import PRESETS, DecoderConfig, ModelSpec


@pytest.fixture(scope="session")
def geo():
    return usatlas_geometry()


@pytest.fixture(scope="session")
def small_dataset(geo):
    _, _, classes, stats, samples = synth_generate(3, 8, geo, SynthConfig(val_fraction=0.25))
    return Dataset(samples, classes, stats, 320.0)


@pytest.fixture
def tiny_spec(geo):
    return ModelSpec(geo, PRESETS["tiny"], EncodingParams.allocate(64), geo.all_bands(), DecoderConfig(2),
                     n_classes=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
