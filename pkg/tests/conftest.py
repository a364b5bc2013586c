import numpy as np
import pytest

from maiq.dataset import SyntheticSpec, generate_synthetic, scan_corpus

ACCEPTANCE_LINES = []
REPORTED_METRICS = []


@pytest.fixture
def rng():
    return np.random.default_rng(20210617)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_small")
    generate_synthetic(SyntheticSpec(per_class=2, noise=8, seed=3), root)
    return scan_corpus(root)


@pytest.fixture(scope="session")
def random_images():
    gen = np.random.default_rng(7)
    return [gen.uniform(0, 255, (384, 576, 3)) for _ in range(3)]


def pytest_terminal_summary(terminalreporter):
    if REPORTED_METRICS:
        terminalreporter.section("reported metrics")
        for line in REPORTED_METRICS:
            terminalreporter.write_line(line)
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def preset_pairs(random_images):
    """REAL and min/max-calibrated QUANTIZED graph for every preset."""
    from maiq.graph import quantize_model
    from maiq.presets import PresetId, build_preset

    out = {}
    for pid in PresetId:
        real = build_preset(pid, seed=0)
        out[pid.value] = (real, quantize_model(real, random_images))
    return out


@pytest.fixture(scope="session")
def probe_pair(small_corpus):
    """Color-probe TINY graph and its quantized counterpart, calibrated on the corpus."""
    from maiq.dataset import default_palette
    from maiq.graph import quantize_model
    from maiq.presets import build_preset, color_probe

    real = color_probe(build_preset("tiny"), default_palette())
    return real, quantize_model(real, (it.pixels for it in small_corpus))
