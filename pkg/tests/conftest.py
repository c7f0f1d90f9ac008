import numpy as np
import pytest

from sarfuse.data import Sample
from sarfuse.models import BackboneConfig
from sarfuse.simulator import SimConfig, generate_dataset

SMALL_BACKBONE = BackboneConfig(feature_channels=4, depth=2, base_width=4)


def random_sample(rng, size=64, available=True, site_id="site_x", t=1, height=None):
    h = height or size
    sar = rng.random((2, h, size), dtype=np.float32)
    optical = rng.random((4, h, size), dtype=np.float32) if available else None
    label = (rng.random((1, h, size)) < 0.3).astype(np.float32)
    return Sample(sar, optical, label, available, site_id, t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sim_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    config = SimConfig(num_sites=5, timestamps_per_site=4, tile_size=64, dropout_rate=0.25,
                       cross_modal_noise=0.02, seed=7)
    generate_dataset(config, root)
    return root


_acceptance_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "slow: long-running training test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    key = (marker.args[0], marker.args[1])
    if rep.failed or rep.when == "call":
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        if _acceptance_results.get(key) != "FAIL":
            _acceptance_results[key] = status
    elif rep.skipped:
        _acceptance_results.setdefault(key, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_acceptance_results.items()):
        terminalreporter.write_line(f"{status}  criterion {number:>2}: {title}")
