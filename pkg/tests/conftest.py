import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bundle(tmp_path_factory):
    """A tiny sphere+box bundle: 6 training views (5 gray), 2 validation views, 32 px."""
    from heritage_recon.synthetic import DatasetSpec, make_dataset, sphere_box_scene

    out = tmp_path_factory.mktemp("bundle")
    spec = DatasetSpec(n_views=6, gray_fraction=0.9, image_size=32, n_val=2, n_dense=3000, n_sparse=400,
                       n_gt=5000, seed=3)
    make_dataset(sphere_box_scene(), 6, 0.9, out, spec)
    return out


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or rep.failed:
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        if status == "FAIL" and not detail:
            detail = rep.longreprtext.strip().splitlines()[-1] if rep.longreprtext else ""
        item.config._criteria[n] = (status, item.name, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, name, detail = results[n]
        terminalreporter.write_line(f"{status} criterion {n:>2} ({name}): {detail}")
