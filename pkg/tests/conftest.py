import numpy as np
import pytest
import torch

CRITERIA = {}

from bevcon_lab.geometry import BEVSpec
from bevcon_lab.scenegen import SceneGenConfig, generate_dataset, generate_scene


@pytest.fixture(scope="session")
def small_gen_config():
    """A reduced scene config: 3 views, 48x80 images, 32x32 BEV."""
    return SceneGenConfig(
        n_views=3,
        image_height=48,
        image_width=80,
        bev=BEVSpec(-25.6, 25.6, -25.6, 25.6, 32, 32),
        hfov_deg=120.0,
        n_min=3,
        n_max=5,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_scene(small_gen_config):
    return generate_scene(small_gen_config, 123, scene_id=0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_gen_config):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(small_gen_config, 12, root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


TINY_MODEL = dict(
    stem_channels=4,
    level_channels=[8, 8, 8],
    depth_bins=8,
    depth_min=2.0,
    depth_max=30.0,
    bev_channels=8,
    n_layers=2,
    head_channels=8,
    n_classes=4,
)


def tiny_run_config(dataset, **overrides):
    """A RunConfig small enough for a training step in well under a second."""
    from bevcon_lab.trainer import RunConfig

    d = RunConfig().to_dict()
    d.update(dataset=str(dataset), epochs=1, batch_size=4, model=dict(TINY_MODEL))
    for k, v in overrides.items():
        if isinstance(v, dict):
            d[k].update(v)
        else:
            d[k] = v
    return RunConfig.from_dict(d)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ok = rep.passed and CRITERIA.get(n, (True,))[0]
        CRITERIA[n] = (ok, title)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, title = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}")
