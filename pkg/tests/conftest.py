import pytest

from bachkit.config import default_config
from bachkit.pipeline import make_workbench, run_identity


@pytest.fixture(scope="session")
def desk_cfg():
    return default_config("desk8")


@pytest.fixture(scope="session")
def bench(desk_cfg):
    return make_workbench(desk_cfg, scene_seed=1)


@pytest.fixture(scope="session")
def identity(bench, desk_cfg):
    # one traced+cached identity run shared by the injection-side tests
    return run_identity(bench, desk_cfg, seed=11)
