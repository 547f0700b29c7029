import pytest

from helpers import two_tenant
from seer_sim.sim import SimConfig, build


@pytest.fixture
def tenants():
    return two_tenant()


@pytest.fixture
def tenant_sim(tenants):
    return build(tenants, SimConfig(arrival_rate=0.004), seed=11)


@pytest.fixture(scope="session")
def configs_dir():
    from pathlib import Path
    return Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def tiny_cfg():
    from pathlib import Path
    from seer_sim.scenario import load_config
    return load_config(Path(__file__).resolve().parent / "data" / "tiny.yaml")


@pytest.fixture(scope="session")
def tiny_ds(tiny_cfg):
    from seer_sim.scenario import generate
    return generate(tiny_cfg, seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_ds):
    from seer_sim import harness as H
    from seer_sim.scenario import hyperparams
    from seer_sim.trace import MetricKind
    model, _, _ = H.fit(tiny_ds, MetricKind.QUEUE_DEPTH, hyperparams(tiny_ds.cfg))
    return model


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
