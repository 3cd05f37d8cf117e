import numpy as np
import pytest
import torch

from mtadapt.data import SceneSpec, generate_scenes
from mtadapt.model import ModelConfig
from mtadapt.models import AdapterConfig

torch.set_num_threads(1)


# acceptance reporting: one PASS/FAIL line per criterion at the end of the run

_VERDICTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    number, title = marker.args
    props = dict(item.user_properties)
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    status = props.get("verdict", status) if rep.passed else status
    _VERDICTS[number] = (title, status, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        title, status, detail = _VERDICTS[n]
        line = f"{status}  {n:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


TINY = ModelConfig(channels=16, base_width=4, blocks_per_stage=1, num_queries=4, seg_layers=1,
                   num_proposals=6, det_stages=2, num_heads=2, text_dim=16, text_layers=1,
                   context_length=4, l2v_layers=1)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def adapter_cfg():
    return AdapterConfig


@pytest.fixture(scope="session")
def spec():
    return SceneSpec()


@pytest.fixture(scope="session")
def scenes(spec):
    return generate_scenes(spec, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
