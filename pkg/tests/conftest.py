import numpy as np
import pytest

from amae.autodiff import Tensor
from amae.rng import stream
from amae.stage1 import pretrain_mae, train_stage1
from amae.synth import build_split
from helpers import fast_config


@pytest.fixture(scope="session")
def fast_cfg():
    return fast_config()


@pytest.fixture(scope="session")
def fast_split(fast_cfg):
    c = fast_cfg
    return build_split(c.n, c.m, c.s, 0.5, seed=0)


@pytest.fixture(scope="session")
def fast_pretrained(fast_cfg, fast_split):
    return pretrain_mae(fast_split.train, fast_cfg, stream(0, "pretrain"))


@pytest.fixture(scope="session")
def fast_stage1(fast_cfg, fast_split, fast_pretrained):
    return train_stage1(fast_pretrained.encoder, fast_split.normal_train, fast_cfg, stream(0, "stage1"))


def constant_head(head, abnormal):
    """Copy of ``head`` whose output ignores its input and always picks one class."""
    out = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in head.items()}
    out["head.fc3.w"] = Tensor(np.zeros_like(head["head.fc3.w"].data), requires_grad=True)
    out["head.fc3.b"] = Tensor(np.array([-5.0, 5.0]) if abnormal else np.array([5.0, -5.0]), requires_grad=True)
    return out


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.when != "call":
        detail = f"{report.when} error"
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}: {detail}")
