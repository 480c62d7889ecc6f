import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

settings.register_profile("nslab", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("nslab")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def configs_dir():
    return CONFIGS


_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[props["criterion"]] = (props.get("title", ""), report.outcome, props)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, outcome, props = _CRITERIA[num]
        status = "PASS" if outcome == "passed" else "FAIL"
        extra = ", ".join(f"{k}={v}" for k, v in props.items() if k not in ("criterion", "title"))
        tr.write_line(f"[{status}] {num:2d} {title}" + (f" ({extra})" if extra else ""))
