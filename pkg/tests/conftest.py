import numpy as np
import pytest

from agsense.field_model import Field, GridSpec, WeatherRecord


def constant_field(value=100.0, shape=(3, 3, 1), cell=10.0, t_step=60.0, n_steps=300):
    g = GridSpec(*shape, cell, t_step, n_steps)
    weather = tuple(WeatherRecord(s * t_step, (0.0, 0.0, 0.0), 50.0, 10.0) for s in range(n_steps))
    return Field(g, np.full((*shape, n_steps + 1), float(value)), weather)


@pytest.fixture
def flat_field():
    return constant_field()


# acceptance criteria report: one line per criterion in the terminal summary
_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[n] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
