import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).parent / "data"

DEPTH1 = {
    "features": ["x0", "x1"],
    "base_score": 0.0,
    "objective": "raw",
    "trees": [
        {
            "root": 0,
            "nodes": [
                {"id": 0, "feature": 0, "threshold": 10.0, "left": 1, "right": 2, "cover": 100},
                {"id": 1, "leaf": 2.0, "cover": 60},
                {"id": 2, "leaf": 8.0, "cover": 40},
            ],
        }
    ],
}


@pytest.fixture
def depth1_doc():
    return json.loads(json.dumps(DEPTH1))


@pytest.fixture
def depth1(depth1_doc):
    from ctxshap.model import model_from_dict

    return model_from_dict(depth1_doc)


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def liver():
    """The liver-panel fixture model fitted on its background, plus context."""
    from ctxshap.model import fit_coverage, load_model, read_csv
    from ctxshap.prompt import load_context

    model = load_model(DATA / "model.json")
    background = read_csv(DATA / "background.csv", model.features)
    instances = read_csv(DATA / "instances.csv", model.features)
    return fit_coverage(model, background), background, instances, load_context(DATA / "context.json")


# -- acceptance summary ------------------------------------------------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): an exit criterion of the build")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = getattr(report, "acceptance", (None, None))
    if number is None:
        return
    outcome = _ACCEPTANCE.setdefault(number, [title, "PASS", []])
    if report.failed:
        outcome[1] = "FAIL"
        outcome[2].append(report.nodeid.split("::")[-1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    result = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        result.get_result().acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, failed = _ACCEPTANCE[number]
        line = f"[{status}] {number}. {title}"
        if failed:
            line += f"  (failed: {', '.join(failed)})"
        terminalreporter.write_line(line)
