import numpy as np
import pytest

from drm_rl.mdp import load_bundled_mdp


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" and outcome != "error":
                continue
            info = dict(getattr(rep, "user_properties", []))
            if "criterion" in info:
                verdict = "PASS" if outcome == "passed" else "FAIL"
                lines.append((info["criterion"], rep.nodeid, verdict, info["title"], info.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num, nodeid, verdict, title, detail in sorted(lines):
        line = f"{verdict} criterion {num}: {title} [{nodeid.split('::')[-1]}]"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))


@pytest.fixture(autouse=True)
def _record_criterion(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", mark.args[0])
        record_property("title", mark.args[1])


@pytest.fixture(scope="session")
def bandit():
    return load_bundled_mdp("bandit")


@pytest.fixture(scope="session")
def two_state():
    return load_bundled_mdp("two_state")


@pytest.fixture(scope="session")
def symmetric():
    return load_bundled_mdp("symmetric")


@pytest.fixture(scope="session")
def layered_chain():
    return load_bundled_mdp("layered_chain")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
