from pathlib import Path

import pytest

from nodeflow.config import demo_path
from nodeflow.knowledge import ingest_corpus
from nodeflow.registry import ingest_docs

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance: dict[int, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def registry():
    return ingest_docs(demo_path("nodes"))


@pytest.fixture(scope="session")
def store(registry):
    return ingest_corpus(demo_path("curriculum"), registry)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[number] = ("PASS" if report.outcome == "passed" else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        outcome, title = _acceptance[number]
        terminalreporter.write_line(f"{outcome} criterion {number}: {title}")
