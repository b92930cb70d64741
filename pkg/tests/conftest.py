import datetime
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from axml.model import DocMeta  # noqa: E402
from axml.store import open_store  # noqa: E402
from axml.xmlcodec import parse_document, parse_rule  # noqa: E402

EXAMPLE_RULE_XML = (
    b"<rule id=\"r1\"><event kind=\"update\" target=\"/doc[@name='X']\"/>"
    b"<condition><query>/doc[@name='X']//Paragraphe</query></condition>"
    b"<action kind=\"delete\" target=\"/doc[@name='X']//Paragraphe\"/></rule>"
)


@pytest.fixture
def example_rule():
    return parse_rule(parse_document(EXAMPLE_RULE_XML))


@pytest.fixture
def store(tmp_path):
    return open_store(tmp_path / "store", create=True)


def meta(doc_id, name=None, author="mansouri", created=datetime.date(2024, 3, 1)):
    return DocMeta(doc_id, name or doc_id, created, 1, author)


_results = {}
_seconds = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    number = marker.args[0]
    ok = call.excinfo is None
    _results[number] = _results.get(number, True) and ok
    for key, value in item.user_properties:
        if key == "seconds":
            _seconds[number] = max(_seconds.get(number, 0.0), value)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status = "PASS" if _results[number] else "FAIL"
        timing = f" ({_seconds[number]:.2f} s)" if number in _seconds else ""
        terminalreporter.write_line(f"criterion {number}: {status}{timing}")
