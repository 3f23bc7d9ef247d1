import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the end-of-run report.

    Usage: ``with criterion(4, "title") as note: ...; note["detail"] = "..."``.
    """
    results = request.config.stash[ACCEPTANCE]

    @contextmanager
    def run(number: int, title: str):
        note = {"detail": ""}
        try:
            yield note
        except BaseException:
            results[number] = (title, False, note["detail"])
            raise
        results[number] = (title, True, note["detail"])

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}" + (f" [{detail}]" if detail else ""))
