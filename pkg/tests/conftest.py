import contextlib
import time

import pytest

_ACCEPTANCE: dict[int, str] = {}


class _Check:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL summary line per acceptance criterion."""

    @contextlib.contextmanager
    def check(number: int, title: str):
        rec = _Check()
        start = time.perf_counter()
        try:
            yield rec
        except BaseException:
            _ACCEPTANCE[number] = f"FAIL  {number:2d}. {title} {rec.detail}".rstrip()
            raise
        elapsed = time.perf_counter() - start
        _ACCEPTANCE[number] = f"PASS  {number:2d}. {title} {rec.detail} ({elapsed:.2f}s)"

    return check


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
