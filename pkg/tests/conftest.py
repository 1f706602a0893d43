import contextlib
import time

import pytest

_RESULTS: dict[int, tuple[str, str, float]] = {}


class Criterion:
    """Records one acceptance criterion's outcome for the end-of-run summary."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.notes: list[str] = []

    def note(self, text: str) -> None:
        self.notes.append(text)

    @contextlib.contextmanager
    def run(self):
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield self
            status = "PASS"
        finally:
            detail = self.title + (f" [{'; '.join(self.notes)}]" if self.notes else "")
            _RESULTS[self.number] = (status, detail, time.perf_counter() - t0)
            print(f"criterion {self.number}: {status} {detail}")


@pytest.fixture()
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail, secs = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  ({secs:6.1f}s)  {detail}")
