import contextlib

import pytest

_CRITERIA: dict[int, str] = {}


class _Recorder:
    @contextlib.contextmanager
    def __call__(self, number: int, title: str):
        detail: list[str] = []
        try:
            yield detail
        except BaseException:
            _CRITERIA[number] = f"criterion {number:2d} FAIL  {title}  {'; '.join(detail)}"
            print(_CRITERIA[number])
            raise
        _CRITERIA[number] = f"criterion {number:2d} PASS  {title}  {'; '.join(detail)}"
        print(_CRITERIA[number])


@pytest.fixture(scope="session")
def criterion():
    """Context manager that records a pass/fail line for an acceptance criterion."""
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
