import contextlib

import pytest

_acceptance_lines: list[str] = []


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line for an acceptance criterion."""

    @contextlib.contextmanager
    def record(number: int, text: str):
        try:
            yield
        except pytest.skip.Exception as exc:
            _acceptance_lines.append(f"criterion {number:>2}: SKIP  {text} ({exc.msg})")
            raise
        except BaseException:
            _acceptance_lines.append(f"criterion {number:>2}: FAIL  {text}")
            raise
        _acceptance_lines.append(f"criterion {number:>2}: PASS  {text}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines):
            terminalreporter.write_line(line)
