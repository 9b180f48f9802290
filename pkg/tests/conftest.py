import pytest

_verdicts: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line; returns ``ok`` so the test can assert it."""

    def say(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} ({detail})"
        _verdicts.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return say


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_verdicts, key=lambda s: s.split("criterion ")[1]):
            terminalreporter.write_line(line)
