import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line (printed again in the terminal summary) and fail on any red check."""

    def record(number: int, title: str, checks: dict[str, bool], detail: str = ""):
        failed = [name for name, ok in checks.items() if not ok]
        line = f"[{'PASS' if not failed else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        if failed:
            line += " -- failed: " + ", ".join(failed)
        _VERDICTS.append(line)
        print("\n" + line, flush=True)
        assert not failed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
