import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture
def note():
    """Informational line printed under the criteria; never affects the outcome."""

    def record(text: str) -> None:
        ACCEPTANCE_LINES.append(f"    note: {text}")
        print(text)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    # a criterion that crashed before reaching its verdict still gets a FAIL line
    name = item.name
    if rep.when == "call" and rep.failed and name.startswith("test_criterion_"):
        number = int(name.split("_")[2])
        tag = f"criterion {number:>2}:"
        if not any(line.startswith(tag) for line in ACCEPTANCE_LINES):
            msg = str(call.excinfo.value).splitlines()[0] if call.excinfo and str(call.excinfo.value) else call.excinfo.typename
            ACCEPTANCE_LINES.append(f"{tag} FAIL  error: {msg}")
