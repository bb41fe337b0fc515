# filled by the @criterion decorator in test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, name = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n}: {name}")
