from helpers import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail, secs in sorted(ACCEPTANCE):
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'} [{n:2d}] {title}: {detail} ({secs:.1f} s)")
