import pytest


def pytest_addoption(parser):
    parser.addoption("--skip-acceptance", action="store_true", default=False,
                     help="skip the long-running acceptance criteria")


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skip-acceptance"):
        return
    skip = pytest.mark.skip(reason="--skip-acceptance given")
    for item in items:
        if "test_acceptance" in item.nodeid:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    rows = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance" in nodeid and "::" in nodeid:
                name = nodeid.split("::")[-1]
                rows.append((name, "PASS" if status == "passed" else "FAIL"))
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, verdict in sorted(set(rows)):
            terminalreporter.write_line(f"{verdict}  {name}")
