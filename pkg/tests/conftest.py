def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, taken from recorded properties."""
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call" and status != "error":
                continue
            for key, value in getattr(rep, "user_properties", []):
                if key == "criterion":
                    lines.append((value, "PASS" if status == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for value, verdict in sorted(lines):
            terminalreporter.write_line(f"{verdict}  criterion {value}")
