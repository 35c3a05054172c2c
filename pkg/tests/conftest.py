def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            lines += [value for key, value in getattr(rep, "user_properties", ()) if key == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=_criterion_key):
            terminalreporter.write_line(line)


def _criterion_key(line: str):
    tag = line.split("criterion ", 1)[1].split(":", 1)[0]
    digits = "".join(c for c in tag if c.isdigit())
    return int(digits), tag
