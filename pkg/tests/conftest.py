ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE.append((number, name, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}")
