import pytest

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}
INFO = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not INFO:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c)):
        ok, detail = ACCEPTANCE[cid]
        tr.write_line(f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    for line in INFO:
        tr.write_line(f"info: {line}")
