import pytest

ACCEPTANCE = pytest.StashKey[dict]()
CRITERIA = range(1, 10)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


@pytest.fixture
def criterion(pytestconfig):
    """Record one acceptance criterion from named ``(passed, value)`` checks, then assert."""
    results = pytestconfig.stash.setdefault(ACCEPTANCE, {})

    def record(number, checks):
        ok = all(bool(passed) for passed, _ in checks.values())
        detail = "; ".join(f"{name}={_fmt(value)}{'' if passed else ' (fail)'}"
                           for name, (passed, value) in checks.items())
        results[number] = (ok, detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: FAIL no result recorded")
