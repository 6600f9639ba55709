import contextlib

import pytest

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


class Verdicts:
    """Pass/fail ledger for acceptance criteria, printed at the end of the run."""

    def __init__(self, store: dict):
        self.store = store

    def check(self, number: int, title: str, ok: bool, detail: str = "") -> bool:
        self.store.setdefault(number, []).append((title, bool(ok), detail))
        return bool(ok)

    @contextlib.contextmanager
    def section(self, number: int, title: str):
        """Record ``title`` as passed unless the block raises."""
        info = {}
        try:
            yield info
        except BaseException as e:
            first = str(e).splitlines()[0] if str(e) else ""
            self.check(number, title, False, info.get("detail") or f"{type(e).__name__}: {first}")
            raise
        self.check(number, title, True, info.get("detail", ""))


@pytest.fixture
def verdict(request):
    return Verdicts(request.config.stash[_VERDICTS])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        parts = store[n]
        ok = all(p[1] for p in parts)
        body = "; ".join(f"{t} {'ok' if p else 'FAILED'}" + (f" [{d}]" if d else "") for t, p, d in parts)
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'} | {body}")
