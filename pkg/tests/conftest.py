import pytest

from sigdde import bench


class CellRunner:
    """Session memo of trained cells so several tests can share one expensive run."""

    def __init__(self):
        self.cache = bench.DatasetCache()
        self.done: dict = {}

    def __call__(self, cells):
        todo = [c for c in cells if c not in self.done]
        for res in bench.run_plan(todo, cache=self.cache):
            self.done[res.cell] = res
        return [self.done[c] for c in cells]

    def one(self, cell):
        return self([cell])[0]


@pytest.fixture(scope="session")
def runner():
    return CellRunner()


VERDICTS: dict = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; returns the pass flag so the test can assert on it."""
    def record(number: int, ok: bool, detail: str) -> bool:
        VERDICTS[number] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in VERDICTS:
            ok, detail = VERDICTS[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
