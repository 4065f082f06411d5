import contextlib
import time
from dataclasses import dataclass

import pytest

_RESULTS = {}


@dataclass
class Criterion:
    number: int
    title: str
    budget: float
    passed: bool = False
    elapsed: float = 0.0
    detail: str = ""
    charged: float = 0.0  # time spent outside the block, e.g. in a shared fixture

    def line(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} criterion {self.number}: {self.title} "
                f"({self.elapsed:.2f}s, budget {self.budget:g}s) {self.detail}").rstrip()


@contextlib.contextmanager
def _criterion(number, title, budget):
    """Time a block, record PASS/FAIL and fail the test if it runs over budget."""
    c = Criterion(number, title, budget)
    _RESULTS[number] = c
    start = time.perf_counter()
    try:
        yield c
    except BaseException as exc:
        c.elapsed = time.perf_counter() - start + c.charged
        c.detail = f"{c.detail} [{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}]"
        raise
    c.elapsed = time.perf_counter() - start + c.charged
    if c.elapsed > budget:
        c.detail = f"{c.detail} [over time budget]"
        raise AssertionError(f"criterion {number} took {c.elapsed:.1f}s, budget {budget}s")
    c.passed = True


@pytest.fixture
def criterion():
    return _criterion


@pytest.fixture(scope="session")
def desk_runs():
    """Seeded desk-scale training of BCsiNet-B3 and float CsiNet-A2 at eta = 1/4."""
    from bcsinet import channel, models, trainer

    splits = channel.generate(seed=0)
    cfg = trainer.TrainConfig()
    runs = {}
    for spec in (models.ModelSpec("BCsiNet", "B", 3, 0.25), models.ModelSpec("CsiNet", "A", 2, 0.25)):
        net = models.build(spec, seed=0)
        start = time.perf_counter()
        best, state = trainer.fit(net, splits["train"], splits["val"], cfg)
        runs[spec.name] = {
            "seconds": time.perf_counter() - start,
            "history": state.history,
            "state": state,
            "best": best,
            "val": trainer.evaluate(best, splits["val"]),
        }
    return {"splits": splits, "config": cfg, "runs": runs}


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[number].line())
