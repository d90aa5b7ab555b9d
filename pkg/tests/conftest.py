import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread_and_seed():
    torch.set_num_threads(1)
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# acceptance criteria report: one line per criterion, printed after the run
ACCEPTANCE: dict[int, tuple[str, bool | None, str]] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.ok: bool | None = None
        self.detail = ""

    def check(self, ok: bool, detail: str) -> None:
        self.ok, self.detail = bool(ok), detail
        assert ok, f"criterion {self.number} ({self.title}): {detail}"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    detail = c.detail if c.ok is not None else "raised before reaching its check"
    ACCEPTANCE[c.number] = (c.title, c.ok, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion test")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
