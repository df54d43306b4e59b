import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("bnnkit", deadline=None, max_examples=60)
settings.load_profile("bnnkit")


def naive_conv(x, w, stride=1, padding=0, pad_value=0.0):
    """Seven nested loops; the slow oracle the fast paths are checked against."""
    n_, c_, h, wd = x.shape
    o_, _, kh, kw = w.shape
    xp = np.full((n_, c_, h + 2 * padding, wd + 2 * padding), pad_value, dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n_, o_, oh, ow))
    for n in range(n_):
        for o in range(o_):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(c_):
                        for a in range(kh):
                            for b in range(kw):
                                acc += xp[n, c, i * stride + a, j * stride + b] * w[o, c, a, b]
                    out[n, o, i, j] = acc
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


class Criterion:
    def __init__(self):
        self.number = None

    def check(self, number: int, ok: bool, detail: str) -> None:
        self.number = number
        _CRITERIA[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, _CRITERIA[number]


@pytest.fixture
def criterion(request):
    rec = Criterion()
    yield rec
    number = getattr(request.node.function, "criterion_number", None)
    if number is not None and number not in _CRITERIA:
        _CRITERIA[number] = f"criterion {number:>2}: FAIL  (raised before reaching its check)"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
