import numpy as np
import pytest
from scipy import ndimage

from hybridflow import _fallback, kernels

try:
    from hybridflow import _kernels
except ImportError:  # extension not built
    _kernels = None

KERNEL_NAMES = ("geodesic_voronoi", "seed_knn", "label_components", "sor_red_black")


def _impl(name):
    if name == "python":
        return _fallback
    if _kernels is None:
        pytest.skip("compiled kernels not built")
    return _kernels


@pytest.fixture(params=["python", "cython"])
def backend(request, monkeypatch):
    """Route every kernel call through one backend for the test."""
    impl = _impl(request.param)
    for name in KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


@pytest.fixture(params=["python", "cython"])
def impl(request):
    """The raw kernel module of one backend."""
    return _impl(request.param)


def textured(size=300, seed=0, sigma=1.5):
    """Smoothed color noise rescaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    big = ndimage.gaussian_filter(rng.random((size, size, 3)), (sigma, sigma, 0))
    return (big - big.min()) / (big.max() - big.min())


def shifted_pair(n=256, du=7, dv=3, margin=20, seed=0):
    """Two crops of one texture; frame 2 content moves by ``(du, dv)``."""
    big = textured(n + 2 * margin + 4, seed)
    i1 = big[margin:margin + n, margin:margin + n]
    i2 = big[margin - dv:margin - dv + n, margin - du:margin - du + n]
    return i1, i2


_ACCEPTANCE = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, store, number, title):
        self.store, self.number, self.title = store, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if kind is None:
            status = "PASS"
        elif issubclass(kind, pytest.skip.Exception):
            status = "SKIP"
        else:
            status = "FAIL"
        line = f"{status} [{self.number:2d}] {self.title}"
        if self.detail:
            line += f": {self.detail}"
        self.store[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion's outcome."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})
    return lambda number, title: _Criterion(store, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
