import numpy as np
import pytest

from uncseg import model as M

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record a named acceptance criterion; a summary line is printed per criterion."""
    def record(name, passed, detail=""):
        _CRITERIA.append((name, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_arch():
    return M.ArchConfig(side=16)


def params64(arch, seed, bias_jitter=0.1):
    """Float64 He-init params with small random biases so every term is exercised."""
    r = np.random.default_rng(seed + 1000)
    out = {}
    for k, v in M.init_params(arch, seed).items():
        v = v.astype(np.float64)
        if k.endswith(".bias"):
            v = v + r.uniform(-bias_jitter, bias_jitter, v.shape)
        out[k] = v
    return out
