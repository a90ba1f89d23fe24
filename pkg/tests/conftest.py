import numpy as np
import pytest

from dinseg.network import build, make_spec

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(method="class", n_classes=2, depth=1, base_channels=2, seed=0, **kw):
    spec = make_spec(n_classes, method, depth=depth, base_channels=base_channels, **kw)
    return build(spec, seed)


@pytest.fixture
def tiny():
    return tiny_model()
