import numpy as np
import pytest

from pessimistic_ac.instances import random_feature_mdp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_mdps(seed: int, count: int = 5):
    """Random MDPs with at most 8 states and horizon at most 4."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        S, H = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        A, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        out.append(random_feature_mdp(rng, S=S, A=A, H=H, d=d))
    return out


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p for p, _ in parts)
        detail = "; ".join(msg for _, msg in parts)
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
