import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from symgen.generator import set_threads  # noqa: E402

set_threads(1)

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_tree_tokens(rng: np.random.Generator, names_by_arity: dict[int, list[str]],
                       max_depth: int = 5) -> list[str]:
    """Random complete prefix sequence (grow method), as token names."""
    out: list[str] = []

    def grow(depth: int):
        if depth == 0 or rng.random() < 0.35:
            out.append(str(rng.choice(names_by_arity[0])))
            return
        arity = 1 if rng.random() < 0.35 else 2
        out.append(str(rng.choice(names_by_arity[arity])))
        for _ in range(arity):
            grow(depth - 1)

    grow(max_depth)
    return out


KOZA_NAMES = {
    0: ["x1", "x2", "x3", "const", "2", "3"],
    1: ["exp", "log", "sin", "cos", "sqrt", "pow2", "pow3"],
    2: ["add", "sub", "mul", "div"],
}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE.append((name, bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
