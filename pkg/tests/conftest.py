import numpy as np
import pytest

from dfekf import harness
from dfekf.decomposition import decompose, rectangle_seed_partition
from dfekf.mesh import assemble_system, generate_rectangle_mesh

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: (int(s.split()[0][0]), s)):
        ok, detail = ACCEPTANCE[name]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def scenario1():
    return harness.load_scenario("scenario1")


@pytest.fixture(scope="session")
def setup1(scenario1):
    return harness.build_setup(scenario1)


@pytest.fixture(scope="session")
def truth1(scenario1, setup1):
    return harness.simulate_truth(scenario1, setup1.fine)


@pytest.fixture(scope="session")
def square():
    """Unit square mesh (121 vertices) split into two overlapping halves."""
    mesh = generate_rectangle_mesh(1.0, 1.0, 0.15)
    fem = assemble_system(mesh, 1e-2)
    dec = decompose(mesh, rectangle_seed_partition(mesh, [(0, 0.5, 0, 1), (0.5, 1, 0, 1)]), 1)
    return mesh, fem, dec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
