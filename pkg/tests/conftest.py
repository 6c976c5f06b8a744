import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cvqkd_automl.channel import ProtocolParams, gram_matrix, simulate_moments  # noqa: E402
from cvqkd_automl.fock import FockSpace  # noqa: E402
from cvqkd_automl.keymap import RegionOperators, build_postprocessing_map  # noqa: E402
from cvqkd_automl.solver import SolverConfig, build_constraints, initial_feasible_state  # noqa: E402

from oracles import barrier_minimize  # noqa: E402

TOY_PARAMS = ProtocolParams(0.66, 20, 0.01)
TOY_CUTOFF = 3


@pytest.fixture(scope="session")
def toy_problem():
    space = FockSpace(TOY_CUTOFF)
    cons = build_constraints(simulate_moments(TOY_PARAMS), gram_matrix(TOY_PARAMS), TOY_PARAMS.probs, space)
    gmap = build_postprocessing_map(RegionOperators.for_space(space))
    return cons, gmap


@pytest.fixture(scope="session")
def toy_oracle(toy_problem):
    """Optimum of the N_c=3 toy instance from the log-barrier Newton oracle."""
    cons, gmap = toy_problem
    rho0, _ = initial_feasible_state(cons, SolverConfig(cutoff=TOY_CUTOFF))
    value, rho = barrier_minimize(cons.observables, cons.targets, gmap.K, rho0)
    return value


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    broken = {r.nodeid for key in ("failed", "error") for r in terminalreporter.stats.get(key, [])}
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in mod.RESULTS:
            ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        elif any(f"test_criterion_{n}_" in nodeid for nodeid in broken):
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  error before the check")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: not run")
