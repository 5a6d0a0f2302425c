import numpy as np
import pytest

from metarep.mdp import TabularMdp


def random_policy(rng, n_states, n_actions, temperature=1.0):
    logits = rng.standard_normal((n_states, n_actions)) / temperature
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def chain_mdp(gamma=0.9):
    """s0 -> s1 with reward 0; s1 absorbing with reward 1."""
    reward = np.array([[0.0], [1.0]])
    transition = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    return TabularMdp(reward, transition, np.array([1.0, 0.0]), gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
