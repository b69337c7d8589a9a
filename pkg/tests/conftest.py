import math

import numpy as np
import pytest

from weaktraj.lindblad import LindbladModel
from weaktraj.operators import (HilbertSpace, Operator, annihilation, embed, random_hermitian,
                                sigma_lower)
from weaktraj.stonybrook import StonyBrookParams, build_stonybrook

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)


def fluorescence_qubit(omega=1.0, gamma=1.0, eta_h=None, eta_c=None, quadrature="x"):
    """Driven qubit, ``H = (omega/2) sigma_x``, decaying at rate ``gamma``.

    Without efficiencies the single channel ``sqrt(gamma) sigma`` is the
    homodyne channel.  With ``eta_h``/``eta_c`` the emission is split into a
    homodyne channel (``x``: ``sigma``; ``y``: ``i sigma``), a counting
    channel and, if needed, a loss channel.
    """
    H = Operator(0.5 * omega * SX)
    s = sigma_lower()
    if eta_h is None:
        return LindbladModel(H, [math.sqrt(gamma) * s], homodyne_channel=0)
    phase = 1.0 if quadrature == "x" else 1j
    cops = [phase * math.sqrt(gamma * eta_h) * s, math.sqrt(gamma * eta_c) * s]
    loss = 1 - eta_h - eta_c
    if loss > 1e-12:
        cops.append(math.sqrt(gamma * loss) * s)
    return LindbladModel(H, cops, homodyne_channel=0, counting_channel=1)


def two_qubit_model(seed=7):
    rng = np.random.default_rng(seed)
    space = HilbertSpace((2, 2))
    s1 = embed(sigma_lower(), 0, space)
    s2 = embed(sigma_lower(), 1, space)
    H = random_hermitian(space, rng)
    cops = [0.8 * s1, 0.5 * s2, 0.3 * (s1.dag() @ s1 - s1 @ s1.dag())]
    return LindbladModel(H, cops, homodyne_channel=0, counting_channel=1)


def driven_cavity(eps=0.05, kappa=1.0, n_max=4):
    a = annihilation(n_max)
    H = 1j * eps * (a.dag() - a)
    return LindbladModel(Operator(0.5 * (H.data + H.data.conj().T), a.space),
                         [math.sqrt(2 * kappa) * a], homodyne_channel=0)


def qutrit_model(seed=3):
    rng = np.random.default_rng(seed)
    H = random_hermitian(3, rng)
    L1 = Operator(np.diag([1.0, math.sqrt(2)], k=1))
    L2 = Operator(0.4 * (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))))
    return LindbladModel(H, [L1, L2], homodyne_channel=1)


def model_battery():
    return {
        "fluorescence": fluorescence_qubit(),
        "fluorescence_split": fluorescence_qubit(eta_h=0.5, eta_c=0.5, quadrature="y"),
        "two_qubit": two_qubit_model(),
        "driven_cavity": driven_cavity(),
        "qutrit": qutrit_model(),
        "stonybrook": build_stonybrook(StonyBrookParams()),
    }


@pytest.fixture(scope="session")
def battery():
    return model_battery()


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


@pytest.fixture(scope="session")
def desk_params():
    return StonyBrookParams(coupling_convention="jaynes_cummings")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
