"""Weakly driven atom-cavity system and its intensity-field correlation h(tau).

The system is a driven, damped cavity mode coupled to ``N`` two-level atoms:

    d rho/dt = eps [a^dag - a, rho] + 2 kappa D[a] rho
               + sum_j ( g_j [coupling_j, rho] + 2 gamma_perp D[sigma_j] rho ).

Part of the cavity output is homodyne detected (current ~ ``a + a^dag``)
and part is photon counted.  ``h(tau)`` correlates the homodyne current at
``t`` with a photodetection at ``T = t + tau``, normalized so that it tends
to 1 for large ``|tau|``.  For ``tau > 0`` it is a postselected weak value
(retrodicted effect ``a^dag a``); for ``tau < 0`` it is a conditional mean
after a photodetection.

Coupling conventions
--------------------
``"jaynes_cummings"``
    ``coupling_j = a^dag sigma_j - sigma_j^dag a`` (exchange of one
    excitation; gives vacuum-Rabi oscillation).  This is the default.
``"printed"``
    ``coupling_j = a^dag sigma_j^dag - sigma_j a``, the anti-Hermitian
    completion of a literal ``a^dag sigma^dag`` raising term.  Kept for
    comparison only; it does not conserve excitation number.

Basis order is field first, then atoms ``1..N`` (see :mod:`operators`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.optimize import least_squares

from .errors import FitError, PostselectionError, RegimeError
from .lindblad import (LindbladModel, propagate_series, retropropagate_series,
                       steady_state)
from .operators import (HilbertSpace, Operator, annihilation, basis, embed,
                        sigma_lower, tensor_ket)
from .trajectories import monte_carlo_weak_value

MAX_DIM = 64
COUPLING_CONVENTIONS = ("jaynes_cummings", "printed")
METHODS = ("full-ME", "effective-H", "analytic", "monte-carlo")


@dataclass(frozen=True)
class StonyBrookParams:
    """Physical parameters.

    ``eta_h`` and ``eta_c`` are the net fractions of the cavity output
    (total rate ``2 kappa``) reaching the homodyne detector and the photon
    counter; the remainder is an unmonitored loss channel.
    """

    epsilon: float = 0.01
    kappa: float = 1.0
    gamma_perp: float = 1.0
    g: tuple = (1.0,)
    n_max: int = 2
    eta_h: float = 0.8
    eta_c: float = 0.1
    coupling_convention: str = "jaynes_cummings"

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(float(x) for x in np.atleast_1d(self.g)))
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kappa <= 0 or self.gamma_perp <= 0:
            raise ValueError("kappa and gamma_perp must be > 0")
        if int(self.n_max) < 1:
            raise ValueError("n_max must be >= 1")
        for name in ("eta_h", "eta_c"):
            val = getattr(self, name)
            if not 0 < val <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {val}")
        if self.eta_h + self.eta_c > 1 + 1e-12:
            raise ValueError("eta_h + eta_c must not exceed 1 (they share the cavity output)")
        if self.coupling_convention not in COUPLING_CONVENTIONS:
            raise ValueError(f"coupling_convention must be one of {COUPLING_CONVENTIONS}")
        dim = (int(self.n_max) + 1) * 2 ** len(self.g)
        if dim > MAX_DIM:
            raise ValueError(f"total dimension {dim} exceeds {MAX_DIM}")

    @property
    def n_atoms(self) -> int:
        return len(self.g)

    @property
    def eta(self) -> float:
        """Decay rate of the correlation envelope, ``(kappa + gamma_perp) / 2``."""
        return 0.5 * (self.kappa + self.gamma_perp)

    @property
    def weak_drive(self) -> bool:
        return self.epsilon < 0.1 * min(self.kappa, self.gamma_perp)

    @property
    def space(self) -> HilbertSpace:
        return HilbertSpace((int(self.n_max) + 1,) + (2,) * self.n_atoms)

    def replace(self, **changes) -> "StonyBrookParams":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class FieldOps:
    a: Operator
    X: Operator
    n: Operator
    sigmas: tuple


def field_operators(p: StonyBrookParams) -> FieldOps:
    space = p.space
    a = embed(annihilation(p.n_max), 0, space)
    sigmas = tuple(embed(sigma_lower(), j + 1, space) for j in range(p.n_atoms))
    return FieldOps(a, a + a.dag(), a.dag() @ a, sigmas)


def _coupling(p, ops, j):
    a, s = ops.a, ops.sigmas[j]
    if p.coupling_convention == "jaynes_cummings":
        return a.dag() @ s - s.dag() @ a
    return a.dag() @ s.dag() - s @ a


def build_stonybrook(p: StonyBrookParams) -> LindbladModel:
    """Lindblad model with channels ``[homodyne, counting, (loss), atoms...]``."""
    ops = field_operators(p)
    a = ops.a
    H = 1j * p.epsilon * (a.dag() - a)
    for j, gj in enumerate(p.g):
        H = H + 1j * gj * _coupling(p, ops, j)
    rate = 2 * p.kappa
    cops = [math.sqrt(rate * p.eta_h) * a, math.sqrt(rate * p.eta_c) * a]
    loss = 1 - p.eta_h - p.eta_c
    if loss > 1e-12:
        cops.append(math.sqrt(rate * loss) * a)
    cops += [math.sqrt(2 * p.gamma_perp) * s for s in ops.sigmas]
    # exact Hermitization removes rounding asymmetry
    H = Operator(0.5 * (H.data + H.data.conj().T), p.space)
    return LindbladModel(H, cops, homodyne_channel=0, counting_channel=1)


def effective_hamiltonian(p: StonyBrookParams) -> Operator:
    """Non-Hermitian ``H_eff`` of the no-jump evolution.

    Written out term by term:
    ``-i H_eff = eps (a^dag - a) - kappa a^dag a
    + sum_j [g_j coupling_j - gamma_perp sigma_j^dag sigma_j]``.
    """
    ops = field_operators(p)
    a = ops.a
    gen = p.epsilon * (a.dag() - a) - p.kappa * ops.n
    for j, gj in enumerate(p.g):
        s = ops.sigmas[j]
        gen = gen + gj * _coupling(p, ops, j) - p.gamma_perp * (s.dag() @ s)
    return 1j * gen


def nonunitary_propagator(p: StonyBrookParams, t: float) -> Operator:
    """``N(t) = exp(-i H_eff t)``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    G = -1j * effective_hamiltonian(p).data
    return Operator(scipy.linalg.expm(G * t), p.space)


@dataclass(frozen=True)
class PureSteadyState:
    """Slowest-decaying eigenvector of ``-i H_eff``.

    ``fidelity`` is ``<psi|rho_ss|psi>`` against the full master-equation
    steady state; ``in_regime`` records whether it passed the weak-drive
    check ``1 - fidelity < 10 (eps/kappa)^2``.
    """

    vector: np.ndarray
    eigenvalue: complex
    fidelity: float
    in_regime: bool


def stationary_pure_state(p: StonyBrookParams, check: bool = True) -> PureSteadyState:
    G = -1j * effective_hamiltonian(p).data
    evals, evecs = np.linalg.eig(G)
    k = int(np.argmax(evals.real))
    psi = evecs[:, k]
    psi = psi / np.linalg.norm(psi)
    if abs(psi[0]) > 0:
        psi = psi * np.exp(-1j * np.angle(psi[0]))
    fidelity = float("nan")
    ok = True
    if check:
        rho = steady_state(build_stonybrook(p)).data
        fidelity = float(np.vdot(psi, rho @ psi).real)
        ok = 1 - fidelity < 10 * (p.epsilon / p.kappa) ** 2
        if not ok or not p.weak_drive:
            warnings.warn(
                f"outside the weak-drive regime: pure-state fidelity {fidelity:.6g} "
                f"at eps={p.epsilon:g}", RuntimeWarning, stacklevel=2)
    return PureSteadyState(psi, complex(evals[k]), fidelity, bool(ok))


def one_photon_ket(p: StonyBrookParams) -> np.ndarray:
    """One photon, all atoms in the ground state."""
    g = basis(2, 0)
    return tensor_ket(basis(p.n_max + 1, 1), *([g] * p.n_atoms))


def _sorted_eval(taus, fn):
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    order = np.argsort(taus)
    out = np.empty(len(taus))
    out[order] = fn(taus[order])
    return out


def _scalar_or_array(taus, values):
    return float(values[0]) if np.ndim(taus) == 0 else values


def h_positive_tau(p: StonyBrookParams, tau, dt: Optional[float] = None, method: str = "full-ME",
                   model: Optional[LindbladModel] = None, rho_ss=None):
    """Normalized weak value ``h(tau)`` for ``tau >= 0``.

    ``full-ME``: ``2 Re Tr[E a rho_ss] / Tr[E rho_ss]`` with ``E`` the
    retrodicted ``a^dag a``, divided by ``Tr[X rho_ss]``.

    ``effective-H``: ``2 Re <1|N(tau) a|psi> / <1|N(tau)|psi>`` divided by
    ``<psi|X|psi>``, where ``|1>`` is one photon with atoms in the ground state.
    """
    if np.any(np.asarray(tau) < 0):
        raise ValueError("tau must be >= 0")
    ops = field_operators(p)
    if method == "full-ME":
        model = build_stonybrook(p) if model is None else model
        rho = steady_state(model) if rho_ss is None else rho_ss
        base = float(np.trace(ops.X.data @ rho.data).real)
        arho = ops.a.data @ rho.data

        def fn(ts):
            effects = retropropagate_series(model, ops.n, ts, dt)
            vals = []
            for E in effects:
                den = np.einsum("ij,ji->", E.data, rho.data)
                if abs(den) < 1e-14:
                    raise PostselectionError(f"photodetection probability {abs(den):.3g} vanishes")
                vals.append(2 * (np.einsum("ij,ji->", E.data, arho) / den).real / base)
            return np.array(vals)
    elif method == "effective-H":
        pure = stationary_pure_state(p, check=False)
        psi = pure.vector
        base = float(np.vdot(psi, ops.X.data @ psi).real)
        one = one_photon_ket(p)
        G = -1j * effective_hamiltonian(p).data
        apsi = ops.a.data @ psi

        def fn(ts):
            vals = []
            for t in ts:
                N = scipy.linalg.expm(G * t)
                den = np.vdot(one, N @ psi)
                if abs(den) < 1e-14:
                    raise PostselectionError(f"one-photon amplitude {abs(den):.3g} vanishes")
                vals.append(2 * (np.vdot(one, N @ apsi) / den).real / base)
            return np.array(vals)
    else:
        raise ValueError(f"unknown method {method!r}; use 'full-ME' or 'effective-H'")
    return _scalar_or_array(tau, _sorted_eval(tau, fn))


def h_negative_tau(p: StonyBrookParams, tau_abs, dt: Optional[float] = None,
                   model: Optional[LindbladModel] = None, rho_ss=None):
    """``h(-|tau|)``: mean of ``X`` a time ``|tau|`` after a photodetection.

    ``Tr[X e^{L|tau|} a rho_ss a^dag] / Tr[a rho_ss a^dag]`` divided by
    ``Tr[X rho_ss]``.
    """
    if np.any(np.asarray(tau_abs) < 0):
        raise ValueError("tau_abs must be >= 0")
    ops = field_operators(p)
    model = build_stonybrook(p) if model is None else model
    rho = steady_state(model) if rho_ss is None else rho_ss
    base = float(np.trace(ops.X.data @ rho.data).real)
    jumped = ops.a @ rho.as_operator() @ ops.a.dag()
    flux = jumped.trace().real
    if flux < 1e-14:
        raise PostselectionError(f"no photon flux (Tr[a rho a^dag] = {flux:.3g})")
    jumped = jumped / flux

    def fn(ts):
        states = propagate_series(model, jumped, ts, dt)
        return np.array([np.trace(ops.X.data @ s.data).real / base for s in states])

    return _scalar_or_array(tau_abs, _sorted_eval(tau_abs, fn))


def analytic_h(p: StonyBrookParams, tau, zeta: float, Omega: float):
    """``1 + zeta e^{-eta tau} [cos(Omega tau) + (eta/Omega) sin(Omega tau)]``."""
    if not np.isreal(Omega) or not Omega > 0:
        raise RegimeError("only the oscillatory regime (real Omega > 0) is supported")
    return _analytic_form(np.asarray(tau, dtype=float), zeta, Omega, p.eta)


def _analytic_form(tau, zeta, Omega, eta):
    return 1 + zeta * np.exp(-eta * tau) * (np.cos(Omega * tau) + (eta / Omega) * np.sin(Omega * tau))


@dataclass(frozen=True)
class HTauCurve:
    """``h(tau)`` samples with a method tag per point."""

    taus: np.ndarray
    values: np.ndarray
    methods: tuple

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float)
        values = np.asarray(self.values, dtype=float)
        methods = tuple(self.methods)
        if isinstance(self.methods, str):
            methods = (self.methods,) * len(taus)
        if len(taus) != len(values) or len(methods) != len(taus):
            raise ValueError("taus, values and methods must have equal length")
        if np.any(np.diff(taus) <= 0):
            raise ValueError("tau grid must be strictly increasing")
        bad = set(methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown method tags {sorted(bad)}")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "methods", methods)

    def positive(self) -> "HTauCurve":
        keep = self.taus >= 0
        return HTauCurve(self.taus[keep], self.values[keep],
                         tuple(m for m, k in zip(self.methods, keep) if k))


def h_curve(p: StonyBrookParams, taus, method: str = "full-ME", dt: Optional[float] = None) -> HTauCurve:
    """``h`` on a grid that may span both signs of ``tau``.

    Negative ``tau`` always uses the predictive (full master equation) form.
    """
    taus = np.asarray(taus, dtype=float)
    values = np.empty(len(taus))
    methods = []
    pos = taus >= 0
    model = build_stonybrook(p)
    rho = steady_state(model)
    if pos.any():
        values[pos] = h_positive_tau(p, taus[pos], dt, method, model=model, rho_ss=rho)
    if (~pos).any():
        values[~pos] = h_negative_tau(p, -taus[~pos], dt, model=model, rho_ss=rho)
    for t in taus:
        methods.append(method if t >= 0 else "full-ME")
    return HTauCurve(taus, values, tuple(methods))


@dataclass(frozen=True)
class ZetaOmegaFit:
    zeta: float
    Omega: float
    eta_fit: float
    residual: float


def fit_zeta_omega(curve: HTauCurve) -> ZetaOmegaFit:
    """Least-squares fit of the damped-oscillation form to the ``tau >= 0`` branch.

    ``zeta``, ``Omega`` and the decay rate are all free; ``residual`` is the
    largest absolute pointwise misfit.
    """
    c = curve.positive()
    taus, vals = c.taus, c.values
    if len(taus) < 50:
        raise ValueError("fit needs at least 50 points with tau >= 0")
    span = taus[-1] - taus[0]

    def resid(x):
        return _analytic_form(taus, x[0], x[1], x[2]) - vals

    zeta0 = vals[0] - 1 if taus[0] == 0 else vals[np.argmin(taus)] - 1
    best = None
    traces = []
    for om0 in np.array([0.5, 1.0, 2.0, 4.0, 8.0]) * 2 * np.pi / span:
        for eta0 in np.array([0.5, 2.0, 8.0]) / span:
            try:
                res = least_squares(resid, [zeta0, om0, eta0],
                                    bounds=([-np.inf, 1e-9, 0.0], [np.inf, np.inf, np.inf]),
                                    xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=2000)
            except (ValueError, np.linalg.LinAlgError) as exc:
                traces.append(str(exc))
                continue
            traces.append(float(np.max(np.abs(res.fun))))
            if res.success and (best is None or res.cost < best.cost):
                best = res
    if best is None:
        raise FitError("no fit start converged", residuals=traces)
    zeta, Omega, eta_fit = best.x
    if span * eta_fit < 4:
        warnings.warn(f"curve spans only {span * eta_fit:.2f} decay times (need >= 4)",
                      RuntimeWarning, stacklevel=2)
    return ZetaOmegaFit(float(zeta), float(Omega), float(eta_fit), float(np.max(np.abs(best.fun))))


def h_monte_carlo(p: StonyBrookParams, tau: float, dt: float = 1e-3, window: Optional[float] = None,
                  n_traj: int = 10000, seed: int = 0):
    """Monte Carlo estimate of ``h(tau)`` (``tau > 0``) and its standard error.

    Trajectories start in ``rho_ss``; the homodyne current is averaged
    around ``t = window`` and postselected on a detection near ``t + tau``.
    """
    model = build_stonybrook(p)
    rho = steady_state(model)
    window = 10 * dt if window is None else window
    est = monte_carlo_weak_value(model, rho, window, window + tau, dt, window, n_traj, seed)
    ch = model.homodyne_op
    base = float(np.trace((ch + ch.dag()).data @ rho.data).real)
    return est.value / base, est.stderr / abs(base), est


def symmetry_defect(p: StonyBrookParams, taus, dt: Optional[float] = None) -> float:
    """``max |h(-tau) - h(tau)|`` over the given ``tau >= 0``."""
    model = build_stonybrook(p)
    rho = steady_state(model)
    hp = h_positive_tau(p, taus, dt, "full-ME", model=model, rho_ss=rho)
    hm = h_negative_tau(p, taus, dt, model=model, rho_ss=rho)
    return float(np.max(np.abs(np.atleast_1d(hp) - np.atleast_1d(hm))))
