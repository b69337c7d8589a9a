"""Deterministic Lindblad evolution, steady states and retrodicted effects.

The generator is

    L rho = -i[H, rho] + sum_mu D[c_mu] rho,

and the retrodictive (adjoint) generator acting on effects is

    dE/dt = +i[H, E] + sum_mu (c_mu^dag E c_mu - {c_mu^dag c_mu, E}/2).

The retrodictive equation is not trace or norm preserving; retrodicted
effects are only ever used inside ratios, so their scale is irrelevant.

Both directions are integrated with a fixed-step classical Runge-Kutta
scheme written in terms of the non-Hermitian drift ``K = -iH - sum c^dag c/2``:
``L rho = K rho + rho K^dag + sum c rho c^dag``.  In finite dimension every
generator is bounded, so no domain questions arise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import IntegrationError, SpaceMismatchError, SteadyStateError
from .operators import Effect, HilbertSpace, Operator, State, _as_space

MAX_SUPEROPERATOR_DIM = 64
# up to this Hilbert dimension RK4 steps are taken as dense superoperator products
DENSE_STEP_DIM = 12
DEFAULT_MAX_DT = 1e-3


@dataclass(frozen=True)
class LindbladModel:
    """Hamiltonian plus collapse operators, with optional monitored channels.

    Parameters
    ----------
    H : Operator
        Hermitian Hamiltonian.
    collapse_ops : sequence of Operator
        Collapse operators ``c_mu`` (rates folded in).
    homodyne_channel : int, optional
        Index of the channel whose output is homodyne detected.
    counting_channel : int, optional
        Index of the channel whose output is photon counted.
    """

    H: Operator
    collapse_ops: tuple = ()
    homodyne_channel: Optional[int] = None
    counting_channel: Optional[int] = None
    _drift: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ops = tuple(self.collapse_ops)
        object.__setattr__(self, "collapse_ops", ops)
        for c in ops:
            if c.space != self.H.space:
                raise SpaceMismatchError(f"collapse operator on {c.space}, Hamiltonian on {self.H.space}")
        if not self.H.is_hermitian():
            raise ValueError("Hamiltonian must be Hermitian to 1e-10")
        for name in ("homodyne_channel", "counting_channel"):
            idx = getattr(self, name)
            if idx is not None and not 0 <= idx < len(ops):
                raise ValueError(f"{name}={idx} out of range for {len(ops)} collapse operators")
        if (self.homodyne_channel is not None
                and self.homodyne_channel == self.counting_channel):
            raise ValueError("homodyne and counting channels must be distinct")
        drift = -1j * self.H.data
        for c in ops:
            drift = drift - 0.5 * c.data.conj().T @ c.data
        drift.setflags(write=False)
        object.__setattr__(self, "_drift", drift)

    @property
    def space(self) -> HilbertSpace:
        return self.H.space

    @property
    def dim(self) -> int:
        return self.H.space.total_dim

    @property
    def homodyne_op(self) -> Operator:
        if self.homodyne_channel is None:
            raise ValueError("model has no homodyne channel")
        return self.collapse_ops[self.homodyne_channel]

    @property
    def counting_op(self) -> Operator:
        if self.counting_channel is None:
            raise ValueError("model has no counting channel")
        return self.collapse_ops[self.counting_channel]

    def max_rate(self) -> float:
        rates = [self.H.norm_max()]
        rates += [float(np.max(np.abs(c.data.conj().T @ c.data))) for c in self.collapse_ops]
        return max(rates)

    def default_dt(self) -> float:
        rate = self.max_rate()
        return DEFAULT_MAX_DT if rate == 0 else min(DEFAULT_MAX_DT, 0.01 / rate)

    def without_dissipation(self) -> "LindbladModel":
        return LindbladModel(self.H)


def _rhs(K, cops, rho, Kd=None, cds=None):
    Kd = K.conj().T if Kd is None else Kd
    out = K @ rho + rho @ Kd
    for i, c in enumerate(cops):
        out += c @ rho @ (c.conj().T if cds is None else cds[i])
    return out


def _adjoint_rhs(K, cops, E, Kd=None, cds=None):
    Kd = K.conj().T if Kd is None else Kd
    out = Kd @ E + E @ K
    for i, c in enumerate(cops):
        out += (c.conj().T if cds is None else cds[i]) @ E @ c
    return out


def _daggers(K, cops):
    return np.ascontiguousarray(K.conj().T), [np.ascontiguousarray(c.conj().T) for c in cops]


def _check_space(model, op):
    if op.space != model.space:
        raise SpaceMismatchError(f"operator on {op.space}, model on {model.space}")


def liouvillian_apply(model: LindbladModel, rho: Operator) -> Operator:
    """Return ``L rho`` (rho need not be a valid state)."""
    _check_space(model, rho)
    cops = [c.data for c in model.collapse_ops]
    return Operator(_rhs(model._drift, cops, rho.data), model.space)


def adjoint_apply(model: LindbladModel, E: Operator) -> Operator:
    """Return the retrodictive generator applied to ``E``."""
    _check_space(model, E)
    cops = [c.data for c in model.collapse_ops]
    return Operator(_adjoint_rhs(model._drift, cops, E.data), model.space)


def _integrate(f, x0, times, dt, S=None):
    """Classical RK4 on an autonomous linear ODE, sampled at ``times``.

    ``times`` must be non-decreasing and start at or after zero.  Between
    consecutive sample times the interval is split into ``ceil(span / dt)``
    equal steps, so every sample lands exactly on the integration grid.
    When the generator is available as a matrix ``S`` (acting on ``x0``
    flattened), each step applies the equivalent RK4 polynomial
    ``1 + hS + (hS)^2/2 + (hS)^3/6 + (hS)^4/24`` as one matrix product.
    """
    x = np.array(x0, dtype=complex)
    shape = x.shape
    if S is not None:
        x = x.reshape(-1, order="F")
    out = []
    t_prev = 0.0
    step = 0
    for t in times:
        span = t - t_prev
        if span < 0:
            raise ValueError("sample times must be non-decreasing and >= 0")
        n = max(1, math.ceil(span / dt - 1e-9)) if span > 0 else 0
        h = span / n if n else 0.0
        half, sixth = 0.5 * h, h / 6.0
        if S is not None and n:
            hS = h * S
            P = np.eye(len(x)) + hS @ (np.eye(len(x)) + hS @ (0.5 * np.eye(len(x)) + hS @ (
                np.eye(len(x)) / 6 + hS / 24)))
        # blow-up is reported below as an IntegrationError
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(n):
                if S is None:
                    k1 = f(x)
                    k2 = f(x + half * k1)
                    k3 = f(x + half * k2)
                    k4 = f(x + h * k3)
                    x = x + sixth * (k1 + 2 * k2 + 2 * k3 + k4)
                else:
                    x = P @ x
                step += 1
                if not np.isfinite(x).all():
                    raise IntegrationError(
                        f"non-finite entries at integration step {step} (h={h:.3g}); reduce dt",
                        step=step,
                    )
        out.append(x.reshape(shape, order="F") if S is not None else x.copy())
        t_prev = t
    return out


def _resolve_dt(model, dt):
    dt = model.default_dt() if dt is None else float(dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    return dt


def propagate(model: LindbladModel, rho: Operator, t: float, dt: Optional[float] = None) -> Operator:
    """Evolve ``rho`` forward by ``t`` under the master equation."""
    if t < 0:
        raise ValueError("propagation time must be >= 0")
    return propagate_series(model, rho, [t], dt)[0]


def propagate_series(model, rho: Operator, times: Sequence[float], dt=None) -> list[Operator]:
    """Forward evolution sampled at each of the (non-decreasing) ``times``."""
    _check_space(model, rho)
    dt = _resolve_dt(model, dt)
    K = model._drift
    cops = [c.data for c in model.collapse_ops]
    Kd, cds = _daggers(K, cops)
    S = liouvillian_matrix(model) if model.dim <= DENSE_STEP_DIM else None
    mats = _integrate(lambda x: _rhs(K, cops, x, Kd, cds), rho.data, times, dt, S)
    return [Operator(m, model.space) for m in mats]


def retropropagate(model: LindbladModel, E: Operator, tau: float, dt: Optional[float] = None) -> Effect:
    """Evolve an effect by ``tau`` under the retrodictive master equation."""
    if tau < 0:
        raise ValueError("retrodiction time must be >= 0")
    return retropropagate_series(model, E, [tau], dt)[0]


def retropropagate_series(model, E: Operator, taus: Sequence[float], dt=None) -> list[Effect]:
    _check_space(model, E)
    dt = _resolve_dt(model, dt)
    K = model._drift
    cops = [c.data for c in model.collapse_ops]
    Kd, cds = _daggers(K, cops)
    S = _adjoint_matrix(model) if model.dim <= DENSE_STEP_DIM else None
    mats = _integrate(lambda x: _adjoint_rhs(K, cops, x, Kd, cds), E.data, taus, dt, S)
    out = []
    for m in mats:
        m = 0.5 * (m + m.conj().T)
        out.append(Effect(m, model.space, bounded=False, tol=1e-8))
    return out


def unitary(H: Operator, t: float) -> Operator:
    """``exp(-i H t)`` via scaling and squaring."""
    return Operator(scipy.linalg.expm(-1j * t * H.data), H.space)


# -- vectorized Liouvillian ---------------------------------------------------

def vec(op) -> np.ndarray:
    """Column-major (column-stacking) vectorization."""
    data = op.data if isinstance(op, Operator) else np.asarray(op)
    return data.reshape(-1, order="F")


def unvec(v, space) -> Operator:
    space = _as_space(space)
    d = space.total_dim
    return Operator(np.asarray(v).reshape(d, d, order="F"), space)


def liouvillian_matrix(model: LindbladModel) -> np.ndarray:
    """Matrix ``M`` with ``M @ vec(rho) == vec(L rho)`` (column stacking).

    Uses ``vec(A X B) = (B^T kron A) vec(X)``.
    """
    d = model.dim
    if d > MAX_SUPEROPERATOR_DIM:
        raise ValueError(f"total dimension {d} exceeds the superoperator guard {MAX_SUPEROPERATOR_DIM}")
    eye = np.eye(d)
    K = model._drift
    M = np.kron(eye, K) + np.kron(K.conj(), eye)
    for c in model.collapse_ops:
        M += np.kron(c.data.conj(), c.data)
    return M


def _adjoint_matrix(model: LindbladModel) -> np.ndarray:
    """Matrix of the retrodictive generator in the same column-stacking convention."""
    d = model.dim
    eye = np.eye(d)
    K = model._drift
    M = np.kron(eye, K.conj().T) + np.kron(K.T, eye)
    for c in model.collapse_ops:
        M += np.kron(c.data.T, c.data.conj().T)
    return M


def steady_state(model: LindbladModel) -> State:
    """Unique stationary state from the null space of the Liouvillian."""
    M = liouvillian_matrix(model)
    try:
        evals, evecs = np.linalg.eig(M)
    except np.linalg.LinAlgError as exc:
        raise SteadyStateError(f"eigensolver failed: {exc}") from exc
    order = np.argsort(np.abs(evals))
    if len(evals) > 1 and abs(evals[order[1]]) < 1e-10:
        raise SteadyStateError(
            f"degenerate null space: second eigenvalue {evals[order[1]]:.3g}; steady state is ambiguous"
        )
    rho = evecs[:, order[0]].reshape(model.dim, model.dim, order="F")
    rho = 0.5 * (rho + rho.conj().T)
    tr = np.trace(rho)
    if abs(tr) < 1e-14:
        raise SteadyStateError("null vector has zero trace")
    rho = rho / tr
    residual = np.max(np.abs(_rhs(model._drift, [c.data for c in model.collapse_ops], rho)))
    if residual > 1e-8:
        raise SteadyStateError(f"steady-state residual {residual:.3g} exceeds 1e-8")
    return State(rho, model.space)


def liouvillian_spectrum(model: LindbladModel) -> np.ndarray:
    """Eigenvalues of the Liouvillian sorted by decreasing real part."""
    evals = np.linalg.eigvals(liouvillian_matrix(model))
    return evals[np.argsort(-evals.real)]
