"""Stochastic unravelings: homodyne conditioning, photon counting, Monte Carlo.

Noise conventions
-----------------
Ito calculus throughout.  Each step of length ``dt`` consumes, in this
order, one Wiener increment ``dW ~ N(0, dt)`` (only if the model has a
homodyne channel) and then one uniform ``u ~ U[0, 1)`` (only if the model
has a counting channel).  Trajectory ``i`` of an ensemble with base seed
``s`` uses an independent Mersenne Twister stream seeded with ``s + i``; the
draws are bit-identical to ``numpy.random.RandomState(s + i)`` calling
``standard_normal()`` then ``random_sample()``.

A combined step with noise ``(dW, u)`` does

* jump (``u < p1 = dt Tr[c_n^dag c_n rho]``): ``rho -> c_n rho c_n^dag``;
* otherwise: ``rho -> M rho M^dag + dt sum_{mu not in {h, n}} c_mu rho c_mu^dag`` with
  ``M = 1 + dt K + dy c_h`` and ``dy = X_w dt = Tr[X rho] dt + dW``,

followed by trace renormalization.  Here ``K`` is the model drift
``-iH - sum_mu c_mu^dag c_mu / 2`` (all channels).  To first order in ``dt``
(Ito rules) the normalized no-jump update is the explicit Euler-Maruyama step
``rho + dt L' rho + dW H[c_h] rho`` of the stochastic master equation, but
being a sum of congruences it keeps ``rho`` positive semidefinite exactly.
The explicit form drifts out of the state space by ``O(dt^2)`` per step near
pure states, which is why it is only offered as the single step
:func:`homodyne_step`.  Averaged over ``(dW, u)`` the combined step
reproduces ``rho + dt L rho`` up to ``O(dt^2)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from numba import njit, prange
from numba.core.errors import NumbaWarning

# numba falls back from an outdated TBB on its own; the notice is noise
warnings.filterwarnings("ignore", message=".*TBB threading layer.*", category=NumbaWarning)

from .errors import IntegrationError, NoPostselectionEvents, StepSizeError
from .lindblad import LindbladModel, _rhs
from .operators import Operator, State, hsuper

MAX_JUMP_PROBABILITY = 0.1
STATE_TOL = 1e-6


@dataclass(frozen=True)
class MonitoredChannel:
    """Monitored operator ``c`` and the observable ``X = c + c^dag`` it estimates."""

    c: Operator
    X: Operator = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "X", self.c + self.c.dag())


@dataclass(frozen=True)
class TrajectoryRecord:
    """One realization: homodyne samples and photodetection events.

    ``xw[k]`` is the homodyne current over ``[t_k, t_k + dt)`` and a jump
    recorded at ``t_k`` happened in the same interval.
    """

    times: np.ndarray
    xw: np.ndarray
    jumps: np.ndarray
    postselected: bool
    seed: int
    final_state: np.ndarray = field(repr=False)

    def to_csv(self, path):
        jump_flags = np.zeros(len(self.times), dtype=int)
        idx = np.searchsorted(self.times, self.jumps)
        jump_flags[idx] = 1
        with open(path, "w") as fh:
            fh.write("t,xw,jump\n")
            for t, x, j in zip(self.times, self.xw, jump_flags):
                fh.write(f"{t!r},{float(x)!r},{j}\n")


@dataclass(frozen=True)
class McEstimate:
    """Postselected ensemble mean of the smoothed homodyne current."""

    value: float
    stderr: float
    n_selected: int
    n_total: int
    window: float
    smooth: float


# -- discrete weak measurement -----------------------------------------------

def weak_meas_operator(c: Operator, x: float, delta_t: float) -> Operator:
    """Measurement operator for result ``x`` of a weak measurement of duration ``delta_t``.

    ``M_x = (2 pi / dt)^(-1/4) exp(-x^2 dt / 4) [1 + dt (x c - c^dag c / 2)]``.
    The Gaussian factor gives results with variance ``1/dt`` about
    ``Tr[rho (c + c^dag)]``, which is what makes ``int M_x^dag M_x dx``
    equal the identity up to ``O(dt^2)``.
    """
    if not delta_t > 0:
        raise ValueError("delta_t must be positive")
    n = c.dag() @ c
    amp = (2 * np.pi / delta_t) ** -0.25 * math.exp(-x * x * delta_t / 4)
    poly = np.eye(c.dim) + delta_t * (x * c.data - 0.5 * n.data)
    return Operator(amp * poly, c.space)


def _hermgauss_x(delta_t, n_nodes):
    # results x are distributed with weight exp(-x^2 dt / 2); map to exp(-y^2)
    y, w = np.polynomial.hermite.hermgauss(n_nodes)
    scale = math.sqrt(2.0 / delta_t)
    return y * scale, w * np.exp(y * y) * scale


def completeness_integral(c: Operator, delta_t: float, n_nodes: int = 20) -> np.ndarray:
    """Gauss-Hermite evaluation of ``int M_x^dag M_x dx``."""
    xs, ws = _hermgauss_x(delta_t, n_nodes)
    acc = np.zeros((c.dim, c.dim), dtype=complex)
    for x, w in zip(xs, ws):
        M = weak_meas_operator(c, x, delta_t).data
        acc += w * (M.conj().T @ M)
    return acc


def completeness_deviation(c: Operator, delta_t: float, n_nodes: int = 20) -> float:
    return float(np.max(np.abs(completeness_integral(c, delta_t, n_nodes) - np.eye(c.dim))))


def mean_result(c: Operator, rho: Operator, delta_t: float, n_nodes: int = 20) -> float:
    """Quadrature value of ``sum_x x Tr[M_x rho M_x^dag]``."""
    xs, ws = _hermgauss_x(delta_t, n_nodes)
    total = 0.0
    for x, w in zip(xs, ws):
        M = weak_meas_operator(c, x, delta_t).data
        total += w * x * np.trace(M @ rho.data @ M.conj().T).real
    return float(total)


# -- single steps (reference implementation) ---------------------------------

def _finish(rho, step_name):
    rho = 0.5 * (rho + rho.conj().T)
    tr = np.trace(rho).real
    if not np.isfinite(rho).all() or tr <= 0:
        raise StepSizeError(f"{step_name}: conditioned state lost normalization; reduce dt")
    rho = rho / tr
    lam = np.linalg.eigvalsh(rho)[0]
    if lam < -STATE_TOL:
        raise StepSizeError(f"{step_name}: conditioned state has eigenvalue {lam:.3g}; reduce dt")
    return rho


def homodyne_step(model: LindbladModel, rho: Operator, dt: float, dW: float):
    """One Euler-Maruyama step of homodyne conditioning.

    Returns the conditioned state and the current ``Tr[X rho] + dW/dt``.
    The drift is the full Liouvillian.
    """
    c = model.homodyne_op
    X = c.data + c.data.conj().T
    xw = float(np.einsum("ij,ji->", X, rho.data).real + dW / dt)
    cops = [op.data for op in model.collapse_ops]
    new = rho.data + dt * _rhs(model._drift, cops, rho.data) + dW * hsuper(c, rho.as_operator()).data
    return State(_finish(new, "homodyne_step"), model.space, tol=STATE_TOL), xw


def _no_jump_drift(model, rho):
    n = model.counting_channel
    cops = [op.data for i, op in enumerate(model.collapse_ops) if i != n]
    return _rhs(model._drift, cops, rho)


def counting_step(model: LindbladModel, rho: Operator, dt: float, u: float):
    """One photon-counting step; returns the conditioned state and whether a jump occurred."""
    c = model.counting_op.data
    p1 = dt * np.einsum("ij,ji->", c.conj().T @ c, rho.data).real
    if p1 > MAX_JUMP_PROBABILITY:
        raise StepSizeError(f"jump probability {p1:.3g} per step exceeds {MAX_JUMP_PROBABILITY}; reduce dt")
    if u < p1:
        new = c @ rho.data @ c.conj().T
        return State(_finish(new, "counting_step"), model.space, tol=STATE_TOL), True
    new = rho.data + dt * _no_jump_drift(model, rho.data)
    return State(_finish(new, "counting_step"), model.space, tol=STATE_TOL), False


def trajectory_step(model: LindbladModel, rho: Operator, dt: float, dW: float = 0.0, u: float = 1.0):
    """Combined homodyne + counting step (see module docstring).

    Returns ``(state, xw, jumped)``; ``xw`` is 0 when there is no homodyne channel.
    """
    data = rho.data
    xw = 0.0
    h, n = model.homodyne_channel, model.counting_channel
    if h is not None:
        ch = model.homodyne_op.data
        xw = float(np.einsum("ij,ji->", ch + ch.conj().T, data).real + dW / dt)
    if n is not None:
        c = model.counting_op.data
        p1 = dt * np.einsum("ij,ji->", c.conj().T @ c, data).real
        if p1 > MAX_JUMP_PROBABILITY:
            raise StepSizeError(f"jump probability {p1:.3g} per step exceeds {MAX_JUMP_PROBABILITY}")
        if u < p1:
            new = c @ data @ c.conj().T
            return State(_finish(new, "trajectory_step"), model.space, tol=STATE_TOL), xw, True
    M = np.eye(model.dim) + dt * model._drift
    if h is not None:
        M = M + (xw * dt) * ch
    new = M @ data @ M.conj().T
    for i, op in enumerate(model.collapse_ops):
        if i != h and i != n:
            new = new + dt * (op.data @ data @ op.data.conj().T)
    return State(_finish(new, "trajectory_step"), model.space, tol=STATE_TOL), xw, False


# -- compiled kernel ----------------------------------------------------------

@njit(cache=True)
def _mm(A, B, out):
    d = A.shape[0]
    for i in range(d):
        for j in range(d):
            acc = 0j
            for k in range(d):
                acc += A[i, k] * B[k, j]
            out[i, j] = acc


@njit(cache=True)
def _mm_dag(A, B, out):
    # out = A @ B^dag
    d = A.shape[0]
    for i in range(d):
        for j in range(d):
            acc = 0j
            for k in range(d):
                acc += A[i, k] * B[j, k].conjugate()
            out[i, j] = acc


@njit(cache=True)
def _tr_prod(A, B):
    d = A.shape[0]
    acc = 0j
    for i in range(d):
        for k in range(d):
            acc += A[i, k] * B[k, i]
    return acc


@njit(cache=True)
def _run(K, sand, ch, X, cn, Nn, has_h, has_n, rho0, dt, n_steps, seed, xw, jumps, rho_out):
    """Evolve one trajectory.  Returns 0 on success, 1 for a too-large jump
    probability, 2 for loss of positivity or normalization."""
    np.random.seed(seed)
    d = rho0.shape[0]
    rho = rho0.copy()
    new = np.empty((d, d), dtype=np.complex128)
    tmp = np.empty((d, d), dtype=np.complex128)
    tmp2 = np.empty((d, d), dtype=np.complex128)
    Mk = np.empty((d, d), dtype=np.complex128)
    sqdt = np.sqrt(dt)
    m = sand.shape[0]
    for k in range(n_steps):
        dW = 0.0
        u = 1.0
        if has_h:
            dW = sqdt * np.random.standard_normal()
        if has_n:
            u = np.random.random()
        xw[k] = 0.0
        if has_h:
            xw[k] = _tr_prod(X, rho).real + dW / dt
        jumps[k] = False
        jumped = False
        if has_n:
            p1 = dt * _tr_prod(Nn, rho).real
            if p1 > 0.1:
                return 1
            if u < p1:
                _mm(cn, rho, tmp)
                _mm_dag(tmp, cn, new)
                jumps[k] = True
                jumped = True
        if not jumped:
            # M = 1 + dt K + dy c_h, dy = xw dt
            dy = xw[k] * dt
            for i in range(d):
                for j in range(d):
                    Mk[i, j] = dt * K[i, j] + dy * ch[i, j]
                Mk[i, i] += 1.0
            _mm(Mk, rho, tmp)
            _mm_dag(tmp, Mk, new)
            for mu in range(m):
                _mm(sand[mu], rho, tmp)
                _mm_dag(tmp, sand[mu], tmp2)
                for i in range(d):
                    for j in range(d):
                        new[i, j] += dt * tmp2[i, j]
        tr = 0.0
        for i in range(d):
            tr += new[i, i].real
        if not (tr > 0.0) or not np.isfinite(tr):
            return 2
        inv = 1.0 / tr
        for i in range(d):
            for j in range(i, d):
                v = (0.5 * inv) * (new[i, j] + new[j, i].conjugate())
                rho[i, j] = v
                rho[j, i] = v.conjugate()
            if rho[i, i].real < -1e-6:
                return 2
    rho_out[:, :] = rho
    return 0


@njit(cache=True, parallel=True)
def _ensemble_weak(K, sand, ch, X, cn, Nn, has_h, has_n, rho0, dt, n_steps, base_seed, n_traj,
                   s_lo, s_hi, p_lo, p_hi, postselect, values, selected, status):
    d = rho0.shape[0]
    for i in prange(n_traj):
        xw = np.empty(n_steps)
        jumps = np.zeros(n_steps, dtype=np.bool_)
        rho_out = np.empty((d, d), dtype=np.complex128)
        status[i] = _run(K, sand, ch, X, cn, Nn, has_h, has_n, rho0, dt, n_steps,
                         base_seed + i, xw, jumps, rho_out)
        acc = 0.0
        for k in range(s_lo, s_hi):
            acc += xw[k]
        values[i] = acc / (s_hi - s_lo)
        sel = True
        if postselect:
            sel = False
            for k in range(p_lo, p_hi):
                if jumps[k]:
                    sel = True
        selected[i] = sel


@njit(cache=True, parallel=True)
def _ensemble_states(K, sand, ch, X, cn, Nn, has_h, has_n, rho0, dt, n_steps, base_seed, n_traj,
                     finals, status):
    for i in prange(n_traj):
        xw = np.empty(n_steps)
        jumps = np.zeros(n_steps, dtype=np.bool_)
        status[i] = _run(K, sand, ch, X, cn, Nn, has_h, has_n, rho0, dt, n_steps,
                         base_seed + i, xw, jumps, finals[i])


def _kernel_args(model: LindbladModel, rho0: Operator):
    d = model.dim
    zero = np.zeros((d, d), dtype=np.complex128)
    n, h = model.counting_channel, model.homodyne_channel
    sand = [op.data for i, op in enumerate(model.collapse_ops) if i != n and i != h]
    sand = np.ascontiguousarray(np.array(sand, dtype=np.complex128).reshape(len(sand), d, d))
    has_h = model.homodyne_channel is not None
    has_n = n is not None
    ch = model.homodyne_op.data if has_h else zero
    cn = model.counting_op.data if has_n else zero
    X = ch + ch.conj().T
    Nn = cn.conj().T @ cn
    c = lambda a: np.ascontiguousarray(a, dtype=np.complex128)
    return (c(model._drift), sand, c(ch), c(X), c(cn), c(Nn), has_h, has_n, c(rho0.data))


def _raise_status(status, seeds):
    bad = np.flatnonzero(status)
    if len(bad) == 0:
        return
    code = status[bad[0]]
    seed = seeds[bad[0]] if np.ndim(seeds) else seeds + bad[0]
    if code == 1:
        raise StepSizeError(f"jump probability per step exceeded {MAX_JUMP_PROBABILITY} (seed {seed}); reduce dt")
    raise IntegrationError(f"conditioned state became invalid (seed {seed}); reduce dt")


def _n_steps(T_end, dt):
    return int(round(T_end / dt))


def simulate_trajectory(model: LindbladModel, rho0: Operator, T_end: float, dt: float,
                        seed: int, window: Optional[float] = None, T: Optional[float] = None) -> TrajectoryRecord:
    """Simulate one conditioned trajectory on the grid ``t_k = k dt``.

    ``postselected`` is set when a counting jump lands in ``[T - window,
    T + window]`` (``T`` defaults to ``T_end``, ``window`` to ``10 dt``).
    """
    n_steps = _n_steps(T_end, dt)
    args = _kernel_args(model, rho0)
    xw = np.empty(n_steps)
    jumps = np.zeros(n_steps, dtype=np.bool_)
    final = np.empty((model.dim, model.dim), dtype=np.complex128)
    status = _run(*args, float(dt), n_steps, int(seed), xw, jumps, final)
    _raise_status(np.array([status]), np.array([seed]))
    times = np.arange(n_steps) * dt
    jump_times = times[jumps]
    window = 10 * dt if window is None else window
    T = T_end if T is None else T
    post = bool(np.any((jump_times >= T - window - 1e-12) & (jump_times <= T + window + 1e-12)))
    return TrajectoryRecord(times, xw, jump_times, post, int(seed), final)


def ensemble_final_states(model: LindbladModel, rho0: Operator, T_end: float, dt: float,
                          n_traj: int, seed: int) -> np.ndarray:
    """Conditioned states at ``T_end`` for trajectories seeded ``seed + i``."""
    n_steps = _n_steps(T_end, dt)
    args = _kernel_args(model, rho0)
    finals = np.empty((n_traj, model.dim, model.dim), dtype=np.complex128)
    status = np.zeros(n_traj, dtype=np.int64)
    _ensemble_states(*args, float(dt), n_steps, int(seed), int(n_traj), finals, status)
    _raise_status(status, seed)
    return finals


def ensemble_average(model: LindbladModel, rho0: Operator, T_end: float, dt: float,
                     n_traj: int, seed: int) -> Operator:
    """Unconditional average of the conditioned state at ``T_end``."""
    finals = ensemble_final_states(model, rho0, T_end, dt, n_traj, seed)
    return Operator(finals.mean(axis=0), model.space)


def monte_carlo_weak_value(model: LindbladModel, rho0: Operator, t: float, T: float, dt: float,
                           window: Optional[float] = None, n_traj: int = 10000, seed: int = 0,
                           postselect: bool = True, smooth: Optional[float] = None) -> McEstimate:
    """Postselected average of the homodyne current at time ``t``.

    The current is boxcar-averaged over ``[t - smooth, t + smooth)`` and a
    trajectory is kept when it has a counting jump in ``[T - window,
    T + window]``.  ``window`` defaults to ``10 dt`` and ``smooth`` to
    ``window``.  With ``postselect=False`` every trajectory is kept.
    """
    if model.homodyne_channel is None:
        raise ValueError("model has no homodyne channel")
    if postselect and model.counting_channel is None:
        raise ValueError("postselection needs a counting channel")
    window = 10 * dt if window is None else float(window)
    smooth = window if smooth is None else float(smooth)
    if not t < T:
        raise ValueError("require t < T")
    if window < dt or smooth < dt:
        raise ValueError("window and smoothing width must be at least dt")
    if t - smooth < -1e-12:
        raise ValueError("smoothing interval starts before t = 0")
    s_lo = int(round((t - smooth) / dt))
    s_hi = int(round((t + smooth) / dt))
    p_lo = int(round((T - window) / dt))
    p_hi = int(round((T + window) / dt)) + 1
    n_steps = max(s_hi, p_hi if postselect else s_hi)
    if seed + n_traj > 2 ** 32:
        raise ValueError("seed schedule exceeds the 32-bit seed range")
    args = _kernel_args(model, rho0)
    values = np.empty(n_traj)
    selected = np.zeros(n_traj, dtype=np.bool_)
    status = np.zeros(n_traj, dtype=np.int64)
    _ensemble_weak(*args, float(dt), n_steps, int(seed), int(n_traj), s_lo, s_hi, p_lo, p_hi,
                   bool(postselect), values, selected, status)
    _raise_status(status, seed)
    picked = values[selected]
    n_sel = len(picked)
    if n_sel == 0:
        raise NoPostselectionEvents(
            f"no trajectory had a detection in [{T - window:g}, {T + window:g}] out of {n_traj}; "
            "simulate more trajectories or widen the window"
        )
    mean = math.fsum(np.sort(picked)) / n_sel
    std = float(np.std(picked, ddof=1)) if n_sel > 1 else float("inf")
    return McEstimate(mean, std / math.sqrt(n_sel), n_sel, int(n_traj), window, smooth)


def numba_threads() -> int:
    return numba.get_num_threads()
