"""Closed-form postselected averages and weak values.

Every formula here is a ratio whose denominator is the postselection
probability (or something proportional to it).  Near-impossible
postselection is reported as :class:`PostselectionError` instead of letting
the ratio blow up silently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import PostselectionError
from .lindblad import LindbladModel, propagate, unitary
from .operators import Operator

OVERLAP_FLOOR = 1e-8
TRACE_FLOOR = 1e-12
STRONG_FLOOR = 1e-14
EIGEN_GROUPING = 1e-9


@dataclass(frozen=True)
class PurePrePost:
    """Preselected ``|psi>`` and postselected ``|phi>`` (both unit norm)."""

    psi: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        for name in ("psi", "phi"):
            v = np.array(getattr(self, name), dtype=complex).ravel()
            if abs(np.linalg.norm(v) - 1) > 1e-10:
                raise ValueError(f"{name} must be normalized (norm {np.linalg.norm(v):.12g})")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if self.psi.shape != self.phi.shape:
            raise ValueError("psi and phi live in different dimensions")

    @classmethod
    def normalized(cls, psi, phi) -> "PurePrePost":
        psi = np.asarray(psi, dtype=complex).ravel()
        phi = np.asarray(phi, dtype=complex).ravel()
        return cls(psi / np.linalg.norm(psi), phi / np.linalg.norm(phi))

    @property
    def overlap(self) -> complex:
        """``<phi|psi>``."""
        return complex(np.vdot(self.phi, self.psi))

    def checked_overlap(self) -> complex:
        ov = self.overlap
        if abs(ov) < OVERLAP_FLOOR:
            raise PostselectionError(
                f"pre- and postselected states are nearly orthogonal (|<phi|psi>| = {abs(ov):.3g})",
                overlap=abs(ov),
            )
        return ov


@dataclass(frozen=True)
class WeakValueResult:
    """Weak value with the raw ratio pieces kept for diagnostics.

    ``value == Re(2 * numerator / denominator)``.
    """

    value: float
    numerator: complex
    denominator: complex

    @classmethod
    def from_ratio(cls, numerator, denominator) -> "WeakValueResult":
        numerator, denominator = complex(numerator), complex(denominator)
        return cls(float((2 * numerator / denominator).real), numerator, denominator)


def _matrix(op):
    return op.data if isinstance(op, Operator) else np.asarray(op, dtype=complex)


def strong_postselected(pp: PurePrePost, X) -> float:
    """Postselected average of a projective measurement of ``X``.

    Degenerate eigenvalues (within 1e-9) are treated as one outcome with the
    Lueders projector onto the eigenspace.
    """
    x = _matrix(X)
    if np.max(np.abs(x - x.conj().T)) > 1e-10:
        raise ValueError("observable must be Hermitian")
    evals, evecs = np.linalg.eigh(x)
    groups = []
    for i, lam in enumerate(evals):
        if groups and abs(lam - groups[-1][0]) < EIGEN_GROUPING:
            groups[-1][1].append(i)
        else:
            groups.append((lam, [i]))
    num = den = 0.0
    for lam, idx in groups:
        V = evecs[:, idx]
        # <phi|P_x|psi> with P_x = V V^dag
        amp = np.vdot(V.conj().T @ pp.phi, V.conj().T @ pp.psi)
        w = abs(amp) ** 2
        num += lam * w
        den += w
    if den < STRONG_FLOOR:
        raise PostselectionError(
            f"postselection impossible after a strong measurement (probability {den:.3g})",
            overlap=den,
        )
    return float(num / den)


def aav_weak_value(pp: PurePrePost, X) -> float:
    """``Re <phi|X|psi> / <phi|psi>``; may lie outside the spectrum of X."""
    ov = pp.checked_overlap()
    return float((np.vdot(pp.phi, _matrix(X) @ pp.psi) / ov).real)


def generalized_weak_value(pp: PurePrePost, c) -> float:
    """``2 Re <phi|c|psi> / <phi|psi>`` for a (possibly non-Hermitian) c."""
    ov = pp.checked_overlap()
    return float(2 * (np.vdot(pp.phi, _matrix(c) @ pp.psi) / ov).real)


def weak_value_unitary(psi0, phiT, c, H: Operator, t: float, T: float) -> float:
    """Weak value at time ``t`` with free unitary evolution under ``H``.

    ``2 Re <phi(T)|U(T-t) c U(t)|psi(0)> / <phi(T)|U(T)|psi(0)>``.
    """
    if not 0 <= t <= T:
        raise ValueError("require 0 <= t <= T")
    psi0 = np.asarray(psi0, dtype=complex).ravel()
    phiT = np.asarray(phiT, dtype=complex).ravel()
    psi0 = psi0 / np.linalg.norm(psi0)
    phiT = phiT / np.linalg.norm(phiT)
    U_t = unitary(H, t).data
    U_rest = unitary(H, T - t).data
    U_T = unitary(H, T).data
    den = np.vdot(phiT, U_T @ psi0)
    if abs(den) < OVERLAP_FLOOR:
        raise PostselectionError(
            f"evolved states nearly orthogonal (|<phi(T)|U(T)|psi(0)>| = {abs(den):.3g})",
            overlap=abs(den),
        )
    num = np.vdot(phiT, U_rest @ _matrix(c) @ U_t @ psi0)
    return float(2 * (num / den).real)


def general_weak_value(model: LindbladModel, rho0: Operator, E_T: Operator, t: float, T: float,
                       dt: Optional[float] = None, c: Optional[Operator] = None) -> WeakValueResult:
    """Weak value for mixed states, Lindblad evolution and a final effect.

    ``2 Re Tr[E_T e^{L(T-t)} (c e^{Lt} rho0)] / Tr[E_T e^{LT} rho0]``.

    ``c`` defaults to the model's homodyne channel.  Passing it explicitly
    allows an idealised single weak measurement whose back-action is not
    part of the master equation (e.g. a dissipation-free model).
    """
    if not 0 <= t <= T:
        raise ValueError("require 0 <= t <= T")
    if c is None:
        c = model.homodyne_op
    rho_t = propagate(model, rho0, t, dt)
    kicked = propagate(model, c @ rho_t, T - t, dt)
    final = propagate(model, rho_t, T - t, dt)
    numerator = np.einsum("ij,ji->", E_T.data, kicked.data)
    denominator = np.einsum("ij,ji->", E_T.data, final.data)
    if abs(denominator) < TRACE_FLOOR:
        raise PostselectionError(
            f"postselection probability {abs(denominator):.3g} is below {TRACE_FLOOR}",
            overlap=abs(denominator),
        )
    return WeakValueResult.from_ratio(numerator, denominator)


def retro_weak_value(E_retro: Operator, rho_t: Operator, c: Operator) -> float:
    """``2 Re Tr[E c rho] / Tr[E rho]`` with a retrodicted effect ``E``."""
    return retro_weak_value_result(E_retro, rho_t, c).value


def retro_weak_value_result(E_retro: Operator, rho_t: Operator, c: Operator) -> WeakValueResult:
    E_retro._check(rho_t)
    E_retro._check(c)
    numerator = np.einsum("ij,jk,ki->", E_retro.data, c.data, rho_t.data)
    denominator = np.einsum("ij,ji->", E_retro.data, rho_t.data)
    if abs(denominator) < TRACE_FLOOR:
        raise PostselectionError(
            f"retrodicted postselection probability {abs(denominator):.3g} is below {TRACE_FLOOR}",
            overlap=abs(denominator),
        )
    return WeakValueResult.from_ratio(numerator, denominator)
