"""Dense operator algebra on tensor-product Hilbert spaces.

Conventions
-----------
* Fock basis is ascending, ``|0>, |1>, ..., |n_max>``.
* A two-level atom uses the basis order ``(g, e)``, so ``|g> = (1, 0)``.
* Composite spaces are ordered field first, then atoms ``1..N``; subsystem
  ``0`` is the leftmost Kronecker factor.

Operators are immutable: the underlying array is copied on construction and
flagged read-only, so instances can be shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from .errors import InvalidStateError, SpaceMismatchError

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
POSITIVITY_TOL = 1e-10


@dataclass(frozen=True)
class HilbertSpace:
    """Ordered list of subsystem dimensions."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise ValueError("a Hilbert space needs at least one subsystem")
        if any(d < 1 for d in dims):
            raise ValueError(f"subsystem dimensions must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    def __len__(self):
        return len(self.dims)

    def __str__(self):
        return "x".join(str(d) for d in self.dims)


def _as_space(space) -> HilbertSpace:
    if isinstance(space, HilbertSpace):
        return space
    if isinstance(space, (int, np.integer)):
        return HilbertSpace((int(space),))
    return HilbertSpace(tuple(space))


class Operator:
    """Square complex matrix tagged with the space it acts on."""

    __slots__ = ("space", "data")
    __array_priority__ = 100

    def __init__(self, data, space=None):
        arr = np.array(data, dtype=complex, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"operator matrix must be square, got shape {arr.shape}")
        space = HilbertSpace((arr.shape[0],)) if space is None else _as_space(space)
        if space.total_dim != arr.shape[0]:
            raise SpaceMismatchError(
                f"matrix dimension {arr.shape[0]} does not match space {space} "
                f"(total_dim {space.total_dim})"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Operator instances are immutable")

    # -- helpers -----------------------------------------------------------
    def _check(self, other: "Operator"):
        if self.space != other.space:
            raise SpaceMismatchError(f"space mismatch: {self.space} vs {other.space}")

    def _new(self, data) -> "Operator":
        return Operator(data, self.space)

    @property
    def dim(self) -> int:
        return self.space.total_dim

    def dag(self) -> "Operator":
        return self._new(self.data.conj().T)

    def trace(self) -> complex:
        return complex(np.trace(self.data))

    def is_hermitian(self, tol: float = HERMITIAN_TOL) -> bool:
        return bool(np.max(np.abs(self.data - self.data.conj().T), initial=0.0) <= tol)

    def norm_max(self) -> float:
        return float(np.max(np.abs(self.data), initial=0.0))

    def as_operator(self) -> "Operator":
        """Drop any subclass tag (State, Effect)."""
        return Operator(self.data, self.space)

    # -- arithmetic --------------------------------------------------------
    def __matmul__(self, other):
        if isinstance(other, Operator):
            self._check(other)
            return self._new(self.data @ other.data)
        return self.data @ np.asarray(other)

    def __rmatmul__(self, other):
        return np.asarray(other) @ self.data

    def __add__(self, other):
        if not isinstance(other, Operator):
            return NotImplemented
        self._check(other)
        return self._new(self.data + other.data)

    def __sub__(self, other):
        if not isinstance(other, Operator):
            return NotImplemented
        self._check(other)
        return self._new(self.data - other.data)

    def __neg__(self):
        return self._new(-self.data)

    def __mul__(self, scalar):
        if isinstance(scalar, Operator) or not np.isscalar(scalar):
            return NotImplemented
        return self._new(self.data * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Operator) or not np.isscalar(scalar):
            return NotImplemented
        return self._new(self.data / scalar)

    def __eq__(self, other):
        if not isinstance(other, Operator):
            return NotImplemented
        return self.space == other.space and np.array_equal(self.data, other.data)

    __hash__ = None

    def __repr__(self):
        return f"{type(self).__name__}(space={self.space}, data=\n{self.data!r})"


def _min_eig(data) -> float:
    herm = 0.5 * (data + data.conj().T)
    return float(np.linalg.eigvalsh(herm)[0])


class State(Operator):
    """Density matrix: Hermitian, unit trace, positive semidefinite."""

    __slots__ = ()

    def __init__(self, data, space=None, tol: float = HERMITIAN_TOL):
        if isinstance(data, Operator):
            space = data.space if space is None else space
            data = data.data
        super().__init__(data, space)
        herm = np.max(np.abs(self.data - self.data.conj().T))
        if herm > tol:
            raise InvalidStateError(f"density matrix not Hermitian (max |rho - rho^dag| = {herm:.3g})")
        tr = np.trace(self.data)
        if abs(tr - 1) > tol:
            raise InvalidStateError(f"density matrix trace is {tr:.12g}, expected 1")
        lam = _min_eig(self.data)
        if lam < -tol:
            raise InvalidStateError(f"density matrix has negative eigenvalue {lam:.3g}")

    @classmethod
    def from_ket(cls, psi, space=None) -> "State":
        psi = np.asarray(psi, dtype=complex).ravel()
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()), space)

    @classmethod
    def maximally_mixed(cls, space) -> "State":
        space = _as_space(space)
        return cls(np.eye(space.total_dim) / space.total_dim, space)


class Effect(Operator):
    """Positive operator describing a (possibly retrodicted) final measurement.

    ``bounded=True`` additionally enforces ``E <= 1``, which holds for an
    effect at creation time. Retrodicted effects only keep positivity.
    """

    __slots__ = ()

    def __init__(self, data, space=None, bounded: bool = True, tol: float = HERMITIAN_TOL):
        if isinstance(data, Operator):
            space = data.space if space is None else space
            data = data.data
        super().__init__(data, space)
        herm = np.max(np.abs(self.data - self.data.conj().T))
        if herm > tol:
            raise InvalidStateError(f"effect not Hermitian (max |E - E^dag| = {herm:.3g})")
        lam = _min_eig(self.data)
        if lam < -tol:
            raise InvalidStateError(f"effect has negative eigenvalue {lam:.3g}")
        if bounded:
            top = 1 - _min_eig(np.eye(self.dim) - self.data)
            if top > 1 + tol:
                raise InvalidStateError(f"effect exceeds identity (max eigenvalue {top:.12g})")

    def display_normalized(self) -> "Effect":
        """Scale so the largest eigenvalue is 1 (for plotting only)."""
        top = float(np.linalg.eigvalsh(0.5 * (self.data + self.data.conj().T))[-1])
        if top <= 0:
            return self
        return Effect(self.data / top, self.space, bounded=False, tol=1e-8)


# -- constructors -------------------------------------------------------------

def identity(space) -> Operator:
    space = _as_space(space)
    return Operator(np.eye(space.total_dim), space)


def annihilation(n_max: int) -> Operator:
    """Truncated field annihilation operator on ``n_max + 1`` Fock levels."""
    n_max = int(n_max)
    if n_max < 1:
        raise ValueError("n_max must be >= 1 (a single Fock level has no dynamics)")
    return Operator(np.diag(np.sqrt(np.arange(1, n_max + 1)), k=1), (n_max + 1,))


def sigma_lower() -> Operator:
    """Atomic lowering operator ``|g><e|`` in the basis ``(g, e)``."""
    return Operator([[0, 1], [0, 0]], (2,))


def basis(dim: int, index: int) -> np.ndarray:
    vec = np.zeros(int(dim), dtype=complex)
    vec[index] = 1.0
    return vec


def tensor_ket(*kets) -> np.ndarray:
    return reduce(np.kron, [np.asarray(k, dtype=complex) for k in kets])


def projector(psi, space=None) -> Operator:
    psi = np.asarray(psi, dtype=complex).ravel()
    return Operator(np.outer(psi, psi.conj()), space)


def embed(op: Operator, index: int, space) -> Operator:
    """Lift a single-subsystem operator into ``1 x ... x op x ... x 1``."""
    space = _as_space(space)
    if not 0 <= index < len(space):
        raise IndexError(f"subsystem index {index} out of range for space {space}")
    if op.space.dims != (space.dims[index],):
        raise SpaceMismatchError(
            f"operator on {op.space} cannot act on subsystem {index} of {space}"
        )
    factors = [np.eye(d) for d in space.dims]
    factors[index] = op.data
    return Operator(reduce(np.kron, factors), space)


def tensor(*ops: Operator) -> Operator:
    dims = tuple(d for op in ops for d in op.space.dims)
    return Operator(reduce(np.kron, [op.data for op in ops]), dims)


# -- superoperators -----------------------------------------------------------

def dsuper(A: Operator, B: Operator) -> Operator:
    """Dissipator ``D[A]B = A B A^dag - {A^dag A, B}/2``."""
    A._check(B)
    a, b = A.data, B.data
    ad = a.conj().T
    n = ad @ a
    return A._new(a @ b @ ad - 0.5 * (n @ b + b @ n))


def hsuper(A: Operator, B: Operator) -> Operator:
    """Conditioning term ``H[A]B = (A - Tr[AB]) B + h.c.``."""
    A._check(B)
    a, b = A.data, B.data
    mean = np.trace(a @ b)
    left = a @ b - mean * b
    return A._new(left + left.conj().T)


def expectation(A: Operator, rho: Operator) -> complex:
    A._check(rho)
    # Tr[A rho] without forming the product
    return complex(np.einsum("ij,ji->", A.data, rho.data))


def _random_state_matrix(dim, rng, rank=None):
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho)


def random_state(space, rng=None, rank=None) -> State:
    """Random density matrix (Ginibre construction)."""
    space = _as_space(space)
    rng = np.random.default_rng(rng)
    return State(_random_state_matrix(space.total_dim, rng, rank), space)


def random_ket(dim: int, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    psi = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return psi / np.linalg.norm(psi)


def random_hermitian(space, rng=None) -> Operator:
    space = _as_space(space)
    rng = np.random.default_rng(rng)
    d = space.total_dim
    g = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return Operator(0.5 * (g + g.conj().T), space)


def random_operator(space, rng=None) -> Operator:
    space = _as_space(space)
    rng = np.random.default_rng(rng)
    d = space.total_dim
    return Operator(rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)), space)


def as_operator(obj, space=None) -> Operator:
    if isinstance(obj, Operator):
        return obj
    return Operator(obj, space)


def check_same_space(ops: Sequence[Operator]):
    for op in ops[1:]:
        ops[0]._check(op)
