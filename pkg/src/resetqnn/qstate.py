"""Dense complex simulation core: pure states, density matrices, local gates.

Wire convention (fixed package-wide): wire 0 is the most significant bit of
the basis index, so the n-qubit basis state |b0 b1 ... b_{n-1}> sits at index
sum_w b_w << (n - 1 - w). Gate application never materializes the full
2^n x 2^n operator; it contracts the gate against the affected axes only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConsistencyError, SizeError, WireError

ATOL = 1e-10  # tolerance for algebraic identities (norms, traces, unitarity)
MAX_QUBITS = 24


def _as_complex(a) -> np.ndarray:
    return np.asarray(a, dtype=np.complex128)


@dataclass
class PureState:
    """Normalized complex amplitude vector over 2^n basis states."""

    n: int
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = _as_complex(self.amplitudes).reshape(-1)
        if not 1 <= self.n <= MAX_QUBITS:
            raise SizeError(f"qubit count {self.n} outside [1, {MAX_QUBITS}]")
        if self.amplitudes.shape != (2**self.n,):
            raise SizeError(
                f"amplitude vector has length {self.amplitudes.size}, expected {2**self.n}"
            )
        norm = np.linalg.norm(self.amplitudes)
        if abs(norm - 1.0) > ATOL:
            raise ConsistencyError(f"state norm {norm} deviates from 1 beyond {ATOL}")

    def copy(self) -> "PureState":
        return PureState(self.n, self.amplitudes.copy())


@dataclass
class DensityMatrix:
    """Hermitian, unit-trace 2^n x 2^n matrix. PSD is checked in tests only."""

    n: int
    entries: np.ndarray

    def __post_init__(self):
        self.entries = _as_complex(self.entries)
        if not 1 <= self.n <= MAX_QUBITS:
            raise SizeError(f"qubit count {self.n} outside [1, {MAX_QUBITS}]")
        dim = 2**self.n
        if self.entries.shape != (dim, dim):
            raise SizeError(f"matrix shape {self.entries.shape}, expected {(dim, dim)}")
        herm = np.max(np.abs(self.entries - self.entries.conj().T))
        if herm > ATOL:
            raise ConsistencyError(f"Hermiticity residual {herm} beyond {ATOL}")
        tr = np.trace(self.entries)
        if abs(tr - 1.0) > ATOL:
            raise ConsistencyError(f"trace {tr} deviates from 1 beyond {ATOL}")

    def copy(self) -> "DensityMatrix":
        return DensityMatrix(self.n, self.entries.copy())


@dataclass
class GateMatrix:
    """Unitary acting on 1 or 2 qubits. For arity 2, the first wire a gate is
    applied to indexes the more significant bit of the 4-dim gate basis."""

    entries: np.ndarray
    arity: int = field(init=False)

    def __post_init__(self):
        self.entries = _as_complex(self.entries)
        if self.entries.shape == (2, 2):
            self.arity = 1
        elif self.entries.shape == (4, 4):
            self.arity = 2
        else:
            raise SizeError(f"gate shape {self.entries.shape}, expected 2x2 or 4x4")
        dim = self.entries.shape[0]
        resid = np.max(np.abs(self.entries.conj().T @ self.entries - np.eye(dim)))
        if resid > ATOL:
            raise ConsistencyError(f"unitarity residual {resid} beyond {ATOL}")


# Standard gates. Rotation conventions: R(t) = exp(-i t G / 2) with G the
# corresponding Pauli; crx controls on the first (more significant) wire.

_SQ2 = 1.0 / np.sqrt(2.0)


def x_gate() -> GateMatrix:
    return GateMatrix(np.array([[0, 1], [1, 0]]))


def y_gate() -> GateMatrix:
    return GateMatrix(np.array([[0, -1j], [1j, 0]]))


def z_gate() -> GateMatrix:
    return GateMatrix(np.array([[1, 0], [0, -1]]))


def h_gate() -> GateMatrix:
    return GateMatrix(np.array([[_SQ2, _SQ2], [_SQ2, -_SQ2]]))


def rx(theta: float) -> GateMatrix:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return GateMatrix(np.array([[c, -1j * s], [-1j * s, c]]))


def ry(theta: float) -> GateMatrix:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return GateMatrix(np.array([[c, -s], [s, c]]))


def rz(theta: float) -> GateMatrix:
    e = np.exp(-1j * theta / 2)
    return GateMatrix(np.array([[e, 0], [0, e.conjugate()]]))


def cnot() -> GateMatrix:
    m = np.eye(4)
    m[[2, 3]] = m[[3, 2]]
    return GateMatrix(m)


def crx(theta: float) -> GateMatrix:
    m = np.eye(4, dtype=np.complex128)
    m[2:, 2:] = rx(theta).entries
    return GateMatrix(m)


def new_zero_state(n: int) -> PureState:
    """Prepare |0...0> on n qubits."""
    if not 1 <= n <= MAX_QUBITS:
        raise SizeError(f"qubit count {n} outside [1, {MAX_QUBITS}]")
    amps = np.zeros(2**n, dtype=np.complex128)
    amps[0] = 1.0
    return PureState(n, amps)


def to_density(state: PureState) -> DensityMatrix:
    """Outer product |psi><psi|."""
    return DensityMatrix(state.n, np.outer(state.amplitudes, state.amplitudes.conj()))


def _check_wires(wires, n: int, arity: int) -> tuple[int, ...]:
    wires = tuple(int(w) for w in wires)
    if len(wires) != arity:
        raise WireError(f"gate acts on {arity} wires, got {len(wires)}")
    if len(set(wires)) != len(wires):
        raise WireError(f"duplicate wires in {wires}")
    for w in wires:
        if not 0 <= w < n:
            raise WireError(f"wire {w} outside [0, {n})")
    return wires


def _apply_on_axes(arr: np.ndarray, g: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Contract gate g against the given size-2 axes of arr.

    arr may carry extra axes (batch, other wires, row/column halves). If g has
    a leading batch axis, axis 0 of arr must be that same batch.
    """
    k = len(axes)
    dk = 2**k
    last = tuple(range(arr.ndim - k, arr.ndim))
    moved = np.moveaxis(arr, axes, last)
    shape = moved.shape
    if g.ndim == 2:
        out = moved.reshape(-1, dk) @ g.T
    else:
        out = np.einsum("bri,bji->brj", moved.reshape(g.shape[0], -1, dk), g)
    return np.moveaxis(out.reshape(shape), last, axes)


def apply_gate(state, gate: GateMatrix, wires):
    """Apply a local gate; returns a new object of the input kind.

    Pure states get G|psi>, density matrices get G rho G^dagger.
    """
    g = gate.entries
    if isinstance(state, PureState):
        wires = _check_wires(wires, state.n, gate.arity)
        view = state.amplitudes.reshape((2,) * state.n)
        out = _apply_on_axes(view, g, wires)
        return PureState(state.n, out.reshape(-1))
    if isinstance(state, DensityMatrix):
        n = state.n
        wires = _check_wires(wires, n, gate.arity)
        view = state.entries.reshape((2,) * (2 * n))
        view = _apply_on_axes(view, g, wires)
        view = _apply_on_axes(view, g.conj(), tuple(n + w for w in wires))
        return DensityMatrix(n, view.reshape(2**n, 2**n))
    raise TypeError(f"cannot apply gate to {type(state).__name__}")


def partial_trace(rho: DensityMatrix, traced_wires) -> DensityMatrix:
    """Trace out the given wires; remaining wires keep their relative order."""
    n = rho.n
    traced = tuple(int(w) for w in traced_wires)
    if len(set(traced)) != len(traced):
        raise WireError(f"duplicate wires in {traced}")
    for w in traced:
        if not 0 <= w < n:
            raise WireError(f"wire {w} outside [0, {n})")
    keep = [w for w in range(n) if w not in traced]
    if not keep:
        raise SizeError("cannot trace out every wire")
    t = rho.entries.reshape((2,) * (2 * n))
    row = list(range(n))
    col = [w if w in traced else n + w for w in range(n)]
    out_labels = keep + [n + w for w in keep]
    red = np.einsum(t, row + col, out_labels)
    m = len(keep)
    return DensityMatrix(m, red.reshape(2**m, 2**m))


@lru_cache(maxsize=None)
def z_signs(n: int, wire: int) -> np.ndarray:
    """(+1, -1) diagonal of Z on `wire` over the n-qubit basis."""
    idx = np.arange(2**n)
    signs = 1.0 - 2.0 * ((idx >> (n - 1 - wire)) & 1)
    signs.setflags(write=False)
    return signs


def expect_z(rho: DensityMatrix, wire: int) -> float:
    """Tr(rho Z_wire), a real value in [-1, 1]."""
    if not 0 <= wire < rho.n:
        raise WireError(f"wire {wire} outside [0, {rho.n})")
    diag = np.real(np.diagonal(rho.entries))
    return float(diag @ z_signs(rho.n, wire))


def purity(rho: DensityMatrix) -> float:
    """Tr(rho^2); 1 for pure states, 1/2^n for the maximally mixed state."""
    return float(np.real(np.vdot(rho.entries, rho.entries)))
