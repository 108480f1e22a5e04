"""Layered measure-and-reset circuit: geometry, parameters, forward maps.

A circuit on n wires runs L identical-shape layers. Each layer places one
7-angle two-qubit module on every adjacent pair (0,1), (1,2), ..., (n-2,n-1)
(or on a configured pattern with the same pair count), then measures every
ancilla wire in the computational basis and resets it to |0>. The flat angle
vector theta has length 7*(n-1)*L, laid out as theta[layer][pair][angle] in
C order.

Module decomposition for angles (t1..t7): Rz(t1) Ry(t2) Rz(t3) on the first
wire, Rz(t4) Ry(t5) Rz(t6) on the second, then a controlled Rx(t7) with the
first wire as control.

The measurement vector holds <Z> for each non-ancilla wire in ascending wire
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import BackendError, ConfigError, SizeError, WireError
from .qstate import DensityMatrix, GateMatrix, _apply_on_axes, z_signs

EXACT_MAX_QUBITS = 12  # 2^12 x 2^12 complex density matrix ~ 268 MB
TRAJECTORY_MAX_QUBITS = 20

_DM_CHUNK_BYTES = 1 << 23  # batched density chunk; larger chunks thrash cache
_TRAJ_RESULT_BYTES = 1 << 28


def param_count(n: int, layers: int) -> int:
    """Total angle count 7*(n-1)*layers."""
    if n < 2:
        raise SizeError(f"need at least 2 qubits, got {n}")
    if layers < 1:
        raise SizeError(f"need at least 1 layer, got {layers}")
    return 7 * (n - 1) * layers


@dataclass(frozen=True)
class CircuitSpec:
    """Geometry of the layered circuit.

    entangler_pattern, when given, lists the module wire pairs for each layer
    and must keep n-1 modules per layer so the parameter count is unchanged.
    """

    n: int
    ancilla_wires: tuple[int, ...]
    layers: int
    entangler_pattern: tuple[tuple[tuple[int, int], ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ancilla_wires", tuple(sorted(int(w) for w in self.ancilla_wires)))
        if not 2 <= self.n <= 24:
            raise SizeError(f"qubit count {self.n} outside [2, 24]")
        if self.layers < 1:
            raise SizeError(f"need at least 1 layer, got {self.layers}")
        anc = self.ancilla_wires
        if len(set(anc)) != len(anc):
            raise WireError(f"duplicate ancilla wires {anc}")
        for w in anc:
            if not 0 <= w < self.n:
                raise WireError(f"ancilla wire {w} outside [0, {self.n})")
        if len(anc) >= self.n:
            raise WireError("every wire is an ancilla; at least one main wire required")
        if self.entangler_pattern is not None:
            pattern = tuple(
                tuple(tuple(int(w) for w in pair) for pair in layer)
                for layer in self.entangler_pattern
            )
            object.__setattr__(self, "entangler_pattern", pattern)
            if len(pattern) != self.layers:
                raise ConfigError(
                    f"pattern covers {len(pattern)} layers, spec has {self.layers}"
                )
            for layer in pattern:
                if len(layer) != self.n - 1:
                    raise ConfigError(
                        f"each layer needs {self.n - 1} module pairs, got {len(layer)}"
                    )
                for a, b in layer:
                    if a == b or not (0 <= a < self.n and 0 <= b < self.n):
                        raise WireError(f"bad module pair ({a}, {b})")

    @cached_property
    def main_wires(self) -> tuple[int, ...]:
        return tuple(w for w in range(self.n) if w not in self.ancilla_wires)

    @property
    def n_main(self) -> int:
        return self.n - len(self.ancilla_wires)

    @property
    def n_ancilla(self) -> int:
        return len(self.ancilla_wires)

    @property
    def param_count(self) -> int:
        return param_count(self.n, self.layers)

    def layer_pairs(self, layer_index: int) -> tuple[tuple[int, int], ...]:
        if self.entangler_pattern is not None:
            return self.entangler_pattern[layer_index]
        return tuple((w, w + 1) for w in range(self.n - 1))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "ancillas": list(self.ancilla_wires),
            "layers": self.layers,
            "pattern": None
            if self.entangler_pattern is None
            else [[list(p) for p in layer] for layer in self.entangler_pattern],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CircuitSpec":
        known = {"n", "ancillas", "layers", "pattern"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown circuit keys: {sorted(unknown)}")
        missing = {"n", "ancillas", "layers"} - set(d)
        if missing:
            raise ConfigError(f"missing circuit keys: {sorted(missing)}")
        pattern = d.get("pattern")
        if pattern is not None:
            pattern = tuple(tuple(tuple(pair) for pair in layer) for layer in pattern)
        return cls(int(d["n"]), tuple(d["ancillas"]), int(d["layers"]), pattern)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CircuitSpec":
        return cls.from_dict(json.loads(text))


DESK_SPEC = CircuitSpec(n=6, ancilla_wires=(1, 5), layers=3)
FULL_SPEC = CircuitSpec(n=15, ancilla_wires=(3, 6, 9, 12), layers=6)


def check_theta(spec: CircuitSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape != (spec.param_count,):
        raise SizeError(
            f"theta has length {theta.size}, spec needs {spec.param_count}"
        )
    if not np.all(np.isfinite(theta)):
        raise SizeError("theta contains non-finite entries")
    return theta


def _rz_m(t: np.ndarray) -> np.ndarray:
    e = np.exp(-0.5j * t)
    m = np.zeros(t.shape + (2, 2), dtype=np.complex128)
    m[..., 0, 0] = e
    m[..., 1, 1] = np.conj(e)
    return m


def _ry_m(t: np.ndarray) -> np.ndarray:
    c, s = np.cos(t / 2), np.sin(t / 2)
    m = np.zeros(t.shape + (2, 2), dtype=np.complex128)
    m[..., 0, 0] = c
    m[..., 0, 1] = -s
    m[..., 1, 0] = s
    m[..., 1, 1] = c
    return m


def _rx_m(t: np.ndarray) -> np.ndarray:
    c, s = np.cos(t / 2), np.sin(t / 2)
    m = np.zeros(t.shape + (2, 2), dtype=np.complex128)
    m[..., 0, 0] = c
    m[..., 0, 1] = -1j * s
    m[..., 1, 0] = -1j * s
    m[..., 1, 1] = c
    return m


def u_module_matrices(params: np.ndarray) -> np.ndarray:
    """Build module unitaries for angle blocks of shape (..., 7) -> (..., 4, 4)."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape[-1] != 7:
        raise SizeError(f"module takes 7 angles, got {params.shape[-1]}")
    a = _rz_m(params[..., 0]) @ _ry_m(params[..., 1]) @ _rz_m(params[..., 2])
    b = _rz_m(params[..., 3]) @ _ry_m(params[..., 4]) @ _rz_m(params[..., 5])
    ab = np.einsum("...ij,...kl->...ikjl", a, b).reshape(params.shape[:-1] + (4, 4))
    ctrl = np.zeros(params.shape[:-1] + (4, 4), dtype=np.complex128)
    ctrl[..., 0, 0] = 1.0
    ctrl[..., 1, 1] = 1.0
    ctrl[..., 2:, 2:] = _rx_m(params[..., 6])
    return ctrl @ ab


def u_module(params) -> GateMatrix:
    """Two-qubit module gate for exactly 7 angles."""
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    if params.shape != (7,):
        raise SizeError(f"module takes 7 angles, got {params.size}")
    return GateMatrix(u_module_matrices(params))


def build_layer_unitary(
    spec: CircuitSpec, layer_params, layer_index: int
) -> list[tuple[GateMatrix, tuple[int, int]]]:
    """Ordered gate list for one layer, consuming 7 angles per module pair."""
    layer_params = np.asarray(layer_params, dtype=np.float64).reshape(-1)
    expect = 7 * (spec.n - 1)
    if layer_params.shape != (expect,):
        raise SizeError(f"layer slice has {layer_params.size} angles, expected {expect}")
    blocks = layer_params.reshape(spec.n - 1, 7)
    pairs = spec.layer_pairs(layer_index)
    return [(u_module(blocks[i]), pairs[i]) for i in range(spec.n - 1)]


def _measure_reset_axes(arr: np.ndarray, row_axis: int, col_axis: int) -> np.ndarray:
    """Project one wire onto each outcome, reset it to |0>, and sum branches."""
    moved = np.moveaxis(arr, (row_axis, col_axis), (-2, -1))
    new = np.zeros_like(moved)
    new[..., 0, 0] = moved[..., 0, 0] + moved[..., 1, 1]
    return np.moveaxis(new, (-2, -1), (row_axis, col_axis))


def measure_reset_channel(rho: DensityMatrix, ancilla_wires) -> DensityMatrix:
    """Measure the given wires in the Z basis, reset them to |0>, sum branches.

    Trace-preserving; the measured wires end exactly in |0...0><0...0|.
    """
    n = rho.n
    wires = tuple(int(w) for w in ancilla_wires)
    for w in wires:
        if not 0 <= w < n:
            raise WireError(f"wire {w} outside [0, {n})")
    if len(set(wires)) != len(wires):
        raise WireError(f"duplicate wires in {wires}")
    view = rho.entries.reshape((2,) * (2 * n))
    for w in wires:
        view = _measure_reset_axes(view, w, n + w)
    return DensityMatrix(n, view.reshape(2**n, 2**n))


def _module_matrices_for(spec: CircuitSpec, thetas: np.ndarray) -> np.ndarray:
    """(K, p) angles -> (K, layers, n-1, 4, 4) module unitaries."""
    k = thetas.shape[0]
    blocks = thetas.reshape(k, spec.layers, spec.n - 1, 7)
    return u_module_matrices(blocks)


def _measurements_from_dm(spec: CircuitSpec, rho: np.ndarray) -> np.ndarray:
    diag = np.einsum("kii->ki", rho).real
    return np.stack([diag @ z_signs(spec.n, w) for w in spec.main_wires], axis=1)


# Adjacent-pair fast paths. With wire 0 as the most significant bit, a module
# on wires (a, a+1) touches two neighboring index bits, so the batched state
# factors into contiguous reshape views and the contraction becomes one
# broadcasted matmul (BLAS) instead of a transpose-heavy einsum.


def _dm_rows_adjacent(rho: np.ndarray, g: np.ndarray, a: int) -> np.ndarray:
    k, dim, _ = rho.shape
    pre = 1 << a
    view = rho.reshape(k, pre, 4, (dim >> (a + 2)) * dim)
    return np.matmul(g[:, None], view).reshape(k, dim, dim)


def _dm_cols_adjacent(rho: np.ndarray, g: np.ndarray, a: int) -> np.ndarray:
    k, dim, _ = rho.shape
    pre = 1 << a
    view = rho.reshape(k, dim * pre, 4, dim >> (a + 2))
    return np.matmul(np.conj(g)[:, None], view).reshape(k, dim, dim)


def _vec_adjacent(psi: np.ndarray, g: np.ndarray, a: int) -> np.ndarray:
    k, dim = psi.shape
    pre = 1 << a
    view = psi.reshape(k, pre, 4, dim >> (a + 2))
    if g.ndim == 2:
        return np.matmul(g, view).reshape(k, dim)
    return np.matmul(g[:, None], view).reshape(k, dim)


def _measure_reset_flat(rho: np.ndarray, w: int, n: int) -> np.ndarray:
    k, dim, _ = rho.shape
    pre = 1 << w
    post = dim >> (w + 1)
    v = rho.reshape(k, pre, 2, post, pre, 2, post)
    new = np.zeros_like(v)
    new[:, :, 0, :, :, 0, :] = v[:, :, 0, :, :, 0, :] + v[:, :, 1, :, :, 1, :]
    return new.reshape(k, dim, dim)


def forward_exact_batch(spec: CircuitSpec, thetas) -> np.ndarray:
    """Exact density-matrix forward map for a batch of angle vectors.

    thetas: (K, p) -> (K, n_main) measurement vectors. Deterministic.
    """
    if spec.n > EXACT_MAX_QUBITS:
        raise BackendError(
            f"exact backend capped at {EXACT_MAX_QUBITS} qubits "
            f"(spec has {spec.n}); use forward_trajectory"
        )
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.ndim != 2 or thetas.shape[1] != spec.param_count:
        raise SizeError(f"thetas must be (K, {spec.param_count}), got {thetas.shape}")
    dim = 2**spec.n
    chunk = max(1, _DM_CHUNK_BYTES // (16 * dim * dim))
    out = np.empty((thetas.shape[0], spec.n_main), dtype=np.float64)
    for start in range(0, thetas.shape[0], chunk):
        sl = slice(start, min(start + chunk, thetas.shape[0]))
        out[sl] = _forward_exact_chunk(spec, thetas[sl])
    return out


def _forward_exact_chunk(spec: CircuitSpec, thetas: np.ndarray) -> np.ndarray:
    k, n = thetas.shape[0], spec.n
    dim = 2**n
    mats = _module_matrices_for(spec, thetas)
    rho = np.zeros((k, dim, dim), dtype=np.complex128)
    rho[:, 0, 0] = 1.0
    for layer in range(spec.layers):
        for m_i, (a, b) in enumerate(spec.layer_pairs(layer)):
            g = mats[:, layer, m_i]
            if b == a + 1:
                rho = _dm_rows_adjacent(rho, g, a)
                rho = _dm_cols_adjacent(rho, g, a)
            else:
                view = rho.reshape((k,) + (2,) * (2 * n))
                view = _apply_on_axes(view, g, (1 + a, 1 + b))
                view = _apply_on_axes(view, g.conj(), (1 + n + a, 1 + n + b))
                rho = view.reshape(k, dim, dim)
        for w in spec.ancilla_wires:
            rho = _measure_reset_flat(rho, w, n)
    return _measurements_from_dm(spec, rho)


def forward_exact(spec: CircuitSpec, theta) -> np.ndarray:
    """Exact measurement vector for a single angle vector."""
    theta = check_theta(spec, theta)
    return forward_exact_batch(spec, theta[None, :])[0]


def forward_trajectory(
    spec: CircuitSpec, theta, shots: int, seed, return_stats: bool = False
):
    """Monte-Carlo unravelling of the exact channel on pure statevectors.

    Samples each ancilla outcome with its Born probability, resets, and
    averages the per-shot <Z> values over shots. Unbiased for forward_exact
    and reproducible for a fixed seed. With return_stats the standard error
    of each mean comes back as a second array.
    """
    if spec.n > TRAJECTORY_MAX_QUBITS:
        raise BackendError(f"trajectory backend capped at {TRAJECTORY_MAX_QUBITS} qubits")
    theta = check_theta(spec, theta)
    if shots < 1:
        raise SizeError(f"shots must be >= 1, got {shots}")
    n, dim = spec.n, 2**spec.n
    mats = _module_matrices_for(spec, theta[None, :])[0]
    rng = np.random.default_rng(seed)
    # One uniform per (layer, ancilla, shot), drawn up front so results do not
    # depend on the internal chunk size.
    uniforms = rng.random((spec.layers, max(spec.n_ancilla, 1), shots))
    chunk = max(1, _TRAJ_RESULT_BYTES // (16 * dim))
    signs = np.stack([z_signs(n, w) for w in spec.main_wires], axis=0)
    total = np.zeros(spec.n_main, dtype=np.float64)
    total_sq = np.zeros(spec.n_main, dtype=np.float64)
    for start in range(0, shots, chunk):
        stop = min(start + chunk, shots)
        s = stop - start
        psi = np.zeros((s, dim), dtype=np.complex128)
        psi[:, 0] = 1.0
        for layer in range(spec.layers):
            for m_i, (a, b) in enumerate(spec.layer_pairs(layer)):
                if b == a + 1:
                    psi = _vec_adjacent(psi, mats[layer, m_i], a)
                else:
                    view = psi.reshape((s,) + (2,) * n)
                    view = _apply_on_axes(view, mats[layer, m_i], (1 + a, 1 + b))
                    psi = view.reshape(s, dim)
            for a_i, w in enumerate(spec.ancilla_wires):
                view = psi.reshape((s,) + (2,) * n)
                view = _sample_reset_wire(view, 1 + w, uniforms[layer, a_i, start:stop])
                psi = view.reshape(s, dim)
        per_shot = (np.abs(psi) ** 2) @ signs.T
        total += per_shot.sum(axis=0)
        total_sq += (per_shot**2).sum(axis=0)
    mean = total / shots
    if not return_stats:
        return mean
    var = np.maximum(total_sq / shots - mean**2, 0.0)
    sem = np.sqrt(var / max(shots - 1, 1))
    return mean, sem


def _sample_reset_wire(view: np.ndarray, axis: int, u: np.ndarray) -> np.ndarray:
    s = view.shape[0]
    moved = np.moveaxis(view, axis, -1)
    flat = np.ascontiguousarray(moved).reshape(s, -1, 2)
    p1 = np.einsum("sk,sk->s", np.abs(flat[:, :, 1]), np.abs(flat[:, :, 1]))
    p1 = np.clip(p1, 0.0, 1.0)
    got_one = u < p1
    p_branch = np.where(got_one, p1, 1.0 - p1)
    chosen = np.where(got_one[:, None], flat[:, :, 1], flat[:, :, 0])
    chosen = chosen / np.sqrt(np.maximum(p_branch, 1e-300))[:, None]
    new = np.zeros_like(flat)
    new[:, :, 0] = chosen
    return np.moveaxis(new.reshape(moved.shape), -1, axis)
