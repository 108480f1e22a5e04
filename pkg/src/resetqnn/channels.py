"""Kraus representation of a measure-and-reset layer, plus numeric checks.

One layer acts on main qubits as rho -> sum_x K_x rho K_x^dagger where
K_x picks the <x| ancilla component of the layer unitary applied to |0>
ancillas. Dense unitary construction is a verification tool and capped at
KRAUS_MAX_QUBITS; production evolution never builds it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ansatz import CircuitSpec, measure_reset_channel, u_module_matrices
from .errors import BackendError, ConsistencyError, SizeError
from .qstate import DensityMatrix, _apply_on_axes

KRAUS_MAX_QUBITS = 10

COMPLETENESS_ATOL = 1e-10
EFFECTIVE_BRANCH_NORM = 1e-8


@dataclass
class KrausSet:
    """Operators of one measure-and-reset layer on the main qubits.

    operators has shape (2^n_ancilla, 2^n_main, 2^n_main); completeness
    sum_x K_x^dagger K_x = I is validated by `layer_kraus` at extraction.
    """

    operators: np.ndarray
    ancilla_wires: tuple[int, ...]
    n_main: int

    def __post_init__(self):
        self.operators = np.asarray(self.operators, dtype=np.complex128)
        dm = 2**self.n_main
        if self.operators.ndim != 3 or self.operators.shape[1:] != (dm, dm):
            raise SizeError(
                f"operator stack shape {self.operators.shape}, expected (*, {dm}, {dm})"
            )

    def completeness_residual(self) -> float:
        dm = self.operators.shape[1]
        acc = np.einsum("xji,xjk->ik", self.operators.conj(), self.operators)
        return float(np.max(np.abs(acc - np.eye(dm))))


def layer_unitary_dense(spec: CircuitSpec, layer_params, layer_index: int = 0) -> np.ndarray:
    """Full 2^n x 2^n unitary of one layer, built column by column."""
    if spec.n > KRAUS_MAX_QUBITS:
        raise BackendError(f"dense unitary construction capped at {KRAUS_MAX_QUBITS} qubits")
    layer_params = np.asarray(layer_params, dtype=np.float64).reshape(-1)
    expect = 7 * (spec.n - 1)
    if layer_params.shape != (expect,):
        raise SizeError(f"layer slice has {layer_params.size} angles, expected {expect}")
    n, dim = spec.n, 2**spec.n
    mats = u_module_matrices(layer_params.reshape(spec.n - 1, 7))
    cols = np.eye(dim, dtype=np.complex128).reshape((dim,) + (2,) * n)
    for m_i, (a, b) in enumerate(spec.layer_pairs(layer_index)):
        cols = _apply_on_axes(cols, mats[m_i], (1 + a, 1 + b))
    # cols[j] = U|j>, so stacking gives U^T
    return cols.reshape(dim, dim).T


def _scatter_indices(n: int, wires: tuple[int, ...]) -> np.ndarray:
    """Basis indices obtained by depositing each k-bit pattern on `wires`."""
    k = len(wires)
    out = np.zeros(2**k, dtype=np.intp)
    for pattern in range(2**k):
        idx = 0
        for bit_pos, w in enumerate(wires):
            if (pattern >> (k - 1 - bit_pos)) & 1:
                idx |= 1 << (n - 1 - w)
        out[pattern] = idx
    return out


def kraus_from_unitary(unitary: np.ndarray, n: int, ancilla_wires) -> KrausSet:
    """Extract {K_x} from a dense n-qubit unitary with ancillas fed |0...0>."""
    unitary = np.asarray(unitary, dtype=np.complex128)
    anc = tuple(sorted(int(w) for w in ancilla_wires))
    if unitary.shape != (2**n, 2**n):
        raise SizeError(f"unitary shape {unitary.shape}, expected {(2**n, 2**n)}")
    main = tuple(w for w in range(n) if w not in anc)
    main_scatter = _scatter_indices(n, main)
    anc_scatter = _scatter_indices(n, anc)
    ops = np.empty((2 ** len(anc), 2 ** len(main), 2 ** len(main)), dtype=np.complex128)
    for x in range(2 ** len(anc)):
        rows = anc_scatter[x] + main_scatter
        ops[x] = unitary[np.ix_(rows, main_scatter)]
    ks = KrausSet(ops, anc, len(main))
    resid = ks.completeness_residual()
    if resid > COMPLETENESS_ATOL:
        raise ConsistencyError(f"completeness residual {resid} beyond {COMPLETENESS_ATOL}")
    return ks


def layer_kraus(spec: CircuitSpec, layer_params, layer_index: int = 0) -> KrausSet:
    """Kraus operators of one parameterized layer (dense route, n <= 10)."""
    u = layer_unitary_dense(spec, layer_params, layer_index)
    return kraus_from_unitary(u, spec.n, spec.ancilla_wires)


def apply_kraus(rho_main: DensityMatrix, ks: KrausSet) -> DensityMatrix:
    """sum_x K_x rho K_x^dagger on the main register."""
    if rho_main.n != ks.n_main:
        raise SizeError(
            f"state has {rho_main.n} qubits, Kraus set acts on {ks.n_main}"
        )
    out = np.einsum("xij,jk,xlk->il", ks.operators, rho_main.entries, ks.operators.conj())
    return DensityMatrix(ks.n_main, out)


def compose_kraus(sets: list[KrausSet]) -> KrausSet:
    """Sequential composition; operator count multiplies across layers."""
    if not sets:
        raise SizeError("need at least one Kraus set")
    n_main = sets[0].n_main
    ops = sets[0].operators
    for ks in sets[1:]:
        if ks.n_main != n_main:
            raise SizeError("Kraus sets act on different main registers")
        ops = np.einsum("yij,xjk->yxik", ks.operators, ops).reshape(
            -1, 2**n_main, 2**n_main
        )
    return KrausSet(ops, sets[0].ancilla_wires, n_main)


def check_factorization(
    spec: CircuitSpec, layer_params, rho_full: DensityMatrix, layer_index: int = 0
) -> float:
    """Max-abs residual between the measure-reset channel on the full register
    and its factorized form |0..0><0..0|_anc (x) sum_x <x|U rho U^dagger|x>.

    The two sides take independent routes: the left runs the production
    channel after applying the layer unitary, the right contracts dense
    ancilla bras. Valid for any full-register rho.
    """
    if rho_full.n != spec.n:
        raise SizeError(f"state has {rho_full.n} qubits, spec has {spec.n}")
    u = layer_unitary_dense(spec, layer_params, layer_index)
    evolved = DensityMatrix(spec.n, u @ rho_full.entries @ u.conj().T)
    lhs = measure_reset_channel(evolved, spec.ancilla_wires).entries

    main_scatter = _scatter_indices(spec.n, spec.main_wires)
    anc_scatter = _scatter_indices(spec.n, spec.ancilla_wires)
    dm = 2**spec.n_main
    acc = np.zeros((dm, dm), dtype=np.complex128)
    for x in range(2**spec.n_ancilla):
        rows = anc_scatter[x] + main_scatter
        bra_u = u[rows, :]  # <x| U, rectangular on the full input space
        acc += bra_u @ rho_full.entries @ bra_u.conj().T
    rhs = np.zeros_like(lhs)
    rhs[np.ix_(main_scatter, main_scatter)] = acc
    return float(np.max(np.abs(lhs - rhs)))


@dataclass
class WitnessReport:
    """Branch structure of a Kraus set.

    collapse_flag marks the degenerate single-branch case whose operator is
    not unitary-up-to-scale (impossible for a completeness-valid set, so it
    only fires on corrupted inputs). A single unitary branch is reported as
    unitary_channel instead.
    """

    branch_count_effective: int
    max_pairwise_distinctness: float
    min_pairwise_distinctness: float
    collapse_flag: bool
    unitary_channel: bool


def _phase_aligned_distance(a: np.ndarray, b: np.ndarray) -> float:
    # Frobenius distance after normalizing both operators and choosing the
    # global phase that best aligns them.
    overlap = abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.sqrt(max(0.0, 2.0 - 2.0 * overlap)))


def _proportional_to_unitary(k: np.ndarray) -> bool:
    gram = k.conj().T @ k
    scale = np.real(np.trace(gram)) / gram.shape[0]
    if scale <= 0:
        return False
    return bool(np.max(np.abs(gram - scale * np.eye(gram.shape[0]))) < 1e-8 * max(1.0, scale))


def nonunitarity_witness(ks: KrausSet) -> WitnessReport:
    """Count effective branches and measure how distinct they are."""
    norms = np.linalg.norm(ks.operators.reshape(ks.operators.shape[0], -1), axis=1)
    effective = [ks.operators[i] for i in np.nonzero(norms > EFFECTIVE_BRANCH_NORM)[0]]
    count = len(effective)
    dists = [
        _phase_aligned_distance(effective[i], effective[j])
        for i in range(count)
        for j in range(i + 1, count)
    ]
    single_unitary = count == 1 and _proportional_to_unitary(effective[0])
    return WitnessReport(
        branch_count_effective=count,
        max_pairwise_distinctness=max(dists, default=0.0),
        min_pairwise_distinctness=min(dists, default=0.0),
        collapse_flag=count == 1 and not single_unitary,
        unitary_channel=single_unitary,
    )


# -- randomized verification suite --------------------------------------------


@dataclass
class CheckRecord:
    """One row of the verification report."""

    name: str
    value: float
    threshold: float
    comparison: str  # "max<" or "min>"
    passed: bool


def _record(name: str, value: float, threshold: float, comparison: str) -> CheckRecord:
    ok = value < threshold if comparison == "max<" else value > threshold
    return CheckRecord(name, float(value), threshold, comparison, bool(ok))


def _random_full_density(n: int, rng: np.random.Generator) -> DensityMatrix:
    dim = 2**n
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = a @ a.conj().T
    return DensityMatrix(n, rho / np.trace(rho))


def run_verification(
    spec: CircuitSpec,
    seed: int = 0,
    trials: int = 50,
    corrupt_kraus: bool = False,
) -> list[CheckRecord]:
    """Randomized channel-math checks on the given geometry.

    corrupt_kraus deliberately perturbs one extracted operator so the
    completeness check must fail; used to validate the reporting path.
    """
    if spec.n > KRAUS_MAX_QUBITS:
        raise BackendError(
            f"verification needs dense unitaries; capped at {KRAUS_MAX_QUBITS} qubits"
        )
    rng = np.random.default_rng(seed)
    n_angles = 7 * (spec.n - 1)
    single = CircuitSpec(spec.n, spec.ancilla_wires, 1)

    completeness = 0.0
    for t in range(trials):
        ks = layer_kraus(single, rng.uniform(-np.pi, np.pi, n_angles))
        if corrupt_kraus and t == 0:
            ks.operators[0] += 0.05
        completeness = max(completeness, ks.completeness_residual())

    factorization = 0.0
    for _ in range(trials):
        rho = _random_full_density(spec.n, rng)
        resid = check_factorization(single, rng.uniform(-np.pi, np.pi, n_angles), rho)
        factorization = max(factorization, resid)

    min_branches = np.inf
    min_purity_drop = np.inf
    for _ in range(trials):
        params = rng.uniform(-np.pi, np.pi, n_angles)
        ks = layer_kraus(single, params)
        report = nonunitarity_witness(ks)
        min_branches = min(min_branches, report.branch_count_effective)
        dim = 2**spec.n_main
        psi = rng.normal(size=dim) + 1j * rng.normal(size=dim)
        psi /= np.linalg.norm(psi)
        out = apply_kraus(DensityMatrix(spec.n_main, np.outer(psi, psi.conj())), ks)
        min_purity_drop = min(
            min_purity_drop, 1.0 - float(np.real(np.vdot(out.entries, out.entries)))
        )

    min_distance = np.inf
    for _ in range(trials):
        sets = [
            layer_kraus(single, rng.uniform(-np.pi, np.pi, n_angles))
            for _ in range(3)
        ]
        composed = compose_kraus(sets)
        dim = 2**spec.n_main
        rho0 = np.zeros((dim, dim), dtype=np.complex128)
        rho0[0, 0] = 1.0
        rho1 = np.zeros((dim, dim), dtype=np.complex128)
        rho1[-1, -1] = 1.0
        out0 = apply_kraus(DensityMatrix(spec.n_main, rho0), composed)
        out1 = apply_kraus(DensityMatrix(spec.n_main, rho1), composed)
        delta = out0.entries - out1.entries
        min_distance = min(
            min_distance, 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(delta))))
        )

    return [
        _record("kraus_completeness", completeness, 1e-9, "max<"),
        _record("channel_factorization", factorization, 1e-9, "max<"),
        _record("effective_branches", float(min_branches), 2.0 - 1e-9, "min>"),
        _record("purity_drop", float(min_purity_drop), 1e-6, "min>"),
        _record("trace_distance_3_layers", float(min_distance), 0.01, "min>"),
    ]


def format_report(records: list[CheckRecord]) -> str:
    lines = [f"{'check':<28} {'value':>14} {'cmp':>5} {'tolerance':>12} {'status':>8}"]
    for r in records:
        lines.append(
            f"{r.name:<28} {r.value:>14.6e} {r.comparison:>5} "
            f"{r.threshold:>12.3e} {'pass' if r.passed else 'FAIL':>8}"
        )
    return "\n".join(lines)
