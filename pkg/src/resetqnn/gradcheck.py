"""Ground-truth circuit gradients: parameter-shift rules and finite differences.

Every angle in a module feeds exactly one gate. The six single-qubit rotation
angles obey the two-term rule with shifts of pi/2. The controlled-Rx angle
has generator spectrum {0, +-1/2}, so it needs the four-term rule with shifts
pi/2 and 3pi/2. Shift rules stay exact through the measure-and-reset layers
because everything downstream of a gate is linear in the density matrix.

Gradients are only defined on the exact backend; shot noise would swamp them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ansatz import CircuitSpec, check_theta, forward_exact_batch
from .errors import SizeError

DEFAULT_FD_STEP = 1e-4  # balances truncation against double-precision round-off

_C1 = (np.sqrt(2.0) + 1.0) / (4.0 * np.sqrt(2.0))
_C2 = (np.sqrt(2.0) - 1.0) / (4.0 * np.sqrt(2.0))

# (shift, coefficient) pairs; the derivative is sum_i c_i * f(theta + s_i e_j).
TWO_TERM_RULE = ((np.pi / 2, 0.5), (-np.pi / 2, -0.5))
FOUR_TERM_RULE = (
    (np.pi / 2, _C1),
    (-np.pi / 2, -_C1),
    (3 * np.pi / 2, -_C2),
    (-3 * np.pi / 2, _C2),
)


def is_controlled_angle(index: int) -> bool:
    """True for the seventh angle of each module (the controlled rotation)."""
    return index % 7 == 6


def shift_rule(index: int):
    return FOUR_TERM_RULE if is_controlled_angle(index) else TWO_TERM_RULE


def finite_diff(
    f: Callable[[np.ndarray], float], theta, index: int, h: float = DEFAULT_FD_STEP
) -> float:
    """Central difference (f(theta + h e_i) - f(theta - h e_i)) / 2h."""
    if h <= 0:
        raise SizeError(f"step must be positive, got {h}")
    theta = np.asarray(theta, dtype=np.float64)
    up = theta.copy()
    up[index] += h
    down = theta.copy()
    down[index] -= h
    return (f(up) - f(down)) / (2.0 * h)


def _observable_weights(spec: CircuitSpec, obs) -> np.ndarray:
    """Normalize an observable selector to weights over the measurement vector.

    An int selects one main-qubit <Z>; an array gives an arbitrary linear
    combination (what the chain rule needs).
    """
    if isinstance(obs, (int, np.integer)):
        if not 0 <= obs < spec.n_main:
            raise SizeError(f"observable index {obs} outside [0, {spec.n_main})")
        w = np.zeros(spec.n_main)
        w[obs] = 1.0
        return w
    w = np.asarray(obs, dtype=np.float64).reshape(-1)
    if w.shape != (spec.n_main,):
        raise SizeError(f"weights have length {w.size}, expected {spec.n_main}")
    return w


def parameter_shift(spec: CircuitSpec, theta, index: int, obs=0) -> float:
    """Exact derivative of the selected expectation at one parameter index."""
    theta = check_theta(spec, theta)
    if not 0 <= index < spec.param_count:
        raise SizeError(f"index {index} outside [0, {spec.param_count})")
    w = _observable_weights(spec, obs)
    rule = shift_rule(index)
    shifted = np.repeat(theta[None, :], len(rule), axis=0)
    coeffs = np.empty(len(rule))
    for i, (s, c) in enumerate(rule):
        shifted[i, index] += s
        coeffs[i] = c
    vals = forward_exact_batch(spec, shifted) @ w
    return float(coeffs @ vals)


def measurement_jacobian(spec: CircuitSpec, theta) -> np.ndarray:
    """d m / d theta with shape (n_main, p), all indices shifted in one batch."""
    theta = check_theta(spec, theta)
    p = spec.param_count
    rows: list[np.ndarray] = []
    segments: list[tuple[int, np.ndarray]] = []
    for j in range(p):
        rule = shift_rule(j)
        coeffs = np.empty(len(rule))
        for i, (s, c) in enumerate(rule):
            t = theta.copy()
            t[j] += s
            rows.append(t)
            coeffs[i] = c
        segments.append((j, coeffs))
    values = forward_exact_batch(spec, np.stack(rows))
    jac = np.empty((spec.n_main, p))
    pos = 0
    for j, coeffs in segments:
        jac[:, j] = coeffs @ values[pos : pos + len(coeffs)]
        pos += len(coeffs)
    return jac


def measurement_jacobian_batch(spec: CircuitSpec, thetas) -> np.ndarray:
    """Per-sample Jacobians, (B, n_main, p), sharing one batched evaluation."""
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.ndim != 2 or thetas.shape[1] != spec.param_count:
        raise SizeError(f"thetas must be (B, {spec.param_count}), got {thetas.shape}")
    b, p = thetas.shape
    rules = [shift_rule(j) for j in range(p)]
    evals_per_theta = sum(len(r) for r in rules)
    rows = np.empty((b * evals_per_theta, p))
    pos = 0
    for i in range(b):
        for j in range(p):
            for s, _ in rules[j]:
                rows[pos] = thetas[i]
                rows[pos, j] += s
                pos += 1
    values = forward_exact_batch(spec, rows)
    jac = np.empty((b, spec.n_main, p))
    pos = 0
    for i in range(b):
        for j in range(p):
            coeffs = np.array([c for _, c in rules[j]])
            jac[i, :, j] = coeffs @ values[pos : pos + len(coeffs)]
            pos += len(coeffs)
    return jac


def full_gradient(
    spec: CircuitSpec, theta, dloss_dm: Callable[[np.ndarray], np.ndarray]
) -> np.ndarray:
    """Chain a measurement-space loss gradient through the shift-rule Jacobian.

    dloss_dm maps the measurement vector at theta to dL/dm; the result is
    dL/dtheta of length p.
    """
    theta = check_theta(spec, theta)
    m0 = forward_exact_batch(spec, theta[None, :])[0]
    w = np.asarray(dloss_dm(m0), dtype=np.float64).reshape(-1)
    if w.shape != (spec.n_main,):
        raise SizeError(f"dloss_dm returned length {w.size}, expected {spec.n_main}")
    return measurement_jacobian(spec, theta).T @ w


@dataclass
class GradReport:
    """One parameter's shift-rule vs finite-difference comparison."""

    index: int
    shift_value: float
    fd_value: float

    @property
    def abs_err(self) -> float:
        return abs(self.shift_value - self.fd_value)


def compare_all(
    spec: CircuitSpec, theta, obs=0, h: float = DEFAULT_FD_STEP
) -> list[GradReport]:
    """Shift rule against central differences at every parameter index."""
    theta = check_theta(spec, theta)
    w = _observable_weights(spec, obs)

    def f(t):
        return float(forward_exact_batch(spec, t[None, :])[0] @ w)

    reports = []
    for j in range(spec.param_count):
        reports.append(
            GradReport(j, parameter_shift(spec, theta, j, obs), finite_diff(f, theta, j, h))
        )
    return reports


def write_grad_csv(reports: Sequence[GradReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "shift", "fd", "abs_err"])
        for r in reports:
            writer.writerow([r.index, repr(r.shift_value), repr(r.fd_value), repr(r.abs_err)])


def gradient_variance_probe(
    n: int,
    ancilla_wires,
    layer_counts: Sequence[int],
    trials: int,
    seed: int = 0,
    index: int = 1,
    obs=0,
) -> dict[int, float]:
    """Variance of one early parameter's gradient over random angle draws.

    Deep circuits concentrate the expectation, so the variance shrinks as the
    layer count grows; this reproduces the vanishing-gradient regime that
    motivates surrogate training.
    """
    out = {}
    for layers in layer_counts:
        spec = CircuitSpec(n, ancilla_wires, layers)
        rng = np.random.default_rng(seed)
        grads = [
            parameter_shift(
                spec, rng.uniform(-np.pi, np.pi, spec.param_count), index, obs
            )
            for _ in range(trials)
        ]
        out[layers] = float(np.var(grads))
    return out
