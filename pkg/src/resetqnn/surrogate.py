"""Gradient-free circuit training through a local neural regressor.

The optimizer never differentiates the circuit. Each step it samples angle
vectors around the current point, evaluates the true forward map there, fits
a small tanh network to those (theta, measurement) pairs, and descends along
the network's classical gradient. A trust region keeps steps inside the
neighborhood where the fit is trustworthy, and a step is only kept when the
true loss actually decreased.

Fitting is full-batch gradient descent with momentum: deterministic given the
starting weights and data, which keeps every run bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, SizeError


def sample_params(theta_t, sigma: float, count: int, seed) -> np.ndarray:
    """Gaussian cloud around theta_t: (count + 1, p) with the center first.

    seed is anything np.random.default_rng accepts (int or tuple of ints).
    """
    theta_t = np.asarray(theta_t, dtype=np.float64).reshape(-1)
    if sigma < 0:
        raise SizeError(f"sigma must be >= 0, got {sigma}")
    if count < 1:
        raise SizeError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    offsets = sigma * rng.standard_normal((count, theta_t.size))
    return np.vstack([theta_t[None, :], theta_t[None, :] + offsets])


@dataclass
class SampleBatch:
    """Angle vectors paired with their true measurement vectors."""

    thetas: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.thetas.ndim != 2 or self.targets.ndim != 2:
            raise SizeError("thetas and targets must be 2-D arrays")
        if self.thetas.shape[0] != self.targets.shape[0]:
            raise SizeError(
                f"{self.thetas.shape[0]} thetas vs {self.targets.shape[0]} targets"
            )
        if self.thetas.shape[0] == 0:
            raise SizeError("batch is empty")

    def __len__(self):
        return self.thetas.shape[0]


class SurrogateNet:
    """Feed-forward regressor theta -> measurement vector.

    tanh hidden layers, linear output. Inputs are shifted by a stored center
    so the cloud of training angles sits near the origin; recentering adjusts
    the first bias to leave the represented function unchanged.
    """

    def __init__(self, weights, biases, input_shift=None):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        p = self.weights[0].shape[0]
        self.input_shift = (
            np.zeros(p) if input_shift is None else np.asarray(input_shift, dtype=np.float64)
        )
        self._fitted = False

    @classmethod
    def create(
        cls, input_dim: int, output_dim: int, hidden: Sequence[int] = (256, 256), seed: int = 0
    ) -> "SurrogateNet":
        sizes = [input_dim, *hidden, output_dim]
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            lim = 1.0 / np.sqrt(a)
            weights.append(rng.uniform(-lim, lim, (a, b)))
            biases.append(np.zeros(b))
        return cls(weights, biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "SurrogateNet":
        net = SurrogateNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.input_shift.copy(),
        )
        net._fitted = self._fitted
        return net

    def recenter(self, new_shift) -> None:
        """Move the input center without changing the represented function."""
        new_shift = np.asarray(new_shift, dtype=np.float64)
        self.biases[0] = self.biases[0] + (new_shift - self.input_shift) @ self.weights[0]
        self.input_shift = new_shift.copy()

    def _activations(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [x - self.input_shift]
        h = acts[0]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return acts

    def predict(self, thetas) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=np.float64)
        single = thetas.ndim == 1
        out = self._activations(np.atleast_2d(thetas))[-1]
        return out[0] if single else out

    def fit(
        self,
        batch: SampleBatch,
        epochs: int = 200,
        lr: float = 0.05,
        momentum: float = 0.9,
        recenter: bool = True,
    ) -> float:
        """Full-batch momentum descent on the mean squared error.

        Returns the final MSE. Raises DivergenceError when the loss goes
        non-finite, which usually means lr is too high.
        """
        x, y = batch.thetas, batch.targets
        if x.shape[1] != self.input_dim or y.shape[1] != self.output_dim:
            raise SizeError(
                f"batch shapes {x.shape}/{y.shape} do not match net "
                f"[{self.input_dim} -> {self.output_dim}]"
            )
        if recenter:
            self.recenter(x.mean(axis=0))
        vel_w = [np.zeros_like(w) for w in self.weights]
        vel_b = [np.zeros_like(b) for b in self.biases]
        denom = y.size
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(epochs):
                acts = self._activations(x)
                delta = 2.0 * (acts[-1] - y) / denom
                if not np.all(np.isfinite(delta)):
                    raise DivergenceError(
                        "surrogate fit diverged (non-finite loss); lower the fit lr"
                    )
                for i in reversed(range(len(self.weights))):
                    grad_w = acts[i].T @ delta
                    grad_b = delta.sum(axis=0)
                    if i > 0:
                        delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
                    vel_w[i] = momentum * vel_w[i] + grad_w
                    vel_b[i] = momentum * vel_b[i] + grad_b
                    self.weights[i] -= lr * vel_w[i]
                    self.biases[i] -= lr * vel_b[i]
        self._fitted = True
        mse = float(np.mean((self._activations(x)[-1] - y) ** 2))
        if not np.isfinite(mse):
            raise DivergenceError(
                "surrogate fit diverged (non-finite loss); lower the fit lr"
            )
        return mse

    def vjp(self, theta, dloss_dm) -> np.ndarray:
        """Gradient of dloss_dm . predict(theta) with respect to theta."""
        acts = self._activations(np.atleast_2d(np.asarray(theta, dtype=np.float64)))
        delta = np.atleast_2d(np.asarray(dloss_dm, dtype=np.float64))
        for i in reversed(range(len(self.weights))):
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * (1.0 - acts[i] ** 2)
        return delta[0]

    def vjp_batch(self, thetas: np.ndarray, dloss_dm: np.ndarray) -> np.ndarray:
        """Row-wise vjp for (B, p) inputs with (B, d) cotangents."""
        acts = self._activations(np.asarray(thetas, dtype=np.float64))
        delta = np.asarray(dloss_dm, dtype=np.float64)
        for i in reversed(range(len(self.weights))):
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * (1.0 - acts[i] ** 2)
        return delta

    def jacobian(self, theta) -> np.ndarray:
        """d predict / d theta at one point, shape (d, p)."""
        eye = np.eye(self.output_dim)
        return np.stack([self.vjp(theta, eye[i]) for i in range(self.output_dim)])

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"input_shift": self.input_shift}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    @classmethod
    def from_state_arrays(cls, arrays: dict) -> "SurrogateNet":
        weights, biases = [], []
        i = 0
        while f"w{i}" in arrays:
            weights.append(arrays[f"w{i}"])
            biases.append(arrays[f"b{i}"])
            i += 1
        net = cls(weights, biases, arrays["input_shift"])
        net._fitted = True
        return net


# -- losses over measurement vectors -------------------------------------------


@dataclass
class TargetLoss:
    """L(m) = mean((m - target)^2); smooth, bounded below by 0."""

    target: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)

    def value(self, m) -> float:
        return float(np.mean((np.asarray(m) - self.target) ** 2))

    def grad(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=np.float64)
        return 2.0 * (m - self.target) / m.size


@dataclass
class LinearLoss:
    """L(m) = w . m; handy for probing single directions."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)

    def value(self, m) -> float:
        return float(np.asarray(m) @ self.weights)

    def grad(self, m) -> np.ndarray:
        return self.weights.copy()


def surrogate_grad(net: SurrogateNet, theta, objective) -> np.ndarray:
    """Classical gradient of objective(net(theta)) with respect to theta."""
    m = net.predict(np.asarray(theta, dtype=np.float64))
    return net.vjp(theta, objective.grad(m))


# -- descent ---------------------------------------------------------------------


@dataclass
class TrustRegion:
    """Step-norm cap with multiplicative adaptation."""

    radius: float = 0.3
    shrink: float = 0.5
    grow: float = 1.2
    max_radius: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise SizeError(f"radius must be positive, got {self.radius}")


@dataclass
class StepResult:
    theta_next: np.ndarray
    accepted: bool
    loss_before: float
    loss_after: float
    eta_effective: float
    step_norm: float
    surrogate_grad_norm: float


def descent_step(
    theta_t,
    net: SurrogateNet,
    eta: float,
    trust: TrustRegion,
    objective,
    measure_fn: Callable[[np.ndarray], np.ndarray],
    loss_before: float | None = None,
) -> StepResult:
    """One surrogate-gradient step, kept only if the true loss decreases.

    The proposal is -eta * grad clipped to the trust radius. The true loss is
    evaluated through measure_fn (the quantum forward map); on rejection theta
    is unchanged and the radius shrinks.
    """
    if eta <= 0:
        raise SizeError(f"eta must be positive, got {eta}")
    theta_t = np.asarray(theta_t, dtype=np.float64).reshape(-1)
    if loss_before is None:
        loss_before = objective.value(measure_fn(theta_t))
    grad = surrogate_grad(net, theta_t, objective)
    gnorm = float(np.linalg.norm(grad))
    if gnorm == 0.0:
        return StepResult(theta_t, True, loss_before, loss_before, eta, 0.0, 0.0)
    step = -eta * grad
    snorm = float(np.linalg.norm(step))
    eta_eff = eta
    if snorm > trust.radius:
        step *= trust.radius / snorm
        eta_eff = trust.radius / gnorm
        snorm = trust.radius
    candidate = theta_t + step
    loss_after = objective.value(measure_fn(candidate))
    if loss_after < loss_before:
        trust.radius = min(trust.radius * trust.grow, trust.max_radius)
        return StepResult(candidate, True, loss_before, loss_after, eta_eff, snorm, gnorm)
    trust.radius *= trust.shrink
    return StepResult(theta_t, False, loss_before, loss_after, eta_eff, snorm, gnorm)


def schedule(t: int, eta0: float) -> float:
    """Diminishing step sizes eta0 / (1 + t); the sum diverges while the sum
    of squares stays finite."""
    if t < 0:
        raise SizeError(f"step index must be >= 0, got {t}")
    return eta0 / (1.0 + t)


# -- stationarity monitoring ------------------------------------------------------


@dataclass
class MonitorReport:
    probe_norms: list[tuple[int, float]]
    initial_norm: float
    final_norm: float
    loss_non_decreasing: bool


class StationarityMonitor:
    """Tracks true-gradient probes and the loss trace during a run.

    probe_fn maps theta to a gradient norm computed outside the surrogate
    (a shift-rule probe on a parameter subset, or finite differences for
    synthetic objectives). Probes run every `every` steps; they are pure
    diagnostics and never feed back into the optimization.
    """

    def __init__(self, probe_fn: Callable[[np.ndarray], float], every: int = 10):
        if every < 1:
            raise SizeError(f"probe period must be >= 1, got {every}")
        self.probe_fn = probe_fn
        self.every = every
        self.probe_norms: list[tuple[int, float]] = []
        self.losses: list[float] = []

    def observe(self, step: int, theta: np.ndarray, loss: float) -> float | None:
        self.losses.append(float(loss))
        if step % self.every == 0:
            norm = float(self.probe_fn(theta))
            self.probe_norms.append((step, norm))
            return norm
        return None

    def report(self) -> MonitorReport:
        if not self.probe_norms:
            raise SizeError("no probes recorded")
        half = len(self.losses) // 2
        non_decreasing = bool(
            self.losses and half > 0 and min(self.losses[half:]) >= min(self.losses[:half])
        )
        return MonitorReport(
            probe_norms=list(self.probe_norms),
            initial_norm=self.probe_norms[0][1],
            final_norm=self.probe_norms[-1][1],
            loss_non_decreasing=non_decreasing,
        )


# -- full descent loop -------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    eta: float
    surrogate_mse: float
    true_loss: float
    accepted: bool
    trust_radius: float
    grad_probe_norm: float | None = None


@dataclass
class DescentResult:
    theta: np.ndarray
    records: list[StepRecord]
    net: SurrogateNet
    trust: TrustRegion


def run_descent(
    measure_batch_fn: Callable[[np.ndarray], np.ndarray],
    objective,
    theta0,
    steps: int,
    eta0: float = 0.5,
    sigma: float = 0.1,
    sample_count: int = 32,
    hidden: Sequence[int] = (256, 256),
    fit_epochs: int = 300,
    warm_fit_epochs: int = 80,
    fit_lr: float = 0.05,
    trust: TrustRegion | None = None,
    seed: int = 0,
    use_schedule: bool = True,
    monitor: StationarityMonitor | None = None,
    net: SurrogateNet | None = None,
) -> DescentResult:
    """Sample, refit, and step for a fixed number of iterations.

    measure_batch_fn maps (K, p) angle rows to (K, d) measurement rows; a
    fresh sample cloud is drawn every step and the net is warm-started
    between refreshes.
    """
    theta = np.asarray(theta0, dtype=np.float64).reshape(-1).copy()
    trust = trust if trust is not None else TrustRegion()
    probe0 = measure_batch_fn(theta[None, :])
    d = probe0.shape[1]
    if net is None:
        net = SurrogateNet.create(theta.size, d, hidden=hidden, seed=seed)
    loss_current = objective.value(probe0[0])

    def measure_one(t):
        return measure_batch_fn(np.asarray(t, dtype=np.float64)[None, :])[0]

    records: list[StepRecord] = []
    for t in range(steps):
        cloud = sample_params(theta, sigma, sample_count, seed=(seed, t))
        targets = measure_batch_fn(cloud)
        epochs = fit_epochs if t == 0 else warm_fit_epochs
        mse = net.fit(SampleBatch(cloud, targets), epochs=epochs, lr=fit_lr)
        eta_t = schedule(t, eta0) if use_schedule else eta0
        result = descent_step(
            theta, net, eta_t, trust, objective, measure_one, loss_before=loss_current
        )
        theta = result.theta_next
        if result.accepted:
            loss_current = result.loss_after
        probe = monitor.observe(t, theta, loss_current) if monitor is not None else None
        records.append(
            StepRecord(
                step=t,
                eta=eta_t,
                surrogate_mse=mse,
                true_loss=loss_current,
                accepted=result.accepted,
                trust_radius=trust.radius,
                grad_probe_norm=probe,
            )
        )
    return DescentResult(theta=theta, records=records, net=net, trust=trust)


def write_descent_csv(records: Sequence[StepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "eta", "surrogate_mse", "true_loss", "accepted", "trust_radius", "grad_probe_norm"]
        )
        for r in records:
            writer.writerow(
                [
                    r.step,
                    repr(r.eta),
                    repr(r.surrogate_mse),
                    repr(r.true_loss),
                    int(r.accepted),
                    repr(r.trust_radius),
                    "" if r.grad_probe_norm is None else repr(r.grad_probe_norm),
                ]
            )
