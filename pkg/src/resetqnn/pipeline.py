"""End-to-end image classifier around the measure-and-reset circuit.

Training path: compressor -> projector -> per-sample angles -> circuit.
In surrogate mode the circuit is evaluated only to refresh the regressor,
which then stands in for the circuit during backprop (its weights are frozen
there; the classification loss never trains it). In direct mode the circuit
gradient comes from shift rules chained into the classical layers.
Evaluation always runs the true circuit on the exact backend.

All randomness derives from (config.seed, epoch) so a resumed run finishes
bit-identically to an uninterrupted one.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .ansatz import (
    EXACT_MAX_QUBITS,
    CircuitSpec,
    forward_exact_batch,
    forward_trajectory,
)
from .classical import AdamState, Compressor, OutputHead, ParamProjector, adamw_update, cosine_lr
from .data import Dataset, downscale, filter_classes, load_idx, split, synthetic
from .errors import CheckpointError, ConfigError, DivergenceError
from .gradcheck import measurement_jacobian_batch
from .surrogate import SampleBatch, SurrogateNet

CHECKPOINT_VERSION = 1

BACKENDS = ("surrogate-train", "exact", "trajectory")


@dataclass
class TrainConfig:
    """Every knob of a training run; unknown keys are rejected on load."""

    # optimizer
    eta0: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 3e-4
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    # circuit evaluation during training: surrogate-train fits the regressor
    # on exact targets, trajectory fits it on sampled targets, exact trains
    # with direct shift-rule gradients instead of the surrogate
    backend: str = "surrogate-train"
    shots: int = 4096
    workers: int = 1
    # circuit geometry
    n: int = 6
    ancillas: tuple = (1, 5)
    layers: int = 3
    pattern: tuple | None = None
    # model
    classes: int = 2
    image_size: int = 8
    compressor_channels: tuple = (8, 16)
    projector_hidden: int = 128
    surrogate_hidden: tuple = (256, 256)
    surrogate_fit_epochs: int = 300
    surrogate_warm_epochs: int = 80
    surrogate_fit_lr: float = 0.05
    sample_sigma: float = 0.1
    sample_jitter: int = 32
    # data
    dataset_kind: str = "synthetic-two-gaussians"
    dataset_count: int = 256
    test_fraction: float = 0.25
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    keep_classes: tuple | None = None
    max_train: int | None = None
    max_test: int | None = None
    augment_crop: bool = False
    augment_flip: bool = False

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend {self.backend!r} not in {BACKENDS}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.image_size % 4:
            raise ConfigError("image_size must be divisible by 4 (two pooling stages)")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.sample_jitter < 0:
            raise ConfigError("sample_jitter must be >= 0")
        if self.backend != "trajectory" and self.n > EXACT_MAX_QUBITS:
            raise ConfigError(
                f"{self.n} qubits exceeds the exact backend cap {EXACT_MAX_QUBITS}; "
                "use the trajectory backend"
            )
        self.ancillas = tuple(self.ancillas)
        self.compressor_channels = tuple(self.compressor_channels)
        self.surrogate_hidden = tuple(self.surrogate_hidden)
        if self.keep_classes is not None:
            self.keep_classes = tuple(self.keep_classes)
        self.spec()  # validates geometry

    def spec(self) -> CircuitSpec:
        pattern = self.pattern
        if pattern is not None:
            pattern = tuple(tuple(tuple(p) for p in layer) for layer in pattern)
        return CircuitSpec(self.n, self.ancillas, self.layers, pattern)

    @property
    def method(self) -> str:
        return "direct" if self.backend == "exact" else "surrogate"

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        if d["pattern"] is not None:
            d["pattern"] = [[list(p) for p in layer] for layer in d["pattern"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(payload)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


# -- losses ---------------------------------------------------------------------


def ce_loss(probs, label: int) -> float:
    """Cross entropy -log(probs[label]) with the probability floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    return float(-np.log(max(float(probs[label]), 1e-12)))


def ce_loss_batch(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


# -- state ----------------------------------------------------------------------


@dataclass
class PipelineState:
    compressor: Compressor
    projector: ParamProjector
    head: OutputHead
    net: SurrogateNet
    adam: AdamState
    step: int = 0
    epoch: int = 0  # epochs completed

    def all_params(self) -> dict:
        out = {}
        for prefix, params in (
            ("comp.", self.compressor.params),
            ("proj.", self.projector.params),
            ("head.", self.head.params),
        ):
            for key, value in params.items():
                out[prefix + key] = value
        return out


def init_state(config: TrainConfig) -> PipelineState:
    spec = config.spec()
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.seed).spawn(4)]
    comp = Compressor(1, config.compressor_channels, seed=seeds[0])
    feat = comp.feature_dim(config.image_size, config.image_size)
    proj = ParamProjector(feat, config.projector_hidden, spec.param_count, seed=seeds[1])
    head = OutputHead(spec.n_main, config.classes, seed=seeds[2])
    net = SurrogateNet.create(
        spec.param_count, spec.n_main, hidden=config.surrogate_hidden, seed=seeds[3]
    )
    return PipelineState(comp, proj, head, net, AdamState())


def parameter_counts(state: PipelineState, config: TrainConfig) -> dict:
    """Trainable sizes of each piece, recorded alongside run metrics."""
    return {
        "classical": int(sum(v.size for v in state.all_params().values())),
        "surrogate": int(
            sum(w.size for w in state.net.weights) + sum(b.size for b in state.net.biases)
        ),
        "circuit_angles": config.spec().param_count,
    }


# -- data -----------------------------------------------------------------------


def datasets_from_config(config: TrainConfig) -> tuple[Dataset, Dataset]:
    if config.dataset_kind.startswith("synthetic-"):
        kind = config.dataset_kind.removeprefix("synthetic-")
        ds = synthetic(kind, config.dataset_count, seed=config.seed, size=config.image_size)
        train, test = split(ds, config.test_fraction, seed=(config.seed * 7919 + 11) % 2**31)
    elif config.dataset_kind == "idx":
        if not config.train_images or not config.train_labels:
            raise ConfigError("idx dataset needs train_images and train_labels paths")
        train = load_idx(config.train_images, config.train_labels)
        if config.test_images and config.test_labels:
            test = load_idx(config.test_images, config.test_labels)
        else:
            train, test = split(train, config.test_fraction, seed=(config.seed * 7919 + 11) % 2**31)
    else:
        raise ConfigError(f"unknown dataset_kind {config.dataset_kind!r}")

    def prepare(ds: Dataset, cap: int | None, tag: int) -> Dataset:
        if config.keep_classes is not None:
            ds = filter_classes(ds, config.keep_classes)
        if ds.class_count > config.classes:
            raise ConfigError(
                f"dataset has {ds.class_count} classes, config expects {config.classes}"
            )
        images = ds.images
        if images.shape[1:] != (config.image_size, config.image_size):
            images = downscale(images, config.image_size, config.image_size)
        if cap is not None and cap < len(ds):
            order = np.random.default_rng((config.seed, 103, tag)).permutation(len(ds))[:cap]
            order.sort()  # order-stable subsample
            return Dataset(images[order], ds.labels[order], config.classes)
        return Dataset(images, ds.labels, config.classes)

    return prepare(train, config.max_train, 0), prepare(test, config.max_test, 1)


def _augment(x: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if not (config.augment_crop or config.augment_flip):
        return x
    b, _, h, w = x.shape
    out = x
    if config.augment_crop:
        padded = np.pad(out, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="edge")
        offs = rng.integers(0, 5, size=(b, 2))
        out = np.stack(
            [padded[i, :, oi : oi + h, oj : oj + w] for i, (oi, oj) in enumerate(offs)]
        )
    if config.augment_flip:
        flips = rng.random(b) < 0.5
        out = out.copy()
        out[flips] = out[flips, :, :, ::-1]
    return out


# -- forward paths ----------------------------------------------------------------


def _circuit_targets(config: TrainConfig, spec: CircuitSpec, thetas: np.ndarray, tag) -> np.ndarray:
    if config.backend == "trajectory":
        return np.stack(
            [
                forward_trajectory(spec, t, config.shots, seed=(config.seed, *tag, i))
                for i, t in enumerate(thetas)
            ]
        )
    return forward_exact_batch(spec, thetas)


def forward_pipeline(
    x: np.ndarray, state: PipelineState, config: TrainConfig, backend: str = "exact"
) -> np.ndarray:
    """Class distribution for a batch of images.

    backend selects how angles become measurements: the exact circuit, the
    trajectory sampler, or the current surrogate stand-in.
    """
    if x.ndim == 3:
        x = x[:, None]
    spec = config.spec()
    feats, _ = state.compressor.forward(x)
    theta, _ = state.projector.forward(feats)
    if backend == "exact":
        m = forward_exact_batch(spec, theta)
    elif backend == "trajectory":
        m = np.stack(
            [
                forward_trajectory(spec, t, config.shots, seed=(config.seed, 999, i))
                for i, t in enumerate(theta)
            ]
        )
    elif backend == "surrogate":
        m = state.net.predict(theta)
    else:
        raise ConfigError(f"unknown forward backend {backend!r}")
    probs, _ = state.head.forward(m)
    return probs


# -- training -------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float
    surrogate_mse: float | None = None


def _total_steps(config: TrainConfig, n_train: int) -> int:
    return config.epochs * math.ceil(n_train / config.batch_size)


def train_epoch(
    ds: Dataset, state: PipelineState, config: TrainConfig, epoch: int
) -> EpochMetrics:
    """One pass in surrogate mode: refresh the regressor on circuit targets,
    then backprop the classification loss through its frozen weights."""
    spec = config.spec()
    rng = np.random.default_rng((config.seed, epoch, 17))
    order = rng.permutation(len(ds))
    total_steps = _total_steps(config, len(ds))
    losses, hits, mses = [], 0, []
    lr_t = config.eta0
    for start in range(0, len(ds), config.batch_size):
        idx = order[start : start + config.batch_size]
        x = _augment(ds.images[idx][:, None], config, rng)
        y = ds.labels[idx]
        feats, ccache = state.compressor.forward(x)
        theta, pcache = state.projector.forward(feats)

        if config.sample_jitter:
            src = rng.integers(0, len(idx), size=config.sample_jitter)
            jitter = theta[src] + config.sample_sigma * rng.standard_normal(
                (config.sample_jitter, theta.shape[1])
            )
            cloud = np.vstack([theta, jitter])
        else:
            cloud = theta
        targets = _circuit_targets(config, spec, cloud, tag=(epoch, start))
        fit_epochs = (
            config.surrogate_fit_epochs if state.step == 0 else config.surrogate_warm_epochs
        )
        mse = state.net.fit(
            SampleBatch(cloud, targets), epochs=fit_epochs, lr=config.surrogate_fit_lr
        )
        m = state.net.predict(theta)
        probs, hcache = state.head.forward(m)
        loss = ce_loss_batch(probs, y)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at step {state.step}")
        dm, hgrads = state.head.backward_ce(probs, y, hcache)
        dtheta = state.net.vjp_batch(theta, dm)
        dfeats, pgrads = state.projector.backward(dtheta, pcache)
        cgrads = state.compressor.backward(dfeats, ccache)

        grads = {("head." + k): v for k, v in hgrads.items()}
        grads.update({("proj." + k): v for k, v in pgrads.items()})
        grads.update({("comp." + k): v for k, v in cgrads.items()})
        lr_t = cosine_lr(state.step, total_steps, config.eta0)
        adamw_update(
            state.all_params(),
            grads,
            state.adam,
            state.step + 1,
            lr_t,
            config.beta1,
            config.beta2,
            weight_decay=config.weight_decay,
        )
        state.step += 1
        losses.append(loss)
        hits += int(np.sum(np.argmax(probs, axis=1) == y))
        mses.append(mse)
    state.epoch = epoch + 1
    return EpochMetrics(
        epoch, "train", float(np.mean(losses)), hits / len(ds), lr_t, float(np.mean(mses))
    )


def train_epoch_direct(
    ds: Dataset, state: PipelineState, config: TrainConfig, epoch: int
) -> EpochMetrics:
    """One pass in direct mode: true circuit forward, shift-rule Jacobians
    chained into the classical layers. No surrogate anywhere."""
    if config.backend == "trajectory":
        raise ConfigError("direct gradients need the exact backend")
    spec = config.spec()
    rng = np.random.default_rng((config.seed, epoch, 17))
    order = rng.permutation(len(ds))
    total_steps = _total_steps(config, len(ds))
    losses, hits = [], 0
    lr_t = config.eta0
    for start in range(0, len(ds), config.batch_size):
        idx = order[start : start + config.batch_size]
        x = _augment(ds.images[idx][:, None], config, rng)
        y = ds.labels[idx]
        feats, ccache = state.compressor.forward(x)
        theta, pcache = state.projector.forward(feats)
        m = forward_exact_batch(spec, theta)
        probs, hcache = state.head.forward(m)
        loss = ce_loss_batch(probs, y)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at step {state.step}")
        dm, hgrads = state.head.backward_ce(probs, y, hcache)
        jac = measurement_jacobian_batch(spec, theta)
        dtheta = np.einsum("bdp,bd->bp", jac, dm)
        dfeats, pgrads = state.projector.backward(dtheta, pcache)
        cgrads = state.compressor.backward(dfeats, ccache)

        grads = {("head." + k): v for k, v in hgrads.items()}
        grads.update({("proj." + k): v for k, v in pgrads.items()})
        grads.update({("comp." + k): v for k, v in cgrads.items()})
        lr_t = cosine_lr(state.step, total_steps, config.eta0)
        adamw_update(
            state.all_params(),
            grads,
            state.adam,
            state.step + 1,
            lr_t,
            config.beta1,
            config.beta2,
            weight_decay=config.weight_decay,
        )
        state.step += 1
        losses.append(loss)
        hits += int(np.sum(np.argmax(probs, axis=1) == y))
    state.epoch = epoch + 1
    return EpochMetrics(epoch, "train", float(np.mean(losses)), hits / len(ds), lr_t, None)


# -- evaluation -------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray  # rows true class, columns prediction

    def to_record(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_loss": self.mean_loss,
            "confusion": self.confusion.tolist(),
        }


def evaluate(ds: Dataset, state: PipelineState, config: TrainConfig, batch_size: int = 256) -> EvalResult:
    """Exact-backend evaluation; the surrogate never appears here."""
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    spec = config.spec()
    confusion = np.zeros((config.classes, config.classes), dtype=np.int64)
    losses = []
    for start in range(0, len(ds), batch_size):
        x = ds.images[start : start + batch_size][:, None]
        y = ds.labels[start : start + batch_size]
        feats, _ = state.compressor.forward(x)
        theta, _ = state.projector.forward(feats)
        m = forward_exact_batch(spec, theta)
        probs, _ = state.head.forward(m)
        losses.append(ce_loss_batch(probs, y) * len(y))
        preds = np.argmax(probs, axis=1)
        np.add.at(confusion, (y, preds), 1)
    accuracy = float(np.trace(confusion) / len(ds))
    return EvalResult(accuracy, float(np.sum(losses) / len(ds)), confusion)


# -- checkpointing ----------------------------------------------------------------


def save_checkpoint(path, state: PipelineState, config: TrainConfig) -> None:
    arrays = {}
    for key, value in state.all_params().items():
        arrays["param/" + key] = value
    for key, value in state.net.state_arrays().items():
        arrays["net/" + key] = value
    for key, value in state.adam.m.items():
        arrays["adam_m/" + key] = value
    for key, value in state.adam.v.items():
        arrays["adam_v/" + key] = value
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config.config_hash(),
        "step": state.step,
        "epoch": state.epoch,
    }
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path, config: TrainConfig) -> PipelineState:
    try:
        payload = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    meta = json.loads(str(payload["meta"]))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} unsupported")
    if meta["config_hash"] != config.config_hash():
        raise CheckpointError(
            f"checkpoint hash {meta['config_hash']} does not match config "
            f"hash {config.config_hash()}"
        )
    state = init_state(config)
    for key, value in state.all_params().items():
        value[...] = payload["param/" + key]
    net_arrays = {
        key.removeprefix("net/"): payload[key] for key in payload.files if key.startswith("net/")
    }
    state.net = SurrogateNet.from_state_arrays(net_arrays)
    for key in payload.files:
        if key.startswith("adam_m/"):
            state.adam.m[key.removeprefix("adam_m/")] = payload[key].copy()
        elif key.startswith("adam_v/"):
            state.adam.v[key.removeprefix("adam_v/")] = payload[key].copy()
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    return state


# -- run orchestration --------------------------------------------------------------


def write_metrics_csv(records: list[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "accuracy", "lr", "surrogate_mse"])
        for r in records:
            writer.writerow(
                [
                    r.epoch,
                    r.split,
                    repr(r.loss),
                    repr(r.accuracy),
                    repr(r.lr),
                    "" if r.surrogate_mse is None else repr(r.surrogate_mse),
                ]
            )


def read_metrics_csv(path) -> list[EpochMetrics]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                EpochMetrics(
                    epoch=int(row["epoch"]),
                    split=row["split"],
                    loss=float(row["loss"]),
                    accuracy=float(row["accuracy"]),
                    lr=float(row["lr"]),
                    surrogate_mse=float(row["surrogate_mse"]) if row["surrogate_mse"] else None,
                )
            )
    return records


def run_training(
    config: TrainConfig, out_dir, resume: bool = False
) -> tuple[PipelineState, list[EpochMetrics]]:
    """Train to config.epochs, checkpointing and rewriting metrics per epoch.

    On resume the last epoch-end checkpoint and its metrics rows are reloaded,
    so the continuation reproduces an uninterrupted run exactly. A divergence
    leaves the last good checkpoint on disk and re-raises.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "ckpt_last.npz"
    metrics_path = out_dir / "metrics.csv"
    train_ds, test_ds = datasets_from_config(config)

    records: list[EpochMetrics] = []
    if resume and ckpt_path.exists():
        state = load_checkpoint(ckpt_path, config)
        if metrics_path.exists():
            records = [r for r in read_metrics_csv(metrics_path) if r.epoch < state.epoch]
    else:
        state = init_state(config)

    step_fn = train_epoch_direct if config.method == "direct" else train_epoch
    for epoch in range(state.epoch, config.epochs):
        train_metrics = step_fn(train_ds, state, config, epoch)
        test_eval = evaluate(test_ds, state, config)
        records.append(train_metrics)
        records.append(
            EpochMetrics(epoch, "test", test_eval.mean_loss, test_eval.accuracy, train_metrics.lr)
        )
        write_metrics_csv(records, metrics_path)
        save_checkpoint(ckpt_path, state, config)
    return state, records
