"""Acceptance suite: one test per release criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -s -v` to see the per-criterion
lines as they complete. Every tolerance is pinned here; nothing is deferred
to calibration elsewhere.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from resetqnn.ansatz import (
    DESK_SPEC,
    CircuitSpec,
    forward_exact,
    forward_exact_batch,
    forward_trajectory,
)
from resetqnn.channels import apply_kraus, check_factorization, compose_kraus, layer_kraus, nonunitarity_witness
from resetqnn.cli import main as cli_main
from resetqnn.gradcheck import compare_all, measurement_jacobian, parameter_shift
from resetqnn.pipeline import TrainConfig, run_training
from resetqnn.qstate import DensityMatrix
from resetqnn.surrogate import (
    LinearLoss,
    SampleBatch,
    StationarityMonitor,
    SurrogateNet,
    TargetLoss,
    TrustRegion,
    descent_step,
    run_descent,
    sample_params,
    surrogate_grad,
)

FIXTURES = Path(__file__).parent / "fixtures"


def report(num: int, name: str, passed: bool, detail: str, t0: float) -> None:
    status = "PASS" if passed else "FAIL"
    print(f"[criterion {num:02d}] {status} {name}: {detail} ({time.time() - t0:.1f}s)")


def random_pure_main(n_main: int, rng) -> DensityMatrix:
    dim = 2**n_main
    psi = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    psi /= np.linalg.norm(psi)
    return DensityMatrix(n_main, np.outer(psi, psi.conj()))


def test_criterion_01_kraus_completeness():
    t0 = time.time()
    geometries = [(2, (1,)), (4, (1, 3)), (6, (1, 5))]
    rng = np.random.default_rng(101)
    worst = 0.0
    trials = 0
    while trials < 100:
        n, anc = geometries[trials % 3]
        spec = CircuitSpec(n, anc, 1)
        ks = layer_kraus(spec, rng.uniform(-np.pi, np.pi, 7 * (n - 1)))
        worst = max(worst, ks.completeness_residual())
        trials += 1
    passed = worst < 1e-9
    report(1, "kraus completeness", passed, f"max residual {worst:.2e} over 100 layers", t0)
    assert passed


def test_criterion_02_factorization():
    t0 = time.time()
    spec = CircuitSpec(4, (1, 3), 1)
    rng = np.random.default_rng(202)
    worst = 0.0
    for i in range(50):
        if i % 2:
            dim = 16
            a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
            rho = DensityMatrix(4, (a @ a.conj().T) / np.trace(a @ a.conj().T))
        else:
            rho = random_pure_main(4, rng)
        worst = max(worst, check_factorization(spec, rng.uniform(-np.pi, np.pi, 21), rho))
    passed = worst < 1e-9
    report(2, "channel factorization", passed, f"max residual {worst:.2e} over 50 trials", t0)
    assert passed


def test_criterion_03_nonunitarity_witnesses():
    t0 = time.time()
    spec = CircuitSpec(4, (1, 3), 1)
    rng = np.random.default_rng(303)
    min_branches = np.inf
    min_drop = np.inf
    for _ in range(20):
        ks = layer_kraus(spec, rng.uniform(-np.pi, np.pi, 21))
        min_branches = min(min_branches, nonunitarity_witness(ks).branch_count_effective)
        out = apply_kraus(random_pure_main(2, rng), ks)
        min_drop = min(min_drop, 1.0 - float(np.real(np.vdot(out.entries, out.entries))))
    min_dist = np.inf
    for _ in range(10):
        sets = [layer_kraus(spec, rng.uniform(-np.pi, np.pi, 21)) for _ in range(3)]
        composed = compose_kraus(sets)
        zero = DensityMatrix(2, np.diag([1.0, 0, 0, 0]))
        one = DensityMatrix(2, np.diag([0, 0, 0, 1.0]))
        delta = apply_kraus(zero, composed).entries - apply_kraus(one, composed).entries
        min_dist = min(min_dist, 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(delta)))))
    passed = min_branches >= 2 and min_drop > 1e-6 and min_dist > 0.01
    report(
        3,
        "non-collapse / non-unitarity",
        passed,
        f"branches >= {int(min_branches)}, purity drop >= {min_drop:.2e}, "
        f"3-layer trace distance >= {min_dist:.3f}",
        t0,
    )
    assert passed


def test_criterion_04_gradient_oracle_agreement():
    t0 = time.time()
    rng = np.random.default_rng(404)
    theta = rng.uniform(-np.pi, np.pi, DESK_SPEC.param_count)
    weights = rng.normal(size=DESK_SPEC.n_main)
    reports = compare_all(DESK_SPEC, theta, obs=weights, h=1e-4)
    worst = max(r.abs_err for r in reports)
    passed = len(reports) == 105 and worst < 1e-6
    report(4, "shift rule vs finite differences", passed, f"105 params, max err {worst:.2e}", t0)
    assert passed


def test_criterion_05_trajectory_convergence():
    t0 = time.time()
    rng = np.random.default_rng(505)
    theta = rng.uniform(-np.pi, np.pi, DESK_SPEC.param_count)
    exact = forward_exact(DESK_SPEC, theta)
    rms = {}
    within = True
    for shots in (1_000, 10_000, 100_000):
        mean, sem = forward_trajectory(DESK_SPEC, theta, shots, seed=(505, shots), return_stats=True)
        err = np.abs(mean - exact)
        within = within and bool(np.all(err <= 3.0 * np.maximum(sem, 1e-12)))
        rms[shots] = float(np.sqrt(np.mean(err**2)))
    monotone = rms[1_000] > rms[10_000] > rms[100_000]
    passed = within and monotone
    report(
        5,
        "trajectory convergence",
        passed,
        f"rms {rms[1_000]:.2e} -> {rms[10_000]:.2e} -> {rms[100_000]:.2e}, all within 3 sigma: {within}",
        t0,
    )
    assert passed


def test_criterion_06_surrogate_local_fidelity():
    # Fit budget fixed at 32 + center samples with sigma = 0.1. The MSE bound
    # holds easily. The gradient-cosine bound cannot: any regressor fit on 33
    # points can only recover the projection of the 105-dim gradient onto the
    # 32-dim sampled subspace, capping the cosine near sqrt(32/105) ~ 0.55
    # regardless of fit quality. The sweep printed below shows the same
    # estimator clearing 0.9 once the budget covers the dimension.
    t0 = time.time()
    rng = np.random.default_rng(606)
    theta = rng.uniform(-np.pi, np.pi, DESK_SPEC.param_count)
    w = rng.normal(size=DESK_SPEC.n_main)
    objective = LinearLoss(w)
    g_true = measurement_jacobian(DESK_SPEC, theta).T @ w
    grad_norm = float(np.linalg.norm(g_true))
    assert grad_norm > 1e-2  # conditioning required by the criterion

    def fit_and_cosine(count: int):
        cloud = sample_params(theta, 0.1, count, seed=(606, count))
        targets = forward_exact_batch(DESK_SPEC, cloud)
        net = SurrogateNet.create(
            DESK_SPEC.param_count, DESK_SPEC.n_main, hidden=(256, 256), seed=607
        )
        mse = net.fit(SampleBatch(cloud, targets), epochs=1500, lr=0.05)
        g_hat = surrogate_grad(net, theta, objective)
        cos = float(g_hat @ g_true / (np.linalg.norm(g_hat) * grad_norm))
        return mse, cos

    mse33, cos33 = fit_and_cosine(32)
    sweep = {33: cos33}
    for count in (128, 256):
        sweep[count + 1] = fit_and_cosine(count)[1]
    passed = mse33 < 1e-3 and cos33 > 0.9
    report(
        6,
        "surrogate local fidelity",
        passed,
        f"mse {mse33:.2e} (<1e-3: {mse33 < 1e-3}), cosine {cos33:.3f} (>0.9: {cos33 > 0.9}); "
        f"cosine vs budget {{33: {sweep[33]:.3f}, 129: {sweep[129]:.3f}, 257: {sweep[257]:.3f}}}, "
        f"||grad|| {grad_norm:.2f}",
        t0,
    )
    assert mse33 < 1e-3
    assert cos33 > 0.9, (
        f"cosine {cos33:.3f} at the mandated 33-sample budget; an estimator "
        f"restricted to 32 sampled directions in 105 dimensions is capped near "
        f"sqrt(32/105) ~ 0.55. The same fit reaches {sweep[257]:.3f} at 257 "
        f"samples, so the implementation is sound and the budget is the binding "
        f"constraint."
    )


def test_criterion_07_surrogate_descent():
    t0 = time.time()
    spec = CircuitSpec(4, (1, 3), 2)
    rng = np.random.default_rng(707)
    target = forward_exact_batch(spec, rng.uniform(-np.pi, np.pi, (1, spec.param_count)))[0]
    objective = TargetLoss(target)
    theta = rng.uniform(-np.pi, np.pi, spec.param_count)

    def measure_one(t):
        return forward_exact_batch(spec, t[None, :])[0]

    def true_grad(th):
        return measurement_jacobian(spec, th).T @ objective.grad(measure_one(th))

    net = SurrogateNet.create(spec.param_count, spec.n_main, hidden=(128, 128), seed=708)
    trust = TrustRegion(radius=0.5)
    loss = objective.value(measure_one(theta))
    accepted, proposals, violations = 0, 0, 0
    while accepted < 20 and proposals < 80:
        cloud = sample_params(theta, 0.1, 32, seed=(709, proposals))
        net.fit(
            SampleBatch(cloud, forward_exact_batch(spec, cloud)),
            epochs=300 if proposals == 0 else 120,
            lr=0.05,
        )
        g_s = surrogate_grad(net, theta, objective)
        g_l = true_grad(theta)
        eps = float(np.linalg.norm(g_s - g_l))
        res = descent_step(theta, net, 0.8, trust, objective, measure_one, loss_before=loss)
        proposals += 1
        if not res.accepted:
            continue
        assert res.loss_after < res.loss_before  # strict decrease when accepted
        eta = res.eta_effective
        direction = -g_s / np.linalg.norm(g_s)
        s = res.step_norm
        lp = objective.value(measure_one(theta + direction * s))
        lm = objective.value(measure_one(theta - direction * s))
        kappa = (lp - 2 * loss + lm) / s**2
        slack = res.loss_after - (loss - 0.5 * eta * np.linalg.norm(g_l) ** 2)
        bound = eta * eps * np.linalg.norm(g_l) + 0.5 * eta**2 * abs(kappa) * np.linalg.norm(g_s) ** 2
        if slack > bound + 0.1 * abs(bound) + 1e-6:
            violations += 1
        theta, loss = res.theta_next, res.loss_after
        accepted += 1
    passed = accepted == 20 and violations == 0
    report(
        7,
        "surrogate descent",
        passed,
        f"{accepted} accepted steps in {proposals} proposals, slack violations {violations}",
        t0,
    )
    assert passed


def test_criterion_08_convergence_schedule():
    t0 = time.time()
    # the schedule itself satisfies the divergent-sum / finite-square-sum pair
    eta0 = 1.5
    t_axis = np.arange(1_000_000)
    etas = eta0 / (1.0 + t_axis)
    series_ok = etas.sum() > 9 * eta0 and (etas**2).sum() < eta0**2 * (np.pi**2 / 6) + 1e-9

    spec = CircuitSpec(4, (1, 3), 2)
    rng = np.random.default_rng(808)
    target = forward_exact_batch(spec, rng.uniform(-np.pi, np.pi, (1, spec.param_count)))[0]
    objective = TargetLoss(target)
    theta0 = rng.uniform(-np.pi, np.pi, spec.param_count)
    measure = lambda ts: forward_exact_batch(spec, np.atleast_2d(ts))
    probe_idx = list(range(0, spec.param_count, 4))

    def probe(theta):
        w = objective.grad(measure(theta)[0])
        return float(
            np.linalg.norm([parameter_shift(spec, theta, j, obs=w) for j in probe_idx])
        )

    monitor = StationarityMonitor(probe, every=20)
    result = run_descent(
        measure,
        objective,
        theta0,
        steps=200,
        eta0=eta0,
        sigma=0.1,
        sample_count=32,
        hidden=(128, 128),
        fit_epochs=300,
        warm_fit_epochs=100,
        seed=809,
        use_schedule=True,
        monitor=monitor,
    )
    rep = monitor.report()
    losses = [r.true_loss for r in result.records]
    monotone = all(losses[i + 1] <= losses[i] + 1e-15 for i in range(len(losses) - 1))
    ratio = rep.final_norm / rep.initial_norm
    passed = series_ok and monotone and rep.final_norm < rep.initial_norm / 5
    report(
        8,
        "convergence schedule",
        passed,
        f"probe norm {rep.initial_norm:.3f} -> {rep.final_norm:.3f} (ratio {ratio:.3f}), "
        f"monotone-up-to-rejections {monotone}, series conditions {series_ok}",
        t0,
    )
    assert passed


DESK_DATA = dict(
    batch_size=32,
    seed=0,
    n=6,
    ancillas=(1, 5),
    layers=3,
    classes=2,
    image_size=8,
    compressor_channels=(8, 16),
    projector_hidden=128,
    surrogate_hidden=(256, 256),
    surrogate_fit_epochs=300,
    surrogate_warm_epochs=80,
    surrogate_fit_lr=0.05,
    sample_sigma=0.1,
    sample_jitter=32,
    dataset_kind="idx",
    train_images=str(FIXTURES / "digits-images-idx3-ubyte.gz"),
    train_labels=str(FIXTURES / "digits-labels-idx1-ubyte.gz"),
    test_fraction=0.4,
    keep_classes=(0, 1),
    max_train=160,
    max_test=100,
)


def test_criterion_09_desk_classification(tmp_path):
    # Binary handwritten digits 0 vs 1 at 8x8 through the full pipeline on the
    # 6-qubit, 3-layer geometry. The bundled IDX fixture stands in when the
    # full-size originals are absent; point MNIST_DIR at the raw IDX files to
    # run on those instead (28x28 inputs go through the downscale path).
    import os

    t0 = time.time()
    data = dict(DESK_DATA)
    if "MNIST_DIR" in os.environ:
        base = Path(os.environ["MNIST_DIR"])
        data.update(
            train_images=str(base / "train-images-idx3-ubyte"),
            train_labels=str(base / "train-labels-idx1-ubyte"),
            test_images=str(base / "t10k-images-idx3-ubyte"),
            test_labels=str(base / "t10k-labels-idx1-ubyte"),
        )
    epochs = 6
    sur_cfg = TrainConfig(eta0=0.01, epochs=epochs, backend="surrogate-train", **data)
    _, sur_records = run_training(sur_cfg, tmp_path / "surrogate")
    sur_acc = [r for r in sur_records if r.split == "test"][-1].accuracy

    dir_cfg = TrainConfig(eta0=0.01, epochs=epochs, backend="exact", **data)
    _, dir_records = run_training(dir_cfg, tmp_path / "direct")
    dir_acc = [r for r in dir_records if r.split == "test"][-1].accuracy

    passed = epochs <= 20 and sur_acc >= 0.95 and abs(sur_acc - dir_acc) <= 0.05
    report(
        9,
        "desk-scale classification",
        passed,
        f"surrogate test acc {sur_acc:.3f}, direct test acc {dir_acc:.3f}, "
        f"{epochs} epochs, gap {abs(sur_acc - dir_acc):.3f}",
        t0,
    )
    assert passed


def test_criterion_10_determinism(tmp_path):
    t0 = time.time()
    config = dict(
        eta0=0.02,
        batch_size=16,
        epochs=3,
        seed=7,
        n=4,
        ancillas=[2],
        layers=1,
        classes=2,
        image_size=8,
        compressor_channels=[4, 8],
        projector_hidden=32,
        surrogate_hidden=[64, 64],
        surrogate_fit_epochs=150,
        surrogate_warm_epochs=50,
        sample_jitter=16,
        dataset_kind="synthetic-two-gaussians",
        dataset_count=64,
        workers=1,
    )
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli_main(["train", "--config", str(cfg_path), "--out", str(out_a)]) == 0
    assert cli_main(["train", "--config", str(cfg_path), "--out", str(out_b)]) == 0
    metrics_equal = (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()

    ckpt_a = np.load(out_a / "ckpt_last.npz")
    ckpt_b = np.load(out_b / "ckpt_last.npz")
    arrays_equal = set(ckpt_a.files) == set(ckpt_b.files) and all(
        np.array_equal(ckpt_a[k], ckpt_b[k]) for k in ckpt_a.files if k != "meta"
    )

    for out in (out_a, out_b):
        assert (
            cli_main(
                [
                    "eval",
                    "--config",
                    str(cfg_path),
                    "--checkpoint",
                    str(out / "ckpt_last.npz"),
                    "--out",
                    str(out),
                ]
            )
            == 0
        )
    rec_a = (out_a / "eval.jsonl").read_text().splitlines()[-1]
    rec_b = (out_b / "eval.jsonl").read_text().splitlines()[-1]
    eval_equal = json.loads(rec_a)["accuracy"] == json.loads(rec_b)["accuracy"] and json.loads(
        rec_a
    )["confusion"] == json.loads(rec_b)["confusion"]

    passed = metrics_equal and arrays_equal and eval_equal
    report(
        10,
        "bit-identical reruns",
        passed,
        f"metrics {metrics_equal}, checkpoint arrays {arrays_equal}, eval records {eval_equal}",
        t0,
    )
    assert passed
