"""Acceptance suite A1-A10.

Each check records one ``PASS``/``FAIL`` line; the lines are printed as
they happen and repeated in the pytest terminal summary.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from muso.harness import PRETRAINED, RETRAINED, load_config, run_experiment, summary_table
from muso.numerics import projector_exact, projector_woodbury
from muso.rf_model import SgdConfig, featurize, minnorm_fit, sgd_fit
from muso.unlearn_linear import (
    TeacherConfig,
    amnesiac_labels,
    badteacher_labels,
    finetune,
    gap_decomposition,
    mixed_features,
    muso_labels,
    retrain,
)
from muso.unlearn_nn import (
    MusoConfig,
    column_select,
    init_mlp,
    mlp_loss_and_grads,
    muso_unlearn,
)

from _instances import direct_projector, frozen_instance, rel, rf_instance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
BASELINES = ("amnesiac", "badteacher")
RESULTS = []


def record(name, ok, detail):
    line = f"{name:<28} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def mean(values):
    return float(np.mean(values))


def a1_family(n, seed=1):
    rng = np.random.default_rng(seed)
    return [rf_instance(rng, zero_init=bool(i % 2), C=1 + i % 3) for i in range(n)]


@pytest.fixture(scope="module")
def table1(tmp_path_factory):
    cfg = load_config(CONFIGS / "table1_mnist.json")
    out = run_experiment(cfg, tmp_path_factory.mktemp("table1"))
    return cfg, out


@pytest.fixture(scope="module")
def synthetic_mlp(tmp_path_factory):
    cfg = load_config(CONFIGS / "synthetic_mlp.json")
    t0 = time.perf_counter()
    out = run_experiment(cfg, tmp_path_factory.mktemp("mlp"))
    return cfg, out, time.perf_counter() - t0


def test_a1_relabel_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    family = a1_family(60)
    for inst in family:
        y_t = muso_labels(inst["Z_u"], projector_exact(inst["Z_r"]), inst["w_p"], inst["w_init"]).y
        w_u = finetune(inst["Z_r"], inst["y_r"], inst["Z_u"], y_t, inst["w_p"])
        worst = max(worst, rel(w_u, retrain(inst["Z_r"], inst["y_r"], inst["w_init"])))
    seconds = time.perf_counter() - t0
    ok = record("A1 exactness", worst < 1e-8 and seconds < 10, f"{len(family)} instances, max rel {worst:.2e}, {seconds:.2f}s")
    assert ok


def test_a2_gap_identity():
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2)
    for i, inst in enumerate(a1_family(60)):
        n_u, C = inst["y_u"].shape
        classes = max(C, 2)
        candidates = [
            rng.standard_normal((n_u, C)),
            amnesiac_labels(rng.integers(0, classes, n_u), classes, seed=i).y[:, :C],
            badteacher_labels(rng.standard_normal((5, n_u)), i, TeacherConfig(5, 40, 1.0, C)).y,
        ]
        w_r = retrain(inst["Z_r"], inst["y_r"], inst["w_init"])
        for y_t in candidates:
            g = gap_decomposition(**inst, y_u_tilde=y_t)
            w_u = finetune(inst["Z_r"], inst["y_r"], inst["Z_u"], y_t, inst["w_p"])
            worst = max(worst, rel(g.predicted_gap(y_t), w_r - w_u))
    seconds = time.perf_counter() - t0
    ok = record("A2 gap identity", worst < 1e-8 and seconds < 10, f"max rel {worst:.2e}, {seconds:.2f}s")
    assert ok


@pytest.mark.slow
def test_a3_table1(table1):
    _, out = table1
    table = summary_table(out)
    scenarios = sorted({s for s, _ in table})
    lines = []
    for s in scenarios:
        muso, pre, ret = table[(s, "muso")], table[(s, PRETRAINED)], table[(s, RETRAINED)]
        base = {b: mean(table[(s, b)]["delta_w"]) for b in BASELINES}
        pre_dw = mean(pre["delta_w"])
        lines.append(
            (
                s,
                max(muso["delta_w"]),
                pre_dw,
                min(muso["RA"]),
                abs(mean(muso["FA"]) - mean(ret["FA"])),
                min(v / pre_dw for v in base.values()),
            )
        )
    checks = [
        ("A3 MUSO delta_w<=1e-3", all(x[1] <= 1e-3 for x in lines), "max " + ", ".join(f"{x[0]}={x[1]:.1e}" for x in lines)),
        ("A3 pretrained window", all(0.01 <= x[2] <= 0.2 for x in lines), "mean " + ", ".join(f"{x[0]}={x[2]:.2e}" for x in lines)),
        ("A3 MUSO RA=100", all(x[3] == 100.0 for x in lines), "min " + ", ".join(f"{x[0]}={x[3]:.2f}" for x in lines)),
        ("A3 MUSO FA vs retrain", all(x[4] <= 2.0 for x in lines), "gap " + ", ".join(f"{x[0]}={x[4]:.2f}" for x in lines)),
        ("A3 baseline delta_w", all(x[5] >= 0.9 for x in lines), "ratio to pretrained " + ", ".join(f"{x[0]}={x[5]:.3f}" for x in lines)),
    ]
    results = [record(*c) for c in checks]
    assert all(results)


def test_a4_implicit_bias():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(20):
        D = int(rng.integers(60, 201))
        batch = int(rng.integers(5, D // 6 + 1))
        N = 2 * batch
        Z = rng.standard_normal((D, N)) / np.sqrt(D)
        Y = rng.standard_normal((N, 2))
        w0 = rng.standard_normal((D, 2)) / np.sqrt(D)
        # step scaled with the batch so the per-step contraction is shape independent
        w = sgd_fit(Z, Y, w0, SgdConfig(lr=0.3 * batch, epochs=2000, batch_size=batch, seed=i))
        worst = max(worst, rel(w, minnorm_fit(Z, Y, w0)))
    seconds = time.perf_counter() - t0
    ok = record("A4 implicit bias", worst < 1e-3 and seconds < 60, f"max rel {worst:.2e}, {seconds:.2f}s")
    assert ok


def test_a5_projectors():
    rng = np.random.default_rng(5)
    worst_eq, worst_idem, worst_sym = 0.0, 0.0, 0.0
    for shape in [(8, 20), (20, 8), (30, 30), (50, 12)]:
        Z = rng.standard_normal(shape)
        for lam in (1e-3, 1e-1, 1.0):
            v = rng.standard_normal((shape[0], 100))
            worst_eq = max(worst_eq, rel(projector_woodbury(Z, lam).apply(v), direct_projector(Z, lam) @ v))
        if shape[1] <= shape[0]:
            P = projector_exact(Z)
            a, b = rng.standard_normal((shape[0], 100)), rng.standard_normal((shape[0], 100))
            Pa = P.apply(a)
            worst_idem = max(worst_idem, rel(P.apply(Pa), Pa))
            lhs = np.einsum("ij,ij->j", Pa, b)
            rhs = np.einsum("ij,ij->j", a, P.apply(b))
            worst_sym = max(worst_sym, float(np.max(np.abs(lhs - rhs) / (np.abs(lhs) + 1e-12))))
    ok = worst_eq < 1e-9 and worst_idem < 1e-9 and worst_sym < 1e-8
    assert record("A5 projector suite", ok, f"woodbury {worst_eq:.1e}, idempotence {worst_idem:.1e}, symmetry {worst_sym:.1e}")


def test_a6_mixing_invariance():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10):
        inst = rf_instance(rng, D=int(rng.integers(60, 160)), N=int(rng.integers(20, 50)))
        Z_r, y_r = inst["Z_r"], inst["y_r"]
        n_u = inst["Z_u"].shape[1]
        sub = rng.choice(Z_r.shape[1], n_u, replace=False)
        w_r = retrain(Z_r, y_r, inst["w_init"])
        gaps = [
            w_r - finetune(Z_r, y_r, mixed_features(Z_r[:, sub], inst["Z_u"], c), y_r[sub], inst["w_p"])
            for c in (0.25, 0.5, 0.9)
        ]
        worst = max(worst, max(rel(g, gaps[0]) for g in gaps[1:]))
    assert record("A6 c-invariance", worst < 1e-8, f"max rel {worst:.2e}")


@pytest.mark.slow
def test_a7_nn_muso(synthetic_mlp):
    _, out, seconds = synthetic_mlp
    table = summary_table(out)
    scenarios = sorted({s for s, _ in table})
    gaps = {(s, m): mean(table[(s, m)]["avg_gap"]) for s in scenarios for m in ("muso",) + BASELINES}
    ordering = all(gaps[(s, "muso")] <= min(gaps[(s, b)] for b in BASELINES) for s in scenarios)
    detail = "; ".join(
        f"{s}: muso {gaps[(s, 'muso')]:.2f} amnesiac {gaps[(s, 'amnesiac')]:.2f} badteacher {gaps[(s, 'badteacher')]:.2f}"
        for s in scenarios
    )
    r1 = record("A7(i) AvgGap ordering", ordering, detail)

    fa = {s: abs(mean(table[(s, "muso")]["FA"]) - mean(table[(s, RETRAINED)]["FA"])) for s in scenarios}
    r2 = record("A7(ii) FA vs retrain", all(v <= 10.0 for v in fa.values()), ", ".join(f"{s}={v:.2f}" for s, v in fa.items()))

    rng = np.random.default_rng(7)
    rf, X, Y, m_init, m_p, n_u = frozen_instance(rng)
    cfg = MusoConfig(lr=0.01, sample_ratio=1.0, lam=1e-12, max_iters=1, projector="exact", head_update="closed-form")
    net = muso_unlearn(m_p, m_init, X[:, n_u:], Y[n_u:], X[:, :n_u], Y[:n_u], cfg)
    Z = featurize(rf, X)
    y_t = muso_labels(Z[:, :n_u], projector_exact(Z[:, n_u:]), m_p.head.w, m_init.head.w_init).y
    w_lin = finetune(Z[:, n_u:], Y[n_u:], Z[:, :n_u], y_t, m_p.head.w)
    err = rel(net.head.w, w_lin)
    r3 = record("A7(iii) frozen reduction", err < 1e-6 and seconds < 300, f"rel {err:.2e}, run {seconds:.1f}s")
    assert r1 and r2 and r3


def test_a8_column_select():
    rng = np.random.default_rng(8)
    worst_sum, worst_lev = 0.0, 0.0
    for _ in range(10):
        X = rng.standard_normal((int(rng.integers(4, 12)), int(rng.integers(20, 60))))
        k = int(rng.integers(1, X.shape[0] + 1))
        _, p = column_select(X, k, 5, seed=0)
        _, _, Vt = np.linalg.svd(X, full_matrices=True)
        worst_sum = max(worst_sum, abs(p.sum() - 1.0))
        worst_lev = max(worst_lev, float(np.max(np.abs(p - (Vt[:k] ** 2).sum(axis=0) / k))))
    X = rng.standard_normal((12, 3)) @ rng.standard_normal((3, 60)) + 0.05 * rng.standard_normal((12, 60))
    errors = []
    for c in (1, 2, 4, 8, 16):
        trial = []
        for seed in range(30):
            idx, _ = column_select(X, 3, c, seed=seed)
            C = X[:, np.unique(idx)]
            coef, *_ = np.linalg.lstsq(C, X, rcond=None)
            trial.append(np.linalg.norm(X - C @ coef) ** 2)
        errors.append(mean(trial))
    monotone = all(b <= a for a, b in zip(errors, errors[1:]))
    ok = worst_sum < 1e-10 and worst_lev < 1e-8 and monotone
    detail = f"sum {worst_sum:.1e}, leverage {worst_lev:.1e}, MC error " + " ".join(f"{e:.3f}" for e in errors)
    assert record("A8 column select", ok, detail)


def test_a9_gradients():
    worst = 0.0
    h = 1e-6
    for point in range(10):
        r = np.random.default_rng(900 + point)
        m = init_mlp([5, 7, 4], 3, activation=("tanh", "cos")[point % 2], seed=point)
        for b in m.biases:
            b[...] = 0.1 * r.standard_normal(b.shape)
        X, Y = r.standard_normal((5, 6)), r.standard_normal((6, 3))
        _, g_w, g_b, g_head = mlp_loss_and_grads(m, X, Y)
        params = m.weights + m.biases + [m.head.w]
        analytic = np.concatenate([a.ravel() for a in g_w + g_b + [g_head]])
        numeric = []
        for arr in params:
            for i in np.ndindex(arr.shape):
                orig = arr[i]
                arr[i] = orig + h
                up = mlp_loss_and_grads(m, X, Y)[0]
                arr[i] = orig - h
                down = mlp_loss_and_grads(m, X, Y)[0]
                arr[i] = orig
                numeric.append((up - down) / (2 * h))
        worst = max(worst, rel(analytic, np.array(numeric)))
    assert record("A9 gradients", worst < 1e-4, f"10 points, max rel {worst:.2e}")


@pytest.mark.slow
def test_a10_determinism(table1, synthetic_mlp, tmp_path):
    def numeric_files(out):
        return {
            p.relative_to(out).as_posix(): p.read_bytes()
            for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "timing.json"
        }

    mismatched = []
    for cfg, first in ((table1[0], table1[1]), (synthetic_mlp[0], synthetic_mlp[1])):
        again = run_experiment(cfg, tmp_path / cfg.name)
        if numeric_files(first) != numeric_files(again):
            mismatched.append(cfg.name)
    rf_cfg = load_config(CONFIGS / "synthetic_rf.json")
    a = numeric_files(run_experiment(rf_cfg, tmp_path / "rf-a"))
    b = numeric_files(run_experiment(rf_cfg, tmp_path / "rf-b"))
    if a != b:
        mismatched.append(rf_cfg.name)
    assert record("A10 determinism", not mismatched, "3 configs byte-identical" if not mismatched else f"differs: {mismatched}")
