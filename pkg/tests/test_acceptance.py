"""Acceptance criteria, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> ... PASS|FAIL`` line (visible with
``pytest -s`` or in the summary of ``python3 tests/test_acceptance.py``) and
then asserts. Criterion 7 trains 80 MNIST models and takes several minutes.
"""

import csv
import math
import time

import numpy as np
import pytest

from geodrop import families, geometry
from geodrop.cli import EXIT_OK, main
from geodrop.data import Dataset
from geodrop.dropout_ensemble import flatness_gap
from geodrop.experiment import CSV_FIELDS, read_rows_csv, summarize, sweep_shape
from geodrop.fim import exact_fim, kfac_fim, mc_fim
from geodrop.mixtures import (
    alpha_integrate,
    argmin_weighted_divergence,
    categorical_from_natural,
    natural_from_categorical,
)
from geodrop.models import MlpModel, forward, jacobian_rank, loss_and_grad
from geodrop.numerics import finite_diff_grad, finite_diff_jacobian, make_rng
from oracles import geometric_mean, lowered_duality_residual, random_smooth_connection, random_smooth_metric


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return report


def test_criterion_01_geometry_oracles(verdict):
    start = time.perf_counter()
    flat = families.euclidean_metric(3)
    t = np.array([0.3, -1.0, 2.0])
    lc = geometry.levi_civita_field(flat)
    euclid = max(
        np.abs(lc(t)).max(),
        np.abs(geometry.torsion(lc, t)).max(),
        np.abs(geometry.riemann(lc, t)).max(),
        abs(geometry.scalar_curvature(flat, t)),
    )
    sphere = geometry.scalar_curvature(families.sphere_metric, [math.pi / 4, 0.0])
    rng = make_rng(101)
    gaussian = [
        geometry.scalar_curvature(families.gaussian_fisher_metric, [rng.uniform(-3, 3), rng.uniform(0.3, 3)])
        for _ in range(20)
    ]
    zero = lambda _: np.zeros((3, 3, 3))
    flat_exact = np.all(geometry.torsion(zero, t) == 0.0) and np.all(geometry.riemann(zero, t) == 0.0)
    elapsed = time.perf_counter() - start
    gauss_err = max(abs(v + 1) for v in gaussian)
    ok = euclid <= 1e-10 and abs(sphere - 2) <= 1e-3 and gauss_err <= 2e-3 and flat_exact and elapsed < 10
    verdict(1, "geometry oracles", ok,
            f"euclidean max {euclid:.1e}, sphere {sphere:.6f}, gaussian max err {gauss_err:.1e}, "
            f"flat exact {flat_exact}, {elapsed:.2f}s")


def test_criterion_02_duality(verdict):
    rng = make_rng(202)
    residual = 0.0
    for _ in range(100):
        dim = int(rng.integers(2, 4))
        metric, conn = random_smooth_metric(rng, dim), random_smooth_connection(rng, dim)
        t = rng.normal(size=dim)
        dual = geometry.dual_connection(metric, conn, t)
        r = lowered_duality_residual(metric(t), geometry.metric_derivatives(metric, t), conn(t), dual)
        residual = max(residual, np.abs(r).max())

    alpha_gap = 0.0
    for alpha in (-0.7, -0.2, 0.0, 0.4, 1.0):
        metric, conn = random_smooth_metric(rng, 2), random_smooth_connection(rng, 2)
        dual = geometry.dual_connection_field(metric, conn)
        t = rng.normal(size=2)
        left = geometry.dual_connection(metric, geometry.alpha_connection_field(conn, dual, alpha), t)
        alpha_gap = max(alpha_gap, np.abs(left - geometry.alpha_connection(conn, dual, -alpha, t)).max())

    self_gap = 0.0
    for metric, t in [
        (families.gaussian_fisher_metric, np.array([0.4, 1.1])),
        (families.sphere_metric, np.array([0.9, 0.2])),
        (random_smooth_metric(rng, 3), rng.normal(size=3)),
    ]:
        lc = geometry.levi_civita_field(metric)
        self_gap = max(self_gap, np.abs(geometry.dual_connection(metric, lc, t) - lc(t)).max())
    ok = residual <= 1e-6 and alpha_gap <= 1e-6 and self_gap <= 1e-8
    verdict(2, "duality", ok, f"residual {residual:.1e}, alpha/-alpha {alpha_gap:.1e}, self-dual {self_gap:.1e}")


def test_criterion_03_alpha_integration(verdict):
    rng = make_rng(303)
    oracle_gap = closed_gap = 0.0
    for i in range(50):
        k, m = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        alpha = (-1.0, 0.0, 0.5, 1.0)[i % 4]
        dists, w = rng.dirichlet(np.ones(k), m), rng.dirichlet(np.ones(m))
        mixed = alpha_integrate(dists, w, alpha)
        oracle_gap = max(oracle_gap, np.abs(mixed - argmin_weighted_divergence(dists, w, alpha)).max())
        if alpha == -1.0:
            closed_gap = max(closed_gap, np.abs(mixed - w @ dists).max())
        elif alpha == 1.0:
            closed_gap = max(closed_gap, np.abs(mixed - geometric_mean(dists, w)).max())
    ok = oracle_gap <= 1e-4 and closed_gap <= 1e-10
    verdict(3, "alpha-integration optimality", ok, f"oracle gap {oracle_gap:.1e}, closed forms {closed_gap:.1e}")


def test_criterion_04_flatness(verdict):
    rng = make_rng(404)
    template = MlpModel.zeros((4, 3))
    members = rng.normal(size=(5, template.n_params))
    data = Dataset(rng.normal(size=(50, 4)), rng.integers(0, 3, size=50), 3)
    gap = flatness_gap(template, members, None, data, 1.0)
    linear = 0.0
    for _ in range(20):
        eta = rng.normal(size=(3, 4))
        w = rng.dirichlet(np.ones(3))
        mixed = alpha_integrate([categorical_from_natural(e) for e in eta], w, 1.0)
        linear = max(linear, np.abs(natural_from_categorical(mixed) - w @ eta).max())
    ok = gap <= 1e-8 and linear <= 1e-8
    verdict(4, "1-flatness surrogate", ok, f"softmax flatness gap {gap:.1e}, natural-parameter linearity {linear:.1e}")


def test_criterion_05_model_correctness(verdict):
    rng = make_rng(505)
    worst = 0.0
    for i in range(20):
        sizes = (int(rng.integers(2, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 5)))
        model = MlpModel.init(sizes, rng, ("sigmoid", "relu")[i % 2])
        model = model.with_params(model.params + 0.3 * rng.normal(size=model.n_params))
        x, y = rng.normal(size=(8, sizes[0])), rng.integers(0, sizes[-1], size=8)
        _, grad = loss_and_grad(model, x, y)
        fd = finite_diff_grad(lambda th: loss_and_grad(model.with_params(th), x, y)[0], model.params)
        worst = max(worst, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    ranks = {}
    for n in (2, 5, 10):
        model = MlpModel.init((n, 1), rng, "sigmoid")
        model = model.with_params(rng.normal(size=model.n_params))
        ranks[n] = jacobian_rank(model, rng.normal(size=(3 * n, n)))
    ok = worst <= 1e-5 and all(r == n + 1 for n, r in ranks.items())
    verdict(5, "model correctness", ok, f"backprop rel err {worst:.1e}, ranks {ranks}")


def test_criterion_06_fim(verdict):
    rng = make_rng(606)
    model = MlpModel.init((2, 3), rng)
    model = model.with_params(rng.normal(size=model.n_params))
    x = rng.normal(size=(5, 2))
    closed = np.zeros((9, 9))
    for xi in x:
        p = forward(model, xi)
        xt = np.append(xi, 1.0)
        closed += np.kron(np.outer(xt, xt), np.diag(p) - np.outer(p, p))
    closed /= len(x)
    closed_gap = np.abs(exact_fim(model, x).full - closed).max()

    single = MlpModel.init((4, 3), rng).with_params(rng.normal(size=15))
    x1 = rng.normal(size=(1, 4))
    kfac_gap = np.abs(kfac_fim(single, x1).to_dense() - exact_fim(single, x1).full).max()

    mlp = MlpModel.init((2, 3, 3), rng, "sigmoid")
    mlp = mlp.with_params(mlp.params + 0.5 * rng.normal(size=mlp.n_params))
    xm = rng.normal(size=(4, 2))
    exact = exact_fim(mlp, xm)
    gaps = {n: np.linalg.norm(mc_fim(mlp, xm, n, make_rng(7)).full - exact.full) for n in (100, 10_000)}
    ratio = gaps[100] / gaps[10_000]

    estimates = [exact, kfac_fim(mlp, xm), mc_fim(mlp, xm, 50, make_rng(1)), exact_fim(model, x)]
    psd = all(e.is_psd() for e in estimates)
    ok = closed_gap <= 1e-8 and kfac_gap <= 1e-10 and 3 <= ratio <= 30 and psd
    verdict(6, "Fisher information", ok,
            f"closed form {closed_gap:.1e}, K-FAC single input {kfac_gap:.1e}, MC gap ratio {ratio:.1f}, PSD {psd}")


@pytest.mark.slow
def test_criterion_07_rate_sweep(verdict, mnist_paths, tmp_path, monkeypatch):
    monkeypatch.delenv("GEODROP_THREADS", raising=False)
    start = time.perf_counter()
    code = main([
        "sweep",
        "--mnist-images", str(mnist_paths["train_images"]),
        "--mnist-labels", str(mnist_paths["train_labels"]),
        "--mnist-test-images", str(mnist_paths["test_images"]),
        "--mnist-test-labels", str(mnist_paths["test_labels"]),
        "--limit", "5000", "--test-limit", "1000",
        "--rates", "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7", "--trials", "10",
        "--norm", "frobenius", "--seed", "0", "--out", str(tmp_path),
    ])
    elapsed = time.perf_counter() - start
    rows = read_rows_csv(tmp_path / "sweep.csv")
    summary = summarize(rows)
    shape = sweep_shape(summary)
    means = shape["means"]
    below = means[0.2] < means[0.0] and means[0.3] < means[0.0]
    in_band = shape["argmin_rate"] in (0.1, 0.2, 0.3)
    stds = all(math.isfinite(e["fim_norm_std"]) for e in summary)
    with open(tmp_path / "sweep_summary.csv", newline="") as fh:
        has_std = "fim_norm_std" in next(csv.reader(fh))
    schema = len(rows) == 80 and all(r.status == "ok" for r in rows)
    curve = ", ".join(f"{r:.1f}:{m:.4f}+/-{s['fim_norm_std']:.4f}" for (r, m), s in zip(means.items(), summary))
    ok = code == EXIT_OK and below and in_band and stds and has_std and schema
    verdict(7, "Fisher norm vs dropout rate on MNIST", ok,
            f"argmin {shape['argmin_rate']}, 0.2/0.3 below 0.0: {below}, {len(rows)} rows, "
            f"{elapsed:.0f}s; means {curve}")


def test_criterion_08_volume_ratio(verdict):
    r = 0.2
    center = np.array([1.0, 0.3])
    sphere, sphere_err = geometry.mc_ball_volume_ratio(
        families.sphere_volume_density, families.sphere_distance, center, r,
        families.ball_half_widths("sphere", center, r), 1_000_000, make_rng(808, 0),
    )
    series = 1 - 2.0 * r * r / (6 * (2 + 2))
    g_center = np.array([0.0, 1.0])
    gauss, gauss_err = geometry.mc_ball_volume_ratio(
        families.gaussian_volume_density, families.gaussian_distance, g_center, r,
        families.ball_half_widths("gaussian", g_center, r), 1_000_000, make_rng(808, 1),
    )
    ok = abs(sphere - series) <= 5e-3 and gauss > 1.0
    verdict(8, "geodesic-ball volume ratio", ok,
            f"sphere MC {sphere:.5f}+/-{sphere_err:.5f} vs series {series:.5f}, "
            f"gaussian MC {gauss:.5f}+/-{gauss_err:.5f}")


def test_criterion_09_second_fundamental_form(verdict):
    rng = make_rng(909)
    a = rng.normal(size=(4, 2))
    linear = geometry.second_fundamental_form(lambda t: a @ t, rng.normal(size=2)).norm
    parabola = geometry.second_fundamental_form(lambda t: np.array([t[0], t[0] ** 2]), np.array([0.0])).norm
    circle = geometry.second_fundamental_form(lambda t: np.array([np.cos(t[0]), np.sin(t[0])]), np.array([0.7])).norm
    embed = lambda t: np.array([t[0], t[1], t[0] ** 2 + t[0] * t[1] + 2 * t[1] ** 2, np.sin(t[0])])
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    t = np.array([0.3, -0.4])
    rotation = abs(
        geometry.second_fundamental_form(embed, t).norm
        - geometry.second_fundamental_form(lambda s: q @ embed(s), t).norm
    )
    ok = linear == 0.0 and abs(parabola - 2) <= 1e-6 and abs(circle - 1) <= 1e-6 and rotation <= 1e-8
    verdict(9, "second fundamental form", ok,
            f"linear {linear!r}, parabola {parabola:.9f}, circle {circle:.9f}, rotation {rotation:.1e}")


def test_criterion_10_sweep_determinism(verdict, mnist_paths, tmp_path, monkeypatch):
    monkeypatch.setenv("GEODROP_THREADS", "2")
    argv = [
        "sweep",
        "--mnist-images", str(mnist_paths["train_images"]),
        "--mnist-labels", str(mnist_paths["train_labels"]),
        "--limit", "400", "--test-limit", "100", "--epochs", "2", "--hidden", "16",
        "--rates", "0.0,0.3", "--trials", "2", "--seed", "17",
    ]
    tables = []
    for name in ("a", "b"):
        assert main(argv + ["--out", str(tmp_path / name)]) == EXIT_OK
        with open(tmp_path / name / "sweep.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        tables.append([{k: v for k, v in r.items() if k != "wall_seconds"} for r in rows])
    ok = tables[0] == tables[1] and len(tables[0]) == 4 and list(tables[0][0]) == [f for f in CSV_FIELDS if f != "wall_seconds"]
    verdict(10, "sweep determinism", ok, f"{len(tables[0])} rows identical: {tables[0] == tables[1]}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
