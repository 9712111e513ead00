"""End-to-end acceptance checks.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (visible even
without ``-s``) and then asserts.  Run just this module with::

    pytest tests/test_acceptance.py -v
"""

import csv
import time

import numpy as np
import pytest
from conftest import DiracOracle, GaussianOracle, elementwise_error, finite_differences, tensor_error

from motiondiff.cli import evaluate, main
from motiondiff.denoiser import Denoiser
from motiondiff.diffusion import q_step, sample_images
from motiondiff.metrics import GaussianStats, LeastSquaresClassifier, frechet_distance
from motiondiff.motion_data import LabeledDataset, apply_norm, compute_norm_stats, load_dataset
from motiondiff.schedule import build_schedule, cosine_alpha_bar

SEED = 7


def verdict(capsys, n, title, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {title} | {detail} | {elapsed:.1f}s (limit {limit}s)"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- 1 ----------------------------------------------------------------------


def test_criterion_1_schedule(capsys):
    start = time.perf_counter()
    ok, worst = True, 0.0
    for T in (10, 50, 1000):
        ok &= cosine_alpha_bar(0, T) == 1.0 and cosine_alpha_bar(T, T) == 0.0
        s = build_schedule("cosine", T)
        prod = np.cumprod(s.alphas)
        worst = max(worst, float(np.max(np.abs(s.alpha_bars[1:] - prod[1:]) / prod[1:])))
    ok &= worst <= 1e-12
    verdict(capsys, 1, "schedule endpoints and telescoping", ok, f"max rel err {worst:.2e}",
            time.perf_counter() - start, 1)


# -- 2 ----------------------------------------------------------------------


def test_criterion_2_forward_equivalence(capsys):
    start = time.perf_counter()
    T, n = 50, 100_000
    s = build_schedule("cosine", T)
    rng = np.random.default_rng(SEED)
    x0 = rng.standard_normal(4)
    worst = 0.0  # largest deviation in units of the standard error
    for t in (1, T // 2, T):
        x = np.broadcast_to(x0, (n, 4)).copy()
        for step in range(1, t + 1):
            x = q_step(x, step, s, rng).value
        var = 1.0 - s.alpha_bars[t]
        z_mean = np.abs(x.mean(0) - np.sqrt(s.alpha_bars[t]) * x0) / np.sqrt(var / n)
        z_var = np.abs(x.var(0, ddof=1) - var) / (var * np.sqrt(2.0 / (n - 1)))
        worst = max(worst, z_mean.max(), z_var.max())
    verdict(capsys, 2, "iterated forward steps match closed form", worst < 3, f"max |z| {worst:.2f} (< 3)",
            time.perf_counter() - start, 30)


# -- 3 ----------------------------------------------------------------------


def test_criterion_3_dirac_oracle(capsys):
    start = time.perf_counter()
    s = build_schedule("cosine", 50)
    p = np.random.default_rng(SEED).standard_normal((3, 8, 32))
    out = sample_images(DiracOracle(s, p), 0, 100, s, p.shape, rng=SEED)
    rmse = np.sqrt(((out - p) ** 2).reshape(100, -1).mean(axis=1)).max()
    verdict(capsys, 3, "Dirac-oracle sampling", rmse <= 0.05, f"worst chain RMSE {rmse:.2e} (<= 0.05)",
            time.perf_counter() - start, 10)


# -- 4 ----------------------------------------------------------------------


def test_criterion_4_gaussian_oracle(capsys):
    start = time.perf_counter()
    s = build_schedule("cosine", 1000)
    n = 2000
    out = sample_images(GaussianOracle(s, 0.5, 0.2), 0, n, s, (3, 2, 2), rng=SEED).reshape(n, -1)
    mean, std = out.mean(0), out.std(0, ddof=1)
    z = np.abs(mean - 0.5) / (std / np.sqrt(n))
    rel = np.abs(std - 0.2) / 0.2
    ok = z.max() < 3 and rel.max() < 0.10
    verdict(capsys, 4, "Gaussian-oracle sampling", ok,
            f"max mean |z| {z.max():.2f} (< 3), max std rel err {rel.max():.3f} (< 0.10)",
            time.perf_counter() - start, 120)


# -- 5 ----------------------------------------------------------------------


def test_criterion_5_gradients(capsys, tiny_model):
    # Every entry of every parameter is probed with a 1e-5 central difference.
    # The verdict is the relative error of each parameter array's gradient;
    # the worst single entry is printed alongside for reference.
    start = time.perf_counter()
    per_tensor, per_entry = {}, {}
    for kind in ("l1", "l2"):
        pairs = finite_differences(tiny_model, kind)
        per_tensor[kind] = max(tensor_error(pairs).values())
        per_entry[kind] = max(elementwise_error(pairs).values())
        assert len(pairs) == len(tiny_model.params)
    ok = max(per_tensor.values()) <= 1e-4
    verdict(capsys, 5, "analytic vs finite-difference gradients", ok,
            f"per-parameter rel err L1 {per_tensor['l1']:.1e}, L2 {per_tensor['l2']:.1e} (<= 1e-4); "
            f"worst single entry L1 {per_entry['l1']:.1e}, L2 {per_entry['l2']:.1e}",
            time.perf_counter() - start, 60)


# -- 6 ----------------------------------------------------------------------


def test_criterion_6_frechet(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    A = rng.standard_normal((6, 6))
    S = A @ A.T
    mu = rng.standard_normal(6)
    same = frechet_distance(GaussianStats(mu, S), GaussianStats(mu, S))
    delta = rng.standard_normal(6)
    shift = frechet_distance(GaussianStats(mu, S), GaussianStats(mu + delta, S))
    diag = frechet_distance(GaussianStats([0, 0], np.diag([1.0, 4.0])), GaussianStats([0, 0], np.diag([9.0, 16.0])))
    ok = same <= 1e-6 and abs(shift - delta @ delta) <= 1e-8 and abs(diag - 8.0) <= 1e-8
    verdict(capsys, 6, "Frechet analytic cases", ok,
            f"identical {same:.1e}, shift err {abs(shift - delta @ delta):.1e}, diagonal {diag:.10f}",
            time.perf_counter() - start, 1)


# -- 7 and 8: desk pipeline -------------------------------------------------


def run_pipeline(d):
    """gen-data -> train -> sample -> eval at the desk configuration; returns elapsed seconds."""
    start = time.perf_counter()
    steps = [
        ["gen-data", "--out", d / "real.mdif", "--classes", 4, "--per-class", 50],
        ["train", "--data", d / "real.mdif", "--out", d / "model.mdck", "--T", 50, "--width", 16, "--epochs", 30],
        ["sample", "--checkpoint", d / "model.mdck", "--label", "all", "--count", 50, "--out", d / "samples.mdif"],
        ["eval", "--real", d / "real.mdif", "--generated", d / "samples.mdif", "--out", d / "report.csv"],
    ]
    for argv in steps:
        code = main([str(a) for a in argv] + ["--seed", str(SEED)])
        assert code == 0, f"{argv[0]} exited with {code}"
    return time.perf_counter() - start


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("desk_a")
    return d, run_pipeline(d)


def test_criterion_7_desk_pipeline(capsys, desk_run):
    d, elapsed = desk_run
    start = time.perf_counter()
    trace = [float(r["mean_loss"]) for r in csv.DictReader(open(d / "model.mdck.loss.csv", encoding="utf-8"))]
    loss_ok = trace[-1] < trace[0]

    real = load_dataset(d / "real.mdif")
    samples = load_dataset(d / "samples.mdif")
    stats = compute_norm_stats(real)
    real_n = apply_norm(real, stats)

    # Gaussian-noise sequences in the same normalized space, labeled like the samples
    noise = LabeledDataset(
        real.spec,
        np.random.default_rng(SEED).standard_normal(samples.coords.shape),
        samples.labels,
        real.num_classes,
        samples.norm_stats,
    )
    fmd_model = evaluate(real, samples, "classifier", SEED)[1]["fmd"]
    fmd_noise = evaluate(real, noise, "classifier", SEED)[1]["fmd"]
    ratio = fmd_noise / fmd_model
    fmd_ok = ratio >= 2.0

    flat = lambda ds: ds.coords.reshape(len(ds), -1)  # noqa: E731
    clf = LeastSquaresClassifier().fit(flat(real_n), real_n.labels, real.num_classes)
    acc = clf.score(flat(samples), samples.labels)
    acc_ok = len(samples) == 200 and acc >= 0.70

    total = elapsed + time.perf_counter() - start
    detail = (
        f"(a) loss {trace[0]:.4f} -> {trace[-1]:.4f}; "
        f"(b) FMD model {fmd_model:.3f} vs noise {fmd_noise:.3f}, ratio {ratio:.2f} (>= 2); "
        f"(c) LS accuracy {acc:.3f} on {len(samples)} samples (>= 0.70)"
    )
    verdict(capsys, 7, "desk pipeline", loss_ok and fmd_ok and acc_ok, detail, total, 900)


def test_criterion_8_reproducibility(capsys, desk_run, tmp_path_factory):
    first, _ = desk_run
    second = tmp_path_factory.mktemp("desk_b")
    elapsed = run_pipeline(second)
    names = ["real.mdif", "model.mdck", "model.mdck.loss.csv", "samples.mdif", "report.csv", "report.txt"]
    names += [n + ".manifest.json" for n in ("real.mdif", "samples.mdif", "report.csv")]
    differing = [n for n in names if (first / n).read_bytes() != (second / n).read_bytes()]
    detail = f"{len(names) - len(differing)}/{len(names)} files byte-identical" + (
        f"; differ: {', '.join(differing)}" if differing else ""
    )
    verdict(capsys, 8, "byte-identical rerun", not differing, detail, elapsed, 900)


def test_desk_model_is_a_denoiser(desk_run):
    # guard against the pipeline silently producing an untrained (all-zero output) model
    from motiondiff.denoiser import load_checkpoint

    model, _ = load_checkpoint(desk_run[0] / "model.mdck")
    assert isinstance(model, Denoiser) and np.any(model.params["out.w"])
