"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed immediately (visible with ``-s``) and repeated in the
terminal summary by ``conftest.pytest_terminal_summary``.
"""
import time

import numpy as np
import pytest

from conftest import fd_gradient_error, random_net
from freqprop.analysis import (
    estimate_complex_gaussian,
    moment_standard_errors,
    sample_transfer_entries,
    som_multichannel_analytic,
    som_singlechannel_log,
    transfer_entry_law,
    upsample_spectrum_predict,
    zero_padding_expected_signal,
    zero_padding_monte_carlo,
)
from freqprop.cli import main
from freqprop.experiments import EXPERIMENTS, ExperimentConfig, replicate_seed, run_experiment
from freqprop.network import ConvLayer, UpsampleLayer, network_forward, upsample
from freqprop.propagation import cascade_transfer, predict_output_spectrum
from freqprop.tensor import dft2, idft2

RESULTS = []


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def test_criterion_01_exact_forward():
    r = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        M = int(r.choice([4, 8, 16]))
        L = int(r.integers(1, 6))
        net, C = random_net(r, L, 4, 3)
        x = r.normal(size=(2, C, M, M))
        out, _ = network_forward(net, x)
        pred = predict_output_spectrum(cascade_transfer(net, (M, M)), dft2(x))
        meas = dft2(out)
        # relative at every frequency, scaled by that bin's magnitude (floored at the map peak * eps)
        floor = np.finfo(float).eps * np.abs(meas).max()
        worst = max(worst, float(np.max(np.abs(pred - meas) / np.maximum(np.abs(meas), floor))))
    dt = time.perf_counter() - t0
    record(1, worst < 1e-7 and dt < 30, f"max relative error {worst:.2e} over 100 nets in {dt:.1f} s")


def test_criterion_02_forward_similarity():
    t0 = time.perf_counter()
    rep = run_experiment(ExperimentConfig.defaults("verify-forward"))
    dt = time.perf_counter() - t0
    lows = {v: rep.values(f"forward_similarity/{v}") for v in ("relu_zero", "linear_zero")}
    circ = rep.values("forward_similarity/linear_circular")
    ok = all(np.all(s >= 0.8) for s in lows.values()) and np.all(np.abs(circ - 1) <= 1e-6) and dt < 60
    detail = ", ".join(f"{v} min {s.min():.3f}" for v, s in lows.items())
    record(2, ok, f"{detail}, circular max dev {np.abs(circ - 1).max():.1e}, {dt:.1f} s")


def test_criterion_03_backward_similarity():
    t0 = time.perf_counter()
    rep = run_experiment(ExperimentConfig.defaults("verify-backward"))
    dt = time.perf_counter() - t0
    means = {v: float(rep.values(f"backward_similarity/{v}").mean()) for v in ExperimentConfig.defaults(
        "verify-backward").variants}
    circ = rep.values("backward_similarity/linear_circular")
    ok = all(m >= 0.88 for m in means.values()) and np.all(circ >= 0.999) and dt < 60
    detail = ", ".join(f"{v} {m:.4f}" for v, m in means.items())
    record(3, ok, f"mean similarity {detail}, {dt:.1f} s")


def test_criterion_04_upsampling_tiles():
    r = np.random.default_rng(404)
    worst = 0.0
    for _ in range(50):
        ratio = int(r.integers(2, 4))
        M, N = (int(v) for v in r.integers(2, 9, size=2))
        g = dft2(r.normal(size=(int(r.integers(1, 4)), M, N)))
        spatial = dft2(upsample(UpsampleLayer(ratio), idft2(g)))
        worst = max(worst, float(np.max(np.abs(upsample_spectrum_predict(g, ratio) - spatial))))
    record(4, worst < 1e-10, f"max abs error {worst:.1e} over 50 spectra")


def test_criterion_05_zero_padding_statistics():
    """Monte Carlo mean of |H - G| against the closed-form grid, every bin."""
    n = 10_000
    diff = zero_padding_monte_carlo(1.0, 1.0, (4, 4), (6, 6), n, seed=55)
    mag = np.abs(diff)
    mc = mag.mean(axis=0)
    se = mag.std(axis=0, ddof=1) / np.sqrt(n)
    pred = zero_padding_expected_signal(1.0, (4, 4), (6, 6)).strength
    z = np.abs(mc - pred) / np.maximum(se, 1e-300)
    inside = int(np.sum(z <= 3))
    record(5, inside == 36, f"{inside}/36 bins within 3 SE, worst {z.max():.0f} SE")


@pytest.mark.parametrize("u,v", [(0, 0), (1, 2), (4, 0), (3, 5), (7, 7)])
def test_criterion_06_entry_moments(u, v):
    n, K, size, mu, sigma = 100_000, 3, (8, 8), 0.01, 0.1
    z = sample_transfer_entries(n, K, size, mu, sigma, seed=606)[:, u, v]
    est = estimate_complex_gaussian(z)
    se = moment_standard_errors(z, est)
    law = transfer_entry_law(ConvLayer.template(1, 1, K, init_mean=mu, init_std=sigma), u, v, size)
    errs = (abs(est.mean - law.mean) / se[0], abs(est.variance - law.variance) / se[1],
            abs(est.pseudo_variance - law.pseudo_variance) / se[2])
    record(6, max(errs) <= 3, f"({u},{v}) deviations in SE: mean {errs[0]:.2f}, var {errs[1]:.2f}, "
                              f"pseudo {errs[2]:.2f}")


def test_criterion_07a_single_channel_som():
    L, K, size, mu, sigma = 4, 3, (8, 8), 0.01, 0.1
    som, n = np.zeros(size), 0
    for shard in range(4):
        T = sample_transfer_entries(25_000, K, size, mu, sigma, replicate_seed(707, shard), shape=(L,))
        som += np.sum(np.abs(np.prod(T, axis=1)) ** 2, axis=0)
        n += T.shape[0]
    som /= n
    pred = np.array([[np.exp(som_singlechannel_log([(mu, sigma)] * L, u, v, size, K).log_som[-1])
                      for v in range(8)] for u in range(8)])
    worst = float(np.max(np.abs(som - pred) / pred))
    record(7, worst <= 0.05, f"single-channel SOM max relative error {worst:.3f} (10^5 draws, L=4)")


def test_criterion_07b_multichannel_som():
    L, C, K, size, mu, sigma = 3, 2, 3, (8, 8), 0.01, 0.1
    som, n = np.zeros(size), 0
    for shard in range(10):
        T = sample_transfer_entries(10_000, K, size, mu, sigma, replicate_seed(708, shard), shape=(L, C, C))
        T = np.moveaxis(T, (-2, -1), (1, 2))
        prod = T[..., 2, :, :] @ T[..., 1, :, :] @ T[..., 0, :, :]
        som += np.sum(np.mean(np.abs(prod) ** 2, axis=(-2, -1)), axis=0)
        n += T.shape[0]
    som /= n
    pred = np.array([[som_multichannel_analytic([(C, mu, sigma)] * L, u, v, size, K)
                      for v in range(8)] for u in range(8)])
    worst = float(np.max(np.abs(som - pred) / pred))
    record(7, worst <= 0.10, f"multi-channel SOM max relative error {worst:.3f} (C=2, L=3)")


def test_criterion_07c_depth_fit():
    rep = run_experiment(ExperimentConfig.defaults("depth-som"))
    r2 = rep.get("log_som_low_fit_r2_mean", 0)
    record(7, r2 >= 0.9, f"log SOM vs depth linear fit R^2 {r2:.3f} (20 seeds, 20 ReLU layers)")


@pytest.mark.parametrize("exp,table_key", [
    ("kernel-size", "p_low_decreasing_in_K"),
    ("mean-bias", "p_low_increasing_in_mean"),
    ("padding", "zero_padding_more_low_frequency"),
])
def test_criterion_08_trends(exp, table_key):
    t0 = time.perf_counter()
    rep = run_experiment(ExperimentConfig.defaults(exp))
    dt = time.perf_counter() - t0
    means = ", ".join(f"{m:.4f}" for m in rep.values("p_low_mean"))
    record(8, rep.checks[table_key] and dt < 60, f"{exp} mean p_low [{means}], {dt:.1f} s")


def test_criterion_09_low_band_first():
    t0 = time.perf_counter()
    rep = run_experiment(ExperimentConfig.defaults("train-demo"))
    dt = time.perf_counter() - t0
    lo, hi = rep.get("rel_reduction_low", 0), rep.get("rel_reduction_high", 0)
    record(9, lo > hi and dt < 300, f"relative reduction low {lo:.3f} vs high {hi:.3f} (20 seeds), {dt:.1f} s")


def test_criterion_10_gradients():
    r = np.random.default_rng(1010)
    worst = 0.0
    for i in range(20):
        net, C = random_net(r, int(r.integers(1, 4)), 3, 3, padding=("circular", "zero_same", "none")[i % 3],
                            activation=("identity", "relu")[i % 2], upsample_at=(1,) if i % 4 == 0 else ())
        M = 6
        x = r.normal(size=(2, C, M, M))
        out, _ = network_forward(net, x)
        target = r.normal(size=out.shape)
        worst = max(worst, fd_gradient_error(net, x, target))
    record(10, worst < 1e-4, f"max relative FD error {worst:.1e} over 20 nets")


def test_criterion_11_determinism(tmp_path):
    small = {
        "verify-forward": "size: 16\ndepth: 3\nn_images: 2\n",
        "verify-backward": "size: 16\ndepth: 3\nn_images: 2\n",
        "depth-som": "size: 16\ndepth: 6\nn_seeds: 3\n",
        "kernel-size": "size: 16\nn_seeds: 3\n",
        "mean-bias": "size: 16\nn_seeds: 3\nanalytic_draws: 50\n",
        "padding": "size: 16\nn_seeds: 3\npad_draws: 500\n",
        "upsampling": "blocks: 2\nn_seeds: 3\n",
        "train-demo": "size: 16\nepochs: 4\nn_seeds: 2\n",
    }
    differing = []
    for exp in EXPERIMENTS:
        cfg = tmp_path / f"{exp}.yaml"
        cfg.write_text("schema_version: 1\n" + small[exp])
        trees = []
        for run in ("a", "b"):
            out = tmp_path / run
            main([exp, "--config", str(cfg), "--out", str(out), "--seed", "11", "--jobs", "1"])
            root = out / exp
            trees.append({p.relative_to(root).as_posix(): p.read_bytes()
                          for p in sorted(root.rglob("*")) if p.is_file()})
        if not trees[0] or trees[0] != trees[1]:
            differing.append(exp)
    record(11, not differing, f"{len(EXPERIMENTS) - len(differing)}/{len(EXPERIMENTS)} experiments byte-identical"
                              + (f", differing: {differing}" if differing else ""))
