"""End-to-end acceptance checks, one reported line per criterion.

The trained-model criteria share a handful of 60-epoch runs on 2-D mixtures
(dz 8, two hidden layers of 64 units, linear decoder readout, lr 1e-3,
4000 training rows), trained once per session.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from uvb.cli import main
from uvb.config import TrainConfig
from uvb.data import BENCHMARKS, gmm_dataset, gmm_sample, mnist_load_idx
from uvb.energy import QuadraticEnergy, bayes_estimate, build_deen, build_uvb, energy_grad, energy_value, kl_diag_gaussian
from uvb.metrics import bayes_risk_gap, diagnostics_tables, score_error, vae_diagnostics
from uvb.sample import ChainState, WalkJumpSchedule, langevin_step, walk_jump
from uvb.train import LossProgram, eb_loss, eb_loss_grad, make_noisy_pairs, train_loop

from _util import central_diff, rel_err

pytestmark = pytest.mark.slow

BASE = dict(dz=8, enc_hidden=(64, 64), dec_hidden=(64, 64), dec_readout="linear", lr=1e-3, epochs=60, seed=0)
_TRAINED: dict = {}


def trained(bench: str, sigma: float, model: str):
    """(model, dataset, seconds) for one benchmark run, cached for the session."""
    key = (bench, sigma, model)
    if key not in _TRAINED:
        ds = gmm_dataset(BENCHMARKS[bench], 4000, 1000, 0)
        cfg = TrainConfig(model=model, sigma=sigma, **BASE)
        start = time.process_time()
        res = train_loop(cfg, ds)
        _TRAINED[key] = (res.model, ds, time.process_time() - start)
    return _TRAINED[key]


def _params_as_list(model, values):
    p = model.params.with_values(values)
    return [p.get(n) for n in p.layout]


# 1 -------------------------------------------------------------------------


def test_criterion_1_differentiation(report):
    start = time.perf_counter()
    worst_first = worst_mixed = 0.0
    for case in range(50):
        rng = np.random.default_rng(1000 + case)
        d = int(rng.integers(1, 4))
        widths = tuple(int(w) for w in rng.integers(2, 7, size=int(rng.integers(1, 3))))
        if case % 2:
            m = build_deen(d, float(rng.uniform(0.3, 1.0)), hidden=widths, seed=case)
        else:
            m = build_uvb(d, float(rng.uniform(0.3, 1.0)), dz=int(rng.integers(1, 4)), enc_hidden=widths,
                          dec_hidden=widths, dec_readout=("linear", "logistic")[case % 4 // 2], seed=case)
        n = 2
        y = rng.standard_normal((n, d))
        x = y + 0.3 * rng.standard_normal((n, d))
        eps = m.draw_eps(n, rng)

        eps1 = m.draw_eps(1, np.random.default_rng(case))
        g = energy_grad(m, y[:1], eps1)
        fd = central_diff(lambda v: float(energy_value(m, v, eps1)[0]), y[:1])
        worst_first = max(worst_first, rel_err(g, fd))

        _, grad = eb_loss_grad(m, x, y, eps)
        prog = LossProgram(m, n)
        base = m.params.values
        fd = np.empty_like(base)
        h = 1e-5
        for i in range(base.size):
            up, down = base.copy(), base.copy()
            up[i] += h
            down[i] -= h
            fd[i] = (prog.value(x, y, eps, _params_as_list(m, up))[0]
                     - prog.value(x, y, eps, _params_as_list(m, down))[0]) / (2 * h)
        worst_mixed = max(worst_mixed, rel_err(grad, fd))
    elapsed = time.perf_counter() - start
    ok = worst_first <= 1e-6 and worst_mixed <= 1e-4 and elapsed < 60
    report(1, ok, f"50 cases, first-order rel err {worst_first:.2e} (<= 1e-6), "
                  f"mixed second-order rel err {worst_mixed:.2e} (<= 1e-4), {elapsed:.1f} s (< 60)")
    assert ok


# 2 -------------------------------------------------------------------------


def _kl_quadrature(mu: float, lam: float) -> float:
    s = np.exp(lam / 2)

    def integrand(z):
        log_q = -0.5 * ((z - mu) / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi)
        log_p = -0.5 * z**2 - 0.5 * np.log(2 * np.pi)
        return np.exp(log_q) * (log_q - log_p)

    val, _ = integrate.quad(integrand, mu - 40 * s, mu + 40 * s, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


def test_criterion_2_kl_closed_form(report):
    pts = np.random.default_rng(2).uniform(-2, 2, size=(100, 2))
    start = time.perf_counter()
    worst = max(abs(kl_diag_gaussian(np.array([m]), np.array([l])) - _kl_quadrature(m, l)) for m, l in pts)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed < 1.0
    report(2, ok, f"max |closed form - quadrature| {worst:.2e} over 100 points (<= 1e-8), {elapsed:.2f} s (< 1)")
    assert ok


# 3 -------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["uvb", "deen"])
def test_criterion_3_score_recovery(kind, report):
    spec, sigma = BENCHMARKS["corners"], 0.5
    model, _, seconds = trained("corners", sigma, kind)
    _, rel = score_error(model, spec, sigma, 20_000, np.random.default_rng(7))
    gap = bayes_risk_gap(model, spec, sigma, 20_000, np.random.default_rng(8))
    ok = rel <= 0.05 and gap.relative <= 0.10 and seconds <= 300
    detail = (f"{kind.upper()} ({len(model.params)} params): rel. score MSE {rel:.4f} (<= 0.05), "
              f"risk {gap.model_risk:.5f} vs Bayes {gap.oracle_risk:.5f}, excess {gap.relative:.1%} (<= 10%), "
              f"training {seconds:.0f} CPU-s (<= 300)")
    report(3, ok, detail)
    assert ok


# 4 -------------------------------------------------------------------------


def test_criterion_4_zero_readout_baseline(report):
    sigma, d = 0.5, 2
    rng = np.random.default_rng(4)
    model = build_deen(d, sigma, hidden=(16, 16), zero_readout=True)
    x = gmm_sample(BENCHMARKS["corners"], 100_000, rng)
    _, y = make_noisy_pairs(x, sigma, rng)
    loss = eb_loss(model, x, y)
    se = np.sum((y - x) ** 2, axis=1).std(ddof=1) / np.sqrt(len(x))
    z = (loss - sigma**2 * d) / se
    ok = abs(z) <= 3
    report(4, ok, f"loss {loss:.5f} vs sigma^2 d = {sigma**2 * d}, {z:+.2f} standard errors (|z| <= 3)")
    assert ok


# 5 -------------------------------------------------------------------------


def test_criterion_5_langevin_stationarity(report):
    delta, steps, chains, d = 0.1, 100_000, 32, 2
    model = QuadraticEnergy(sigma=1.0, d=d)
    state = ChainState(np.zeros((chains, d)), delta, np.random.default_rng(5))
    start = time.perf_counter()
    total = np.zeros(d)
    total_sq = np.zeros(d)
    for _ in range(steps):
        state = langevin_step(model, state)
        total += state.y.sum(axis=0)
        total_sq += (state.y**2).sum(axis=0)
    elapsed = time.perf_counter() - start
    count = steps * chains
    mean = total / count
    var = total_sq / count - mean**2
    ok = bool(np.all(np.abs(mean) <= 0.05) and np.all((var >= 0.9) & (var <= 1.1)) and elapsed < 10)
    report(5, ok, f"{steps} steps x {chains} pooled chains: mean {np.round(mean, 4).tolist()} (|m| <= 0.05), "
                  f"variance {np.round(var, 4).tolist()} (in [0.9, 1.1]), {elapsed:.1f} s (< 10)")
    assert ok


# 6 -------------------------------------------------------------------------


def test_criterion_6_walk_jump_traversal(report):
    spec = BENCHMARKS["wide"]
    model, _, _ = trained("wide", 0.5, "uvb")
    res = walk_jump(model, WalkJumpSchedule(5000, period=10), np.random.default_rng(0), delta=0.2)
    means = spec.mean_array
    label = np.argmin(((res.x_hat[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    frac = np.bincount(label, minlength=len(means)) / len(label)
    offsets = [float(np.abs(res.x_hat[label == c].mean(axis=0) - means[c]).max()) if np.any(label == c) else np.inf
               for c in range(len(means))]
    ok = bool(frac.min() >= 0.05 and max(offsets) <= 0.1)
    report(6, ok, f"{len(label)} jumps, mode shares {np.round(frac, 3).tolist()} (each >= 0.05), "
                  f"max mode-mean offset {max(offsets):.3f} (<= 0.1)")
    assert ok


# 7 -------------------------------------------------------------------------


def test_criterion_7_diagnostics_direction(report, capsys):
    sigma = 0.5
    uvb, ds, _ = trained("corners", sigma, "uvb")
    vae, _, _ = trained("corners", sigma, "vae")
    y = ds.test + sigma * np.random.default_rng(70).standard_normal(ds.test.shape)
    u = vae_diagnostics(uvb, y, np.random.default_rng(71))
    v = vae_diagnostics(vae, y, np.random.default_rng(71))
    tables = diagnostics_tables(sigma, u, v)
    with capsys.disabled():
        print("\n" + tables)
    blocks = [b for b in tables.split("\n\n") if b.strip()]
    shaped = len(blocks) == 2 and all(b.splitlines()[0].split("|")[1:] and "UVB" in b and "VAE" in b for b in blocks)
    ok = u[0] > v[0] and shaped
    report(7, ok, f"mean KL UVB {u[0]:.3f} > VAE {v[0]:.3f}; reconstruction UVB {u[1]:.3f}, VAE {v[1]:.3f}; "
                  f"KL and reconstruction tables emitted")
    assert ok


# 8 -------------------------------------------------------------------------


def test_criterion_8_two_step_estimator(report):
    spec, sigma = BENCHMARKS["far"], 1.0
    model, _, _ = trained("far", sigma, "uvb")
    rng = np.random.default_rng(3)
    x = gmm_sample(spec, 5000, rng)
    y = x + sigma * rng.standard_normal(x.shape)
    x1 = bayes_estimate(model, y, model.draw_eps(len(y), rng))
    x2 = bayes_estimate(model, x1, model.draw_eps(len(y), rng))

    def nearest(z):
        return np.sqrt(((z[:, None, :] - spec.mean_array[None]) ** 2).sum(-1)).min(axis=1)

    frac = float(np.mean(nearest(x2) < nearest(x1)))
    ok = frac >= 0.8
    report(8, ok, f"x_hat(x_hat(y)) closer to the nearest mode than x_hat(y) on {frac:.1%} of 5000 points (>= 80%)")
    assert ok


# 9 -------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path, report):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("dz = 4\nenc_hidden = 16, 16\ndec_hidden = 16, 16\ndec_readout = linear\n"
                   "epochs = 3\nn_train = 500\nn_test = 200\nsigma = 0.5\nlr = 0.001\nseed = 9\n"
                   "deterministic = true\ndata = gmm:corners\n")
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / run)]) == 0
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("metrics.csv", "checkpoint.uvb")}
    ok = all(same.values())
    report(9, ok, "byte-identical " + ", ".join(f"{k}: {v}" for k, v in same.items()))
    assert ok


# 10 ------------------------------------------------------------------------

_MNIST_NAMES = ("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz", "train-images.idx3-ubyte")


def _find_mnist() -> Path | None:
    roots = [os.environ.get("UVB_MNIST_DIR", ""), "~/.cache/mnist", "~/data/mnist", "/data/mnist", "./mnist"]
    for root in roots:
        if not root:
            continue
        for name in _MNIST_NAMES:
            path = Path(root).expanduser() / name
            if path.is_file():
                return path
    return None


def test_criterion_10_mnist_smoke(tmp_path, report):
    images = _find_mnist()
    if images is None:
        report(10, None, "optional MNIST smoke skipped: no IDX image file found (set UVB_MNIST_DIR)")
        pytest.skip("MNIST IDX files not available")
    n = min(len(mnist_load_idx(images).train), 10_000)
    cfg = tmp_path / "mnist.cfg"
    cfg.write_text(f"data = idx:{images}\nmax_images = {n}\nsplit_fraction = 0.9\nsigma = 1.0\n"
                   "dz = 32\nenc_hidden = 256\ndec_hidden = 256\nepochs = 10\nlr = 0.001\nbatch = 128\n")
    start = time.process_time()
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    assert main(["denoise", str(tmp_path / "checkpoint.uvb"), "--count", "10", "--out-dir", str(tmp_path)]) == 0
    seconds = time.process_time() - start
    last = (tmp_path / "metrics.csv").read_text().splitlines()
    header, row = last[0].split(","), last[-1].split(",")
    per_dim = float(row[header.index("test_loss_per_dim")])
    grid = (tmp_path / "denoise.pgm").read_bytes()
    ok = per_dim < 1.0 and grid.startswith(b"P5") and seconds <= 1800
    report(10, ok, f"{n} images: test loss per dim {per_dim:.4f} (< sigma^2 = 1), "
                   f"PGM grid written, {seconds:.0f} CPU-s (<= 1800)")
    assert ok
