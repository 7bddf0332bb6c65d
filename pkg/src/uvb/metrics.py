"""Evaluation: loss tables, oracle score error, Bayes-risk gap, encoder/decoder diagnostics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import Dataset, GmmSpec, gmm_sample, gmm_smoothed_oracle
from .energy import UVB, EnergyModel, energy_grad
from .train import evaluate_loss

# Reported MNIST / CIFAR10 values, kept for output footers only. The desk
# models are MLPs trained for minutes, so these are never compared against.
REFERENCE_MNIST_LOSSES = {
    # sigma: (uvb_train, deen_train, uvb_test, deen_test)
    0.3: (2.60, 2.77, 3.01, 2.89),
    0.4: (3.84, 4.43, 4.42, 4.48),
    0.5: (5.09, 6.45, 5.94, 6.47),
    0.6: (6.83, 8.87, 7.55, 8.83),
    0.7: (8.72, 11.5, 9.27, 11.5),
    0.8: (10.6, 14.4, 11.1, 14.3),
    0.9: (12.6, 17.3, 13.0, 17.1),
    1.0: (14.7, 20.1, 15.0, 19.9),
}
REFERENCE_PARAM_COUNTS = {"mnist": (2.7e7, 2.6e7), "cifar10": (4.1e7, 3.6e7)}
REFERENCE_KL_SIGMA1 = {"uvb": 692.0, "vae": 3.70}
REFERENCE_RECON_SIGMA1 = {"uvb": 103.0, "vae": 51.5}

CHUNK = 2048


def _grad_chunked(model: EnergyModel, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(y)
    for start in range(0, y.shape[0], CHUNK):
        yb = y[start : start + CHUNK]
        out[start : start + CHUNK] = energy_grad(model, yb, model.draw_eps(len(yb), rng))
    return out


def model_score(model: EnergyModel, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return -_grad_chunked(model, np.atleast_2d(np.asarray(y, dtype=float)), rng)


def model_bayes_estimate(model: EnergyModel, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return y - model.sigma**2 * _grad_chunked(model, y, rng)


def check_matched(count_a: int, count_b: int, tolerance: float = 0.05) -> float:
    """Relative parameter-count difference; raises when it exceeds ``tolerance``."""
    rel = abs(count_a - count_b) / max(count_a, count_b)
    if rel > tolerance:
        raise ValueError(f"parameter counts {count_a} and {count_b} differ by {rel:.1%} (> {tolerance:.0%})")
    return rel


# ---------------------------------------------------------------------------
# loss table


LOSS_TABLE_COLUMNS = [
    "sigma",
    "uvb_train", "uvb_test", "deen_train", "deen_test",
    "uvb_train_per_dim", "uvb_test_per_dim", "deen_train_per_dim", "deen_test_per_dim",
    "uvb_generalization_gap", "deen_generalization_gap",
]


def loss_table(models_by_sigma: Mapping[float, Mapping[str, EnergyModel]], dataset: Dataset,
               seed: int = 0) -> list[dict]:
    """Denoising loss of a UVB/DEEN pair per noise level, on train and test rows.

    Both models at one sigma see identical noise draws.
    """
    rows = []
    d = dataset.dim
    for sigma in sorted(models_by_sigma):
        pair = models_by_sigma[sigma]
        row = {"sigma": float(sigma)}
        for kind in ("uvb", "deen"):
            model = pair.get(kind)
            if model is None:
                raise KeyError(f"no {kind} model for sigma={sigma}")
            if abs(model.sigma - sigma) > 1e-12:
                raise ValueError(f"{kind} model was trained at sigma={model.sigma}, table row is {sigma}")
            for split, x in (("train", dataset.train), ("test", dataset.test)):
                rng = np.random.default_rng([seed, int(round(sigma * 1e6)), 0 if split == "train" else 1])
                loss = evaluate_loss(model, x, rng)["loss"]
                row[f"{kind}_{split}"] = loss
                row[f"{kind}_{split}_per_dim"] = loss / d
            row[f"{kind}_generalization_gap"] = row[f"{kind}_test"] - row[f"{kind}_train"]
        rows.append(row)
    return rows


def table_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["nan" if row.get(c) is None else repr(float(row[c])) for c in columns])
    return buf.getvalue()


def loss_table_text(rows: list[dict], per_dim: bool = False) -> str:
    """Sigma across the top, one row per model/split, reference values in a footer."""
    suffix = "_per_dim" if per_dim else ""
    lines = ["sigma        " + "".join(f"{r['sigma']:>10.2f}" for r in rows)]
    for label, key in (("UVB (train)", "uvb_train"), ("DEEN (train)", "deen_train"),
                       ("UVB (test)", "uvb_test"), ("DEEN (test)", "deen_test")):
        lines.append(f"{label:<13}" + "".join(f"{r[key + suffix]:>10.4g}" for r in rows))
    for label, kind in (("UVB gap", "uvb"), ("DEEN gap", "deen")):
        gaps = [r[f"{kind}_test{suffix}"] - r[f"{kind}_train{suffix}"] for r in rows]
        lines.append(f"{label:<13}" + "".join(f"{g:>10.4g}" for g in gaps))
    ref = REFERENCE_MNIST_LOSSES[1.0]
    lines.append(f"# reference (MNIST ConvNets, sigma=1): UVB {ref[0]}/{ref[2]}, DEEN {ref[1]}/{ref[3]} (train/test)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# oracle comparisons


def score_error(model: EnergyModel, gmm: GmmSpec, sigma: float, n: int,
                rng: np.random.Generator) -> tuple[float, float]:
    """(E||s_model - s_true||^2, same divided by E||s_true||^2) on fresh y draws."""
    x = gmm_sample(gmm, n, rng)
    y = x + sigma * rng.standard_normal(x.shape)
    true = gmm_smoothed_oracle(gmm, sigma, y).score
    est = model_score(model, y, rng)
    mse = float(np.mean(np.sum((est - true) ** 2, axis=1)))
    return mse, mse / float(np.mean(np.sum(true**2, axis=1)))


@dataclass
class RiskGap:
    gap: float
    stderr: float
    model_risk: float
    oracle_risk: float

    @property
    def relative(self) -> float:
        return self.gap / self.oracle_risk


def bayes_risk_gap(model: EnergyModel, gmm: GmmSpec, sigma: float, n: int,
                   rng: np.random.Generator) -> RiskGap:
    """Excess denoising risk over the exact posterior mean, on shared (x, y) draws."""
    x = gmm_sample(gmm, n, rng)
    y = x + sigma * rng.standard_normal(x.shape)
    model_err = np.sum((x - model_bayes_estimate(model, y, rng)) ** 2, axis=1)
    oracle_err = np.sum((x - gmm_smoothed_oracle(gmm, sigma, y).bayes_mean) ** 2, axis=1)
    diff = model_err - oracle_err
    return RiskGap(float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n)),
                   float(model_err.mean()), float(oracle_err.mean()))


# ---------------------------------------------------------------------------
# encoder / decoder diagnostics


def vae_diagnostics(model: UVB, y: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
    """Mean KL(q(z|y) || p(z)) and mean ||y - mu_y(z)||^2 / (2 sigma^2) over ``y``."""
    if not isinstance(model, UVB):
        raise TypeError("diagnostics need a UVB model")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    kl_sum = recon_sum = 0.0
    tensors = model.tensors
    for start in range(0, y.shape[0], CHUNK):
        yb = y[start : start + CHUNK]
        recon, kl = model.terms(yb, tensors, model.draw_eps(len(yb), rng))
        kl_sum += float(np.sum(kl))
        recon_sum += float(np.sum(recon))
    return kl_sum / y.shape[0], recon_sum / y.shape[0]


def diagnostics_tables(sigma: float, uvb: tuple[float, float], vae: tuple[float, float]) -> str:
    """Encoder (KL) and decoder (reconstruction) tables, UVB vs ELBO-trained VAE."""
    kl_label = "<D_KL[q(z|y), p(z)]>"
    rec_label = "<E_q ||y - mu_y(z)||^2>/(2 sigma^2)"
    width = max(len(kl_label), len(rec_label))
    head = f"{'sigma=' + format(sigma, 'g'):<{width}} | {'UVB':>10} | {'VAE':>10}"
    rule = "-" * len(head)
    return "\n".join([
        head, rule, f"{kl_label:<{width}} | {uvb[0]:>10.4g} | {vae[0]:>10.4g}",
        "",
        head, rule, f"{rec_label:<{width}} | {uvb[1]:>10.4g} | {vae[1]:>10.4g}",
        f"# reference (MNIST, sigma=1): KL {REFERENCE_KL_SIGMA1['uvb']} vs {REFERENCE_KL_SIGMA1['vae']}, "
        f"reconstruction {REFERENCE_RECON_SIGMA1['uvb']} vs {REFERENCE_RECON_SIGMA1['vae']}",
    ]) + "\n"
