"""Noisy pairs, the denoising and ELBO objectives, Adam, and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .data import Dataset
from .energy import UVB, EnergyModel, build_deen, build_uvb
from .nets import matched_width

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "epoch",
    "train_loss_total",
    "train_loss_per_dim",
    "test_loss_total",
    "test_loss_per_dim",
    "kl_mean",
    "recon_mean",
    "wall_seconds",
]

# stream ids for counter-based seeding: default_rng([seed, epoch, stream])
_STREAM_TRAIN = 1
_STREAM_TEST = 2
_TEST_EPOCH = 2**31 - 1


class TrainingDivergence(ArithmeticError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.batch = batch


def make_noisy_pairs(x: np.ndarray, sigma: float, rng: np.random.Generator, draws: int = 1):
    """Return (x, y) with y = x + sigma * N(0, I); each clean row appears ``draws`` times."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("clean samples must be finite")
    if draws > 1:
        x = np.concatenate([x] * draws, axis=0)
    return x, x + sigma * rng.standard_normal(x.shape)


# ---------------------------------------------------------------------------
# model construction


def uvb_from_config(config: TrainConfig, d: int) -> UVB:
    return build_uvb(
        d,
        config.sigma,
        dz=config.dz,
        enc_hidden=config.enc_hidden,
        dec_hidden=config.dec_hidden,
        dec_readout=config.dec_readout,
        k_samples=config.k_samples,
        seed=config.seed,
    )


def deen_hidden_for(config: TrainConfig, d: int) -> tuple[int, ...]:
    if config.deen_hidden:
        return config.deen_hidden
    shell = UVB(sigma=config.sigma, d=d, dz=config.dz, enc_hidden=config.enc_hidden,
                dec_hidden=config.dec_hidden, dec_readout=config.dec_readout)
    target = sum(spec.n_params() for spec in shell.nets.values())
    return (matched_width(target, d, config.deen_depth),) * config.deen_depth


def model_from_config(config: TrainConfig, d: int) -> EnergyModel:
    if config.model in ("uvb", "vae"):
        return uvb_from_config(config, d)
    return build_deen(d, config.sigma, hidden=deen_hidden_for(config, d), seed=config.seed)


# ---------------------------------------------------------------------------
# objectives


class LossProgram:
    """Tape for one minibatch shape: loss value, parameter gradient, UVB terms.

    ``objective`` is ``"eb"`` for the empirical-Bayes denoising loss
    mean_i ||x_i - y_i + sigma^2 grad f(y_i)||^2, or ``"elbo"`` for the mean
    energy itself (the negative ELBO when the model is a UVB).
    """

    def __init__(self, model: EnergyModel, n: int, objective: str = "eb"):
        if objective not in ("eb", "elbo"):
            raise ValueError(f"unknown objective {objective!r}")
        self.model = model
        self.n = n
        self.objective = objective
        d = model.d
        tape = dc.Tape()
        y = tape.input(np.zeros((n, d)), name="y")
        x = tape.feed(np.zeros((n, d)), name="x")
        eps = None
        if model.needs_eps:
            eps = tape.feed(np.zeros((model.k_samples * n, model.dz)), name="eps")
        names = list(model.params.layout) if model.params is not None else []
        tensors = model.tensors
        self.param_nodes = [tape.param(tensors[name], name=name) for name in names]
        nodes = dict(zip(names, self.param_nodes))

        if isinstance(model, UVB):
            recon, kl = model.terms(y, nodes, eps)
            energies = dc.add(recon, kl)
            self.recon = dc.mean_all(recon)
            self.kl = dc.mean_all(kl)
        else:
            energies = model.energy(y, nodes, eps)
            self.recon = self.kl = None

        if objective == "eb":
            (gy,) = dc.grad(dc.sum_all(energies), [y], create_graph=True)
            resid = dc.add(dc.sub(x, y), dc.scale(gy, model.sigma**2))
            loss = dc.mean_all(dc.sum_cols(dc.mul(resid, resid)))
        else:
            loss = dc.mean_all(energies)
        self.loss = tape.set_output(loss)
        self.y, self.x, self.eps = y, x, eps
        self.tape = tape

    def _bind(self, x, y, eps, params):
        feeds = [x] if self.eps is None else [x, eps]
        self.tape.forward(inputs=[y], params=params, feeds=feeds)

    def value(self, x, y, eps, params) -> tuple[float, float | None, float | None]:
        self._bind(x, y, eps, params)
        kl = float(self.kl.value) if self.kl is not None else None
        recon = float(self.recon.value) if self.recon is not None else None
        return float(self.loss.value), kl, recon

    def value_and_grad(self, x, y, eps, params) -> tuple[float, list[np.ndarray]]:
        self._bind(x, y, eps, params)
        grads = dc.grad(self.loss, self.param_nodes)
        return float(self.loss.value), grads


class ProgramCache:
    def __init__(self, model: EnergyModel, objective: str):
        self.model = model
        self.objective = objective
        self._programs: dict[int, LossProgram] = {}

    def __call__(self, n: int) -> LossProgram:
        prog = self._programs.get(n)
        if prog is None:
            prog = self._programs[n] = LossProgram(self.model, n, self.objective)
        return prog


def _param_list(model: EnergyModel, values: np.ndarray | None = None) -> list[np.ndarray]:
    if model.params is None:
        return []
    params = model.params if values is None else model.params.with_values(values)
    return [params.get(name) for name in params.layout]


def eb_loss(model: EnergyModel, x, y, eps=None) -> float:
    """Mean over pairs of ||x - x_hat(y)||^2 (total over dimensions)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return LossProgram(model, x.shape[0], "eb").value(x, y, eps, _param_list(model))[0]


def vae_elbo_loss(model: UVB, y, eps) -> float:
    """Mean negative ELBO (the UVB energy) over the batch."""
    if not isinstance(model, UVB):
        raise TypeError("the ELBO objective needs a UVB model")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return LossProgram(model, y.shape[0], "elbo").value(y, y, eps, _param_list(model))[0]


def eb_loss_grad(model: EnergyModel, x, y, eps=None) -> tuple[float, np.ndarray]:
    """Loss and flat parameter gradient of the denoising objective."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    loss, grads = LossProgram(model, x.shape[0], "eb").value_and_grad(x, y, eps, _param_list(model))
    return loss, np.concatenate([g.ravel() for g in grads])


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new params, new state)."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and moments must share a shape")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: EnergyModel
    adam: AdamState
    epoch: int
    rows: list[dict] = field(default_factory=list)
    config: TrainConfig | None = None

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.rows)


def metrics_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return "nan"
    return repr(float(v))


def evaluate_loss(model: EnergyModel, x: np.ndarray, rng: np.random.Generator, batch: int = 512,
                  objective: str = "eb", programs: ProgramCache | None = None) -> dict:
    """Mean objective over ``x`` with one noise draw per row (plus UVB term means)."""
    programs = programs or ProgramCache(model, objective)
    params = _param_list(model)
    x, y = make_noisy_pairs(x, model.sigma, rng)
    totals = {"loss": 0.0, "kl": 0.0, "recon": 0.0}
    n = x.shape[0]
    for start in range(0, n, batch):
        xb, yb = x[start : start + batch], y[start : start + batch]
        eps = model.draw_eps(len(xb), rng)
        loss, kl, recon = programs(len(xb)).value(xb, yb, eps, params)
        totals["loss"] += loss * len(xb)
        if kl is not None:
            totals["kl"] += kl * len(xb)
            totals["recon"] += recon * len(xb)
    out = {k: v / n for k, v in totals.items()}
    if not isinstance(model, UVB):
        out["kl"] = out["recon"] = None
    return out


def train_loop(config: TrainConfig, dataset: Dataset, model: EnergyModel | None = None,
               adam: AdamState | None = None, start_epoch: int = 0, out_dir=None,
               progress=None) -> TrainResult:
    """Fixed-budget Adam training at constant learning rate.

    All randomness is derived from ``(config.seed, epoch)`` so a run resumed
    from a checkpoint continues exactly as the uninterrupted run would.
    """
    from .checkpoint import Checkpoint, save_checkpoint

    d = dataset.dim
    if model is None:
        model = model_from_config(config, d)
    if config.model == "vae" and not isinstance(model, UVB):
        raise TypeError("ELBO training needs a UVB model")
    objective = "elbo" if config.model == "vae" else "eb"
    values = model.params.values.copy()
    adam = adam or AdamState.zeros(values.size)
    programs = ProgramCache(model, objective)
    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch, _STREAM_TRAIN])
        x, y = make_noisy_pairs(dataset.train, config.sigma, rng, config.noise_draws)
        perm = rng.permutation(x.shape[0])
        x, y = x[perm], y[perm]
        running = 0.0
        for b, start in enumerate(range(0, x.shape[0], config.batch)):
            xb, yb = x[start : start + config.batch], y[start : start + config.batch]
            eps = model.draw_eps(len(xb), rng)
            params = _param_list(model, values)
            try:
                loss, grads = programs(len(xb)).value_and_grad(xb, yb, eps, params)
            except dc.EvaluationError as exc:
                raise TrainingDivergence(epoch + 1, b, str(exc)) from exc
            flat = np.concatenate([g.ravel() for g in grads])
            if not (np.isfinite(loss) and np.all(np.isfinite(flat))):
                raise TrainingDivergence(epoch + 1, b)
            values, adam = adam_step(values, flat, adam, config.lr)
            running += loss * len(xb)
        train_loss = running / x.shape[0]

        model = model.with_params(values)
        programs.model = model
        test_rng = np.random.default_rng([config.seed, _TEST_EPOCH, _STREAM_TEST])
        test = evaluate_loss(model, dataset.test, test_rng, config.batch, objective, programs) if len(dataset.test) else {
            "loss": float("nan"), "kl": None, "recon": None}
        wall = 0.0 if config.deterministic else time.perf_counter() - t0
        row = {
            "epoch": epoch + 1,
            "train_loss_total": train_loss,
            "train_loss_per_dim": train_loss / d,
            "test_loss_total": test["loss"],
            "test_loss_per_dim": test["loss"] / d,
            "kl_mean": test["kl"],
            "recon_mean": test["recon"],
            "wall_seconds": wall,
        }
        rows.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d train %.5g test %.5g", epoch + 1, train_loss, test["loss"])
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_{epoch + 1:05d}.uvb",
                            Checkpoint(config, model, adam, epoch + 1))

    result = TrainResult(model, adam, max(start_epoch, config.epochs), rows, config)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.uvb", Checkpoint(config, model, adam, result.epoch))
        (out_dir / "metrics.csv").write_text(result.metrics_csv())
    return result

