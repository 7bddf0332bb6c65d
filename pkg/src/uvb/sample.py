"""Walk-jump sampling: Langevin walks on the learned energy, Bayes-estimator jumps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import UVB, EnergyModel, bayes_estimate, energy_grad


class ChainDivergence(ArithmeticError):
    def __init__(self, step: int, message: str):
        super().__init__(f"chain diverged at step {step}: {message}")
        self.step = step


@dataclass
class ChainState:
    """Walker positions ``y`` (one row per independent chain) and step size."""

    y: np.ndarray
    delta: float
    rng: np.random.Generator
    t: int = 0

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("chain positions must be finite")


@dataclass(frozen=True)
class WalkJumpSchedule:
    steps: int
    period: int = 10
    warmup: int = 0
    init_low: float = 0.0
    init_high: float = 1.0
    include_initial: bool = True

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.steps < 0 or self.warmup < 0:
            raise ValueError("steps and warmup must be >= 0")


def langevin_step(model: EnergyModel, state: ChainState, eps=None, noise: bool = True,
                  radius: float | None = None) -> ChainState:
    """y <- y - delta^2 grad f(y) + sqrt(2) delta N(0, I).

    UVB models get fresh latent draws from the chain's generator unless
    ``eps`` is given (frozen-draw ablation).  ``noise=False`` turns the step
    into plain gradient descent with step size delta^2.
    """
    y = state.y
    if model.needs_eps and eps is None:
        eps = model.draw_eps(y.shape[0], state.rng)
    g = energy_grad(model, y, eps)
    y_new = y - state.delta**2 * g
    if noise:
        y_new = y_new + np.sqrt(2.0) * state.delta * state.rng.standard_normal(y.shape)
    t = state.t + 1
    if not np.all(np.isfinite(y_new)):
        raise ChainDivergence(t, "non-finite position")
    if radius is not None and np.any(np.linalg.norm(y_new, axis=1) > radius):
        raise ChainDivergence(t, f"|y| exceeded radius {radius:g}")
    out = object.__new__(ChainState)
    out.y, out.delta, out.rng, out.t = y_new, state.delta, state.rng, t
    return out


def default_radius(d: int) -> float:
    return 10.0 * np.sqrt(d)


@dataclass
class WalkJumpResult:
    steps: np.ndarray
    y: np.ndarray
    x_hat: np.ndarray | None


def walk_jump(model: EnergyModel, schedule: WalkJumpSchedule, rng: np.random.Generator,
              delta: float = 0.2, freeze_eps: bool = False, emit_jumps: bool = True,
              radius: float | None = None, y0: np.ndarray | None = None) -> WalkJumpResult:
    """Run one chain and jump to x_hat(y) every ``schedule.period`` steps.

    Jumps are read-only: they draw their latent noise from a generator split
    off before the walk starts, so the y-trajectory is identical whether or
    not jumps are emitted.
    """
    d = model.d
    walk_rng = np.random.default_rng(rng.integers(2**63))
    jump_rng = np.random.default_rng(rng.integers(2**63))
    if y0 is None:
        y0 = walk_rng.uniform(schedule.init_low, schedule.init_high, size=(1, d))
    state = ChainState(y0, delta, walk_rng)
    if radius is None:
        radius = default_radius(d)
    frozen = model.draw_eps(1, walk_rng) if (freeze_eps and model.needs_eps) else None

    steps, ys, jumps = [], [], []

    def emit():
        steps.append(state.t)
        ys.append(state.y[0].copy())
        if emit_jumps:
            eps = model.draw_eps(1, jump_rng)
            jumps.append(bayes_estimate(model, state.y, eps)[0])

    if schedule.include_initial and schedule.warmup == 0:
        emit()
    for _ in range(schedule.steps):
        state = langevin_step(model, state, eps=frozen, radius=radius)
        if state.t > schedule.warmup and (state.t - schedule.warmup) % schedule.period == 0:
            emit()
    return WalkJumpResult(
        np.array(steps, dtype=int),
        np.array(ys).reshape(-1, d),
        np.array(jumps).reshape(-1, d) if emit_jumps else None,
    )


def nebula_two_step(model: EnergyModel, y, rng: np.random.Generator | None = None, eps=None) -> np.ndarray:
    """Apply the Bayes estimator twice: x_hat(x_hat(y)).

    UVB models need latent draws for each application: pass ``eps`` as a
    pair of arrays or a generator to draw them from.
    """
    y = np.asarray(y, dtype=float)
    n = 1 if y.ndim == 1 else y.shape[0]
    if model.needs_eps:
        if eps is None:
            if rng is None:
                raise ValueError("UVB models need eps draws or an rng")
            eps = (model.draw_eps(n, rng), model.draw_eps(n, rng))
    else:
        eps = (None, None)
    first = bayes_estimate(model, y, eps[0])
    return bayes_estimate(model, first, eps[1])


def decoder_prior_sample(model: UVB, n: int, rng: np.random.Generator) -> np.ndarray:
    """Push z ~ N(0, I_dz) through the UVB decoder mean."""
    if not isinstance(model, UVB):
        raise TypeError("decoder sampling needs a UVB model")
    if n == 0:
        return np.zeros((0, model.d))
    z = rng.standard_normal((n, model.dz))
    return np.asarray(model.decode(z, model.tensors))
