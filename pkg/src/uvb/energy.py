"""Energy parameterizations of the smoothed variable Y and the quantities derived from them.

Every model exposes ``energy(y, tensors, eps)`` returning one energy per row of
``y``.  The same code runs eagerly on arrays or records onto a tape when any
operand is a :class:`~uvb.diffcore.Node`; scores are obtained by reverse
differentiation of the summed energies with respect to ``y``.

Latent noise for the UVB energy is passed explicitly as a ``(K * n, d_z)``
matrix whose row ``j * n + i`` is draw ``j`` for example ``i``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import GmmSpec
from .nets import MlpSpec, ParamSet, init_params, layer_params, mlp_apply


def kl_diag_gaussian(mu, lam):
    """KL( N(mu, diag(exp(lam))) || N(0, I) ), summed over the last axis.

    ``lam`` is the log-variance.  Vectors give a scalar, ``(n, d_z)`` batches
    give one value per row.
    """
    shape_mu = mu.shape if isinstance(mu, dc.Node) else np.shape(mu)
    shape_lam = lam.shape if isinstance(lam, dc.Node) else np.shape(lam)
    if shape_mu != shape_lam:
        raise ValueError(f"mu and lambda lengths differ: {shape_mu} vs {shape_lam}")
    terms = dc.sub(dc.sub(dc.add(lam, 1.0), dc.mul(mu, mu)), dc.exp(lam))
    if len(shape_mu) == 1:
        return dc.scale(dc.sum_all(terms), -0.5)
    return dc.scale(dc.sum_cols(terms), -0.5)


def reparam_sample(mu, lam, eps):
    """z = mu + exp(lam / 2) * eps."""
    return dc.add(mu, dc.mul(dc.exp(dc.scale(lam, 0.5)), eps))


@dataclass(frozen=True)
class EnergyModel:
    """Common interface: a noise level plus parameterized networks."""

    sigma: float
    params: ParamSet | None = field(default=None, compare=False)

    kind = "abstract"
    dz = 0
    k_samples = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    @property
    def nets(self) -> dict[str, MlpSpec]:
        return {}

    @property
    def tensors(self) -> dict[str, np.ndarray]:
        return self.params.tensors() if self.params is not None else {}

    @property
    def needs_eps(self) -> bool:
        return self.dz > 0

    def draw_eps(self, n: int, rng: np.random.Generator) -> np.ndarray | None:
        if not self.needs_eps:
            return None
        return rng.standard_normal((self.k_samples * n, self.dz))

    def with_params(self, values: np.ndarray):
        return dataclasses.replace(self, params=self.params.with_values(np.asarray(values, dtype=float)))

    def energy(self, y, tensors, eps=None):
        raise NotImplementedError


@dataclass(frozen=True)
class UVB(EnergyModel):
    """Negative ELBO of a Gaussian VAE on y, used as an energy function."""

    d: int = 2
    dz: int = 100
    enc_hidden: tuple[int, ...] = (200,)
    dec_hidden: tuple[int, ...] = (2000,)
    dec_readout: str = "logistic"
    k_samples: int = 1

    kind = "uvb"

    def __post_init__(self):
        super().__post_init__()
        if self.k_samples < 1:
            raise ValueError("k_samples must be >= 1")
        object.__setattr__(self, "enc_hidden", tuple(self.enc_hidden))
        object.__setattr__(self, "dec_hidden", tuple(self.dec_hidden))

    @property
    def nets(self) -> dict[str, MlpSpec]:
        # the two encoder heads share an architecture, not weights
        return {
            "enc_mu": MlpSpec(self.d, self.enc_hidden, self.dz),
            "enc_lam": MlpSpec(self.d, self.enc_hidden, self.dz),
            "dec": MlpSpec(self.dz, self.dec_hidden, self.d, readout=self.dec_readout),
        }

    def encode(self, y, tensors):
        nets = self.nets
        mu = mlp_apply(nets["enc_mu"], layer_params(tensors, "enc_mu", nets["enc_mu"]), y)
        lam = mlp_apply(nets["enc_lam"], layer_params(tensors, "enc_lam", nets["enc_lam"]), y)
        return mu, lam

    def decode(self, z, tensors):
        spec = self.nets["dec"]
        return mlp_apply(spec, layer_params(tensors, "dec", spec), z)

    def terms(self, y, tensors, eps):
        """Per-example (reconstruction / (2 sigma^2), KL) for a batch ``y``."""
        if eps is None:
            raise ValueError("UVB energy needs explicit latent noise draws")
        k = self.k_samples
        n = y.shape[0] if isinstance(y, dc.Node) else np.shape(y)[0]
        eps_shape = eps.shape if isinstance(eps, dc.Node) else np.shape(eps)
        if eps_shape != (k * n, self.dz):
            raise ValueError(f"eps must have shape {(k * n, self.dz)}, got {eps_shape}")
        mu, lam = self.encode(y, tensors)
        kl = kl_diag_gaussian(mu, lam)
        if k > 1:
            mu, lam, y = dc.tile_rows(mu, k), dc.tile_rows(lam, k), dc.tile_rows(y, k)
        z = reparam_sample(mu, lam, eps)
        resid = dc.sub(y, self.decode(z, tensors))
        recon = dc.sum_cols(dc.mul(resid, resid))
        if k > 1:
            recon = dc.fold_rows(recon, k)
        recon = dc.scale(recon, 1.0 / (2.0 * self.sigma**2 * k))
        return recon, kl

    def energy(self, y, tensors, eps=None):
        recon, kl = self.terms(y, tensors, eps)
        return dc.add(recon, kl)


@dataclass(frozen=True)
class DEEN(EnergyModel):
    """Energy given directly by a scalar-output MLP."""

    d: int = 2
    hidden: tuple[int, ...] = (64, 64)

    kind = "deen"

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def nets(self) -> dict[str, MlpSpec]:
        return {"energy": MlpSpec(self.d, self.hidden, 1)}

    def energy(self, y, tensors, eps=None):
        spec = self.nets["energy"]
        return dc.sum_cols(mlp_apply(spec, layer_params(tensors, "energy", spec), y))


@dataclass(frozen=True)
class QuadraticEnergy(EnergyModel):
    """f(y) = ||y||^2 / 2, the energy of a standard normal."""

    d: int = 1
    kind = "quadratic"

    def energy(self, y, tensors=None, eps=None):
        return dc.scale(dc.sum_cols(dc.mul(y, y)), 0.5)


@dataclass(frozen=True)
class OracleEnergy(EnergyModel):
    """Exact energy of a Gaussian mixture smoothed at noise level ``sigma``."""

    gmm: GmmSpec | None = None
    kind = "oracle"

    def __post_init__(self):
        super().__post_init__()
        if self.gmm is None:
            raise ValueError("OracleEnergy needs a GmmSpec")

    @property
    def d(self) -> int:
        return self.gmm.dim

    def energy(self, y, tensors=None, eps=None):
        # -log sum_c w_c N(y; m_c, s2 I), dropping the y-independent constant
        gmm = self.gmm.support()
        s2 = gmm.variance + self.sigma**2
        means = gmm.mean_array
        n_comp = means.shape[0]
        offsets = np.log(np.asarray(gmm.weights)) - 0.5 * np.sum(means * means, axis=1) / s2
        ysq = dc.sum_cols(dc.mul(y, y))
        logits = dc.add_row(dc.scale(dc.matmul(y, means.T), 1.0 / s2), offsets)
        top = dc.row_max(logits)
        shifted = dc.sub(logits, dc.broadcast_cols(top, n_comp))
        lse = dc.add(dc.log(dc.sum_cols(dc.exp(shifted))), top)
        return dc.sub(dc.scale(ysq, 0.5 / s2), lse)


def build_uvb(d, sigma, dz=100, enc_hidden=(200,), dec_hidden=(2000,), dec_readout="logistic", k_samples=1, seed=0) -> UVB:
    shell = UVB(sigma=sigma, d=d, dz=dz, enc_hidden=tuple(enc_hidden), dec_hidden=tuple(dec_hidden),
                dec_readout=dec_readout, k_samples=k_samples)
    return dataclasses.replace(shell, params=init_params(shell.nets, seed))


def build_deen(d, sigma, hidden=(64, 64), seed=0, zero_readout=False) -> DEEN:
    shell = DEEN(sigma=sigma, d=d, hidden=tuple(hidden))
    zero = ("energy",) if zero_readout else ()
    return dataclasses.replace(shell, params=init_params(shell.nets, seed, zero_readout=zero))


# ---------------------------------------------------------------------------
# evaluation


def _as_batch(y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        return y[None, :], True
    if y.ndim != 2:
        raise ValueError(f"y must be a vector or a matrix, got {y.ndim}-D")
    return y, False


class EnergyProgram:
    """Recorded tape for sum_i f(y_i) and its y-gradient at one batch size.

    Built once per batch shape and replayed for each new (y, eps), which is
    what the Langevin sampler and the evaluation helpers call in a loop.
    """

    def __init__(self, model: EnergyModel, n: int):
        self.model = model
        self.n = n
        tape = dc.Tape()
        self.y = tape.input(np.zeros((n, model.d)), name="y")
        names = list(model.params.layout) if model.params is not None else []
        tensors = model.tensors
        self.param_nodes = [tape.param(tensors[name], name=name) for name in names]
        nodes = dict(zip(names, self.param_nodes))
        self.eps = None
        if model.needs_eps:
            self.eps = tape.feed(np.zeros((model.k_samples * n, model.dz)), name="eps")
        self.energies = model.energy(self.y, nodes, self.eps)
        self.total = tape.set_output(dc.sum_all(self.energies))
        self._param_values = [tensors[name] for name in names]
        self.tape = tape

    def __call__(self, y: np.ndarray, eps: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Return (energies, gradient of the energies) at the batch ``y``."""
        feeds = None
        if self.eps is not None:
            if eps is None:
                raise ValueError("this model needs latent noise draws")
            feeds = [eps]
        self.tape.forward(inputs=[y], params=self._param_values, feeds=feeds)
        (g,) = dc.grad(self.total, [self.y])
        return self.energies.value.copy(), g


_PROGRAMS: dict[int, tuple[EnergyModel, dict[int, EnergyProgram]]] = {}


def program_for(model: EnergyModel, n: int) -> EnergyProgram:
    entry = _PROGRAMS.get(id(model))
    if entry is None or entry[0] is not model:
        entry = (model, {})
        if len(_PROGRAMS) > 32:
            _PROGRAMS.clear()
        _PROGRAMS[id(model)] = entry
    progs = entry[1]
    if n not in progs:
        progs[n] = EnergyProgram(model, n)
    return progs[n]


def energy_value(model: EnergyModel, y, eps=None):
    y2, single = _as_batch(y)
    e = np.asarray(model.energy(y2, model.tensors, eps))
    return float(e[0]) if single else e


def deen_energy(model: DEEN, y):
    return energy_value(model, y)


def uvb_energy(model: UVB, y, eps):
    return energy_value(model, y, eps)


def energy_grad(model: EnergyModel, y, eps=None) -> np.ndarray:
    y2, single = _as_batch(y)
    _, g = program_for(model, y2.shape[0])(y2, eps)
    return g[0] if single else g


def score(model: EnergyModel, y, eps=None) -> np.ndarray:
    """-grad_y f(y), the model's estimate of grad log p(y)."""
    return -energy_grad(model, y, eps)


def bayes_estimate(model: EnergyModel, y, eps=None) -> np.ndarray:
    """x_hat(y) = y - sigma^2 grad f(y)."""
    y_arr = np.asarray(y, dtype=np.float64)
    return y_arr - model.sigma**2 * energy_grad(model, y_arr, eps)
