import numpy as np
import pytest

from uvb.data import GmmSpec, point_masses
from uvb.energy import OracleEnergy, QuadraticEnergy, build_deen, build_uvb, energy_value
from uvb.sample import (
    ChainDivergence,
    ChainState,
    WalkJumpSchedule,
    decoder_prior_sample,
    langevin_step,
    nebula_two_step,
    walk_jump,
)

TANH_TANH1 = 0.6420149920119997  # tanh(tanh(1))


def test_zero_step_size_is_identity():
    y0 = np.array([[0.3, -1.0]])
    state = ChainState(y0, 0.0, np.random.default_rng(0))
    for _ in range(5):
        state = langevin_step(QuadraticEnergy(sigma=1.0, d=2), state)
    np.testing.assert_array_equal(state.y, y0)
    assert state.t == 5


def test_fixed_seed_reproduces_chain():
    model = build_deen(2, 0.5, hidden=(6,), seed=1)
    runs = [walk_jump(model, WalkJumpSchedule(40, period=5), np.random.default_rng(3)) for _ in range(2)]
    np.testing.assert_array_equal(runs[0].y, runs[1].y)
    np.testing.assert_array_equal(runs[0].x_hat, runs[1].x_hat)
    assert runs[0].steps.tolist() == [0, 5, 10, 15, 20, 25, 30, 35, 40]


def test_quadratic_stationary_variance():
    # exact AR(1) variance of the discretized chain is 1 / (1 - delta^2 / 2)
    delta = 0.3
    state = ChainState(np.zeros((64, 1)), delta, np.random.default_rng(0))
    model = QuadraticEnergy(sigma=1.0, d=1)
    for _ in range(200):
        state = langevin_step(model, state)
    samples = []
    for _ in range(4000):
        state = langevin_step(model, state)
        samples.append(state.y[:, 0].copy())
    var = np.var(np.array(samples))
    assert var == pytest.approx(1 / (1 - delta**2 / 2), rel=0.03)


def test_jumps_do_not_perturb_walk():
    model = build_uvb(2, 0.5, dz=2, enc_hidden=(4,), dec_hidden=(4,), seed=0)
    sched = WalkJumpSchedule(30, period=3)
    a = walk_jump(model, sched, np.random.default_rng(8), emit_jumps=True)
    b = walk_jump(model, sched, np.random.default_rng(8), emit_jumps=False)
    np.testing.assert_array_equal(a.y, b.y)
    assert b.x_hat is None and a.x_hat.shape == a.y.shape


def test_single_step_emits_start_and_jump():
    model = OracleEnergy(sigma=1.0, gmm=point_masses(-1, 1))
    y0 = np.array([[1.0]])
    res = walk_jump(model, WalkJumpSchedule(1, period=1), np.random.default_rng(0), delta=0.0, y0=y0)
    assert res.steps.tolist() == [0, 1]
    np.testing.assert_array_equal(res.y, [[1.0], [1.0]])
    np.testing.assert_allclose(res.x_hat[:, 0], np.tanh(1.0), rtol=1e-14)


def test_zero_steps_and_warmup():
    model = QuadraticEnergy(sigma=1.0, d=2)
    assert walk_jump(model, WalkJumpSchedule(0), np.random.default_rng(0)).y.shape == (1, 2)
    res = walk_jump(model, WalkJumpSchedule(20, period=5, warmup=10), np.random.default_rng(0))
    assert res.steps.tolist() == [15, 20]
    with pytest.raises(ValueError):
        WalkJumpSchedule(5, period=0)


def test_two_component_oracle_visits_both_modes():
    # symmetric modes at +-1: a long chain should split its jumps roughly evenly
    spec = GmmSpec((0.5, 0.5), ((-1.0,), (1.0,)), 0.01)
    model = OracleEnergy(sigma=0.5, gmm=spec)
    res = walk_jump(model, WalkJumpSchedule(20_000, period=10), np.random.default_rng(1), delta=0.2)
    frac = np.mean(res.x_hat[:, 0] > 0)
    assert abs(frac - 0.5) <= 0.1


def test_divergence_radius():
    model = QuadraticEnergy(sigma=1.0, d=1)
    # delta^2 > 2 makes the gradient step expansive
    state = ChainState(np.array([[1.0]]), 1.5, np.random.default_rng(0))
    with pytest.raises(ChainDivergence) as info:
        for _ in range(100):
            state = langevin_step(model, state, noise=False, radius=50.0)
    assert info.value.step > 1


def test_noiseless_step_descends_energy():
    model = build_deen(2, 1.0, hidden=(8,), seed=4)
    state = ChainState(np.array([[0.5, -0.5]]), 0.05, np.random.default_rng(0))
    before = float(energy_value(model, state.y)[0])
    after = float(energy_value(model, langevin_step(model, state, noise=False).y)[0])
    assert after <= before


def test_negative_delta_rejected():
    with pytest.raises(ValueError):
        ChainState(np.zeros((1, 2)), -0.1, np.random.default_rng(0))


# two-step estimator --------------------------------------------------------


def test_nebula_zero_gradient_returns_input():
    model = build_deen(2, 1.0, hidden=(4,), zero_readout=True)
    y = np.array([[0.7, -3.0]])
    np.testing.assert_array_equal(nebula_two_step(model, y), y)


def test_nebula_quadratic_gives_zero():
    y = np.array([[2.0, -1.0]])
    np.testing.assert_array_equal(nebula_two_step(QuadraticEnergy(sigma=1.0, d=2), y), np.zeros((1, 2)))


def test_nebula_two_point_oracle():
    model = OracleEnergy(sigma=1.0, gmm=point_masses(-1, 1))
    assert nebula_two_step(model, np.array([1.0]))[0] == pytest.approx(TANH_TANH1, abs=1e-14)


def test_nebula_uvb_needs_randomness():
    model = build_uvb(2, 0.5, dz=2, enc_hidden=(3,), dec_hidden=(3,))
    with pytest.raises(ValueError):
        nebula_two_step(model, np.zeros((1, 2)))
    assert nebula_two_step(model, np.zeros((3, 2)), rng=np.random.default_rng(0)).shape == (3, 2)


# decoder sampling ----------------------------------------------------------


def test_decoder_prior_sample():
    model = build_uvb(3, 0.5, dz=2, enc_hidden=(3,), dec_hidden=(3,), dec_readout="logistic", seed=1)
    assert decoder_prior_sample(model, 0, np.random.default_rng(0)).shape == (0, 3)
    out = decoder_prior_sample(model, 50, np.random.default_rng(0))
    assert out.shape == (50, 3) and np.all((out > 0) & (out < 1))
    with pytest.raises(TypeError):
        decoder_prior_sample(build_deen(3, 0.5), 2, np.random.default_rng(0))
