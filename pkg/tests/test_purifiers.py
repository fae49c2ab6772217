import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from purigrad import autodiff as ad
from purigrad.autodiff import Tensor
from purigrad.models import (
    ConfigError,
    GaussianOraclePredictor,
    QuadraticEnergy,
    ZeroNoisePredictor,
    make_schedule,
)
from purigrad.purifiers import (
    DdpmPurifier,
    IdentityPurifier,
    LangevinPurifier,
    PurificationDiverged,
    PurificationInputError,
    PurifierConfig,
    VpsdePurifier,
    build_purifier,
    replay_step,
)

from purigrad.validation import expected_logits

from conftest import make_purifier, random_models


class ConstPredictor:
    kind = "denoiser"

    def __init__(self, value):
        self.value = value

    def __call__(self, x, t):
        return ad.add(ad.scale(x, 0.0), Tensor(np.full(x.shape, self.value)))


# ------------------------------------------------------------------ ddpm


def test_ddpm_zero_predictor_step_divides_by_sqrt_alpha():
    sched = make_schedule(10)
    p = DdpmPurifier(ZeroNoisePredictor(), sched, 5)
    x = Tensor(np.array([[0.3, 0.7]]))
    out = p.reverse_step(x, 5, np.zeros((1, 2)))
    np.testing.assert_allclose(out.data, x.data / math.sqrt(sched.alpha[5]), rtol=1e-15)


def test_ddpm_last_step_ignores_noise():
    sched = make_schedule(10)
    p = DdpmPurifier(ZeroNoisePredictor(), sched, 5)
    x = Tensor(np.array([[0.3, 0.7]]))
    a = p.reverse_step(x, 1, np.zeros((1, 2)))
    b = p.reverse_step(x, 1, np.full((1, 2), 3.0))
    assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("t", [2, 5, 9])
def test_ddpm_step_matches_hand_formula(t):
    sched = make_schedule(10, 0.01, 0.2)
    p = DdpmPurifier(ConstPredictor(0.4), sched, 9)
    xt, z = 0.8, -1.3
    out = p.reverse_step(Tensor(np.array([[xt]])), t, np.array([[z]])).item()
    a, ab, b = sched.alpha[t], sched.alpha_bar[t], sched.beta[t]
    sigma = math.sqrt(b * (1 - sched.alpha_bar[t - 1]) / (1 - ab))
    hand = (xt - (1 - a) / math.sqrt(1 - ab) * 0.4) / math.sqrt(a) + sigma * z
    assert out == pytest.approx(hand, rel=1e-14)


def test_diffusion_trajectory_layout():
    _, pred, _ = random_models()
    p = make_purifier("ddpm", 5, pred)
    x = np.random.default_rng(0).uniform(size=(3, 16))
    out, rec = p.purify(x, np.random.default_rng(1))
    assert rec.n_steps == 6 and rec.noises.shape == (6, 3, 16)
    assert [m["t"] for m in rec.meta] == [5, 5, 4, 3, 2, 1]
    assert out.min() >= 0 and out.max() <= 1
    assert np.all(np.isfinite(rec.states[-1]))


def test_diffusion_rejects_depth_beyond_schedule():
    with pytest.raises(ConfigError, match="exceeds"):
        DdpmPurifier(ZeroNoisePredictor(), make_schedule(10), 11)


# ------------------------------------------------------------------ vpsde


def test_vpsde_zero_interval_is_identity():
    from purigrad.purifiers import vpsde_update

    x = Tensor(np.array([[0.2, 0.9]]))
    out = vpsde_update(x, Tensor(np.array([[5.0, -3.0]])), 0.7, 0.0, np.ones((1, 2)))
    assert np.array_equal(out.data, x.data)


@pytest.mark.parametrize("t", [1, 7, 20])
def test_vpsde_gaussian_score_oracle(t):
    sched = make_schedule(20)
    p = VpsdePurifier(GaussianOraclePredictor(sched), sched, 20)
    x = np.array([[0.1, 0.5, 0.95]])
    out = p.reverse_step(Tensor(x), t, np.zeros_like(x)).data
    beta_dt = sched.beta[t]
    np.testing.assert_allclose(out, x * (1 - 0.5 * beta_dt), rtol=1e-13)


# ------------------------------------------------------------------ langevin


def test_langevin_zero_step_size_rejected_and_tiny_step_almost_identity():
    with pytest.raises(ConfigError):
        LangevinPurifier(QuadraticEnergy(), 3, 0.0)
    x = np.random.default_rng(0).uniform(size=(2, 4))
    out, _ = LangevinPurifier(QuadraticEnergy(), 5, 1e-300).purify(x, np.random.default_rng(1))
    np.testing.assert_array_equal(out, x)


def test_langevin_one_step_quadratic():
    eta = 0.2
    x = np.random.default_rng(0).uniform(size=(3, 4))
    z = np.random.default_rng(1).standard_normal((1, 3, 4))
    _, rec = LangevinPurifier(QuadraticEnergy(), 1, eta).run(x, z)
    np.testing.assert_allclose(rec.states[1], x * (1 - eta**2 / 2) + eta * z[0], rtol=1e-14)


@given(K=st.integers(0, 30), eta=st.floats(0.01, 1.0))
@settings(max_examples=25, deadline=None)
def test_langevin_quadratic_closed_form(K, eta):
    x = np.full((1, 3), 0.6)
    p = LangevinPurifier(QuadraticEnergy(), K, eta, stochastic=False)
    _, rec = p.run(x, p.draw_noise(None, x.shape))
    np.testing.assert_allclose(rec.states[-1], x * (1 - eta**2 / 2) ** K, rtol=1e-12)


def test_langevin_divergence_reports_step():
    p = LangevinPurifier(QuadraticEnergy(scale=-1e4), 10, 0.5)
    # |x| after step k is 0.5 * 1251**(k+1): 625 then 7.8e5
    with pytest.raises(PurificationDiverged) as info:
        p.run(np.full((1, 2), 0.5), np.zeros((10, 1, 2)))
    assert info.value.step == 1


# ------------------------------------------------------------------ shared behaviour


@pytest.mark.parametrize("bad", [-0.01, 1.01])
def test_input_outside_box_rejected(bad):
    x = np.full((1, 16), 0.5)
    x[0, 3] = bad
    with pytest.raises(PurificationInputError):
        IdentityPurifier(2).purify(x, None)


def test_tiny_box_overshoot_tolerated():
    x = np.full((1, 4), 1 + 5e-10)
    out, _ = IdentityPurifier(1).purify(x, None)
    assert out.max() == 1.0


@pytest.mark.parametrize("kind", ["ddpm", "vpsde", "langevin"])
def test_same_seed_same_trajectory(kind):
    _, pred, energy = random_models()
    p = make_purifier(kind, 5, pred, energy)
    x = np.random.default_rng(0).uniform(size=(4, 16))
    a, _ = p.purify(x, np.random.default_rng(7))
    b, _ = p.purify(x, np.random.default_rng(7))
    c, _ = p.purify(x, np.random.default_rng(8))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("kind", ["ddpm", "vpsde", "langevin", "identity"])
def test_replay_bitwise(kind):
    _, pred, energy = random_models(seed=2)
    p = make_purifier(kind, 6, pred, energy)
    x = np.random.default_rng(3).uniform(size=(5, 16))
    _, rec = p.purify(x, np.random.default_rng(4))
    for i in range(rec.n_steps):
        nxt, leaf, tape = replay_step(rec, i)
        tape.release()
        assert np.array_equal(nxt.data, rec.states[i + 1]), i
    with pytest.raises(IndexError):
        replay_step(rec, rec.n_steps)


def test_replay_jacobian_quadratic_langevin():
    eta = 0.3
    p = LangevinPurifier(QuadraticEnergy(), 2, eta)
    x = np.random.default_rng(0).uniform(size=(1, 3))
    _, rec = p.purify(x, np.random.default_rng(1))
    rows = []
    for j in range(3):
        nxt, leaf, tape = replay_step(rec, 1)
        rows.append(ad.backward(tape, nxt, [leaf], seed=Tensor(np.eye(3)[[j]]))[0].data[0])
        tape.release()
    jac = np.stack(rows)
    np.testing.assert_allclose(jac, (1 - eta**2 / 2) * np.eye(3), rtol=1e-14, atol=1e-16)


def test_identity_replay_is_identity():
    x = np.random.default_rng(0).uniform(size=(2, 3))
    _, rec = IdentityPurifier(3).purify(x, None)
    nxt, leaf, tape = replay_step(rec, 0)
    g = ad.backward(tape, nxt, [leaf], seed=Tensor(np.ones((2, 3))))[0]
    tape.release()
    assert np.array_equal(nxt.data, x) and np.all(g.data == 1.0)


def test_random_denoiser_stays_finite_in_box():
    _, pred, _ = random_models(seed=5)
    for kind in ("ddpm", "vpsde"):
        p = make_purifier(kind, 50, pred)
        out, rec = p.purify(np.random.default_rng(0).uniform(size=(8, 16)), np.random.default_rng(1))
        assert np.all(np.isfinite(rec.states[-1]))
        assert 0 <= out.min() and out.max() <= 1


def test_build_purifier_validation():
    with pytest.raises(ConfigError, match="energy"):
        build_purifier(PurifierConfig("langevin", 3, 0.1))
    with pytest.raises(ConfigError, match="schedule"):
        build_purifier(PurifierConfig("ddpm", 3), predictor=ZeroNoisePredictor())
    with pytest.raises(ConfigError):
        PurifierConfig("euler", 3).validate()
    p = build_purifier(PurifierConfig("vpsde", 4), predictor=ZeroNoisePredictor(), schedule=make_schedule(10))
    assert isinstance(p, VpsdePurifier) and p.n_steps == 5


def test_langevin_keeps_natural_accuracy(standard_defense, datasets):
    ev = datasets[1].subset(np.arange(128))
    clean = np.mean(standard_defense.classifier.predict(ev.points) == ev.labels)
    # single replicates are noisy (about 0.73); the 10-replicate mean is the defended prediction
    logits = expected_logits(ev.points, standard_defense, 10)
    assert clean - np.mean(np.argmax(logits, axis=1) == ev.labels) <= 0.1
