import numpy as np
import pytest

from addivc.experiments import closed_loop_experiment, open_loop_experiment
from addivc.lti import AdditiveModel, CtSubmodel, CtTransferFunction, DtTransferFunction, model_to_dt, sensitivity_function
from addivc.signals import (
    ExperimentConfig,
    NoiseModel,
    SampledSignal,
    SignalSpec,
    UnstableLoopError,
    derivative_filter_bank,
    filter_ct_zoh,
    filter_dt,
    generate_signal,
    simulate,
    simulate_closed_loop,
    simulate_open_loop,
    snr_db,
)
from oracles import random_stable_poly, rk4_zoh_response, scipy_zoh_filter

H = 0.05


def _step(N, h=H):
    return SampledSignal(np.ones(N), h)


# --- container ---------------------------------------------------------------

def test_signal_arithmetic_checks():
    a = SampledSignal(np.arange(4.0), 0.1)
    b = SampledSignal(np.ones(4), 0.1)
    np.testing.assert_array_equal((a + b).values, np.arange(4.0) + 1)
    with pytest.raises(ValueError):
        a + SampledSignal(np.ones(3), 0.1)
    with pytest.raises(ValueError):
        a + SampledSignal(np.ones(4), 0.2)
    with pytest.raises(ValueError):
        SampledSignal(np.ones(3), 0.0)
    np.testing.assert_allclose(a.t, [0, 0.1, 0.2, 0.3])


# --- continuous filters under ZOH ----------------------------------------

def test_first_order_step():
    y = filter_ct_zoh(_step(50), CtTransferFunction([1.0], [1.0, 0.5])).values
    k = np.arange(50)
    # output at t_k, the step starting at t_0 = 0
    np.testing.assert_allclose(y, 1 - np.exp(-0.1 * k), atol=1e-14)


def test_identity_filter(rng):
    x = SampledSignal(rng.normal(size=100), H)
    np.testing.assert_array_equal(filter_ct_zoh(x, CtTransferFunction([1.0], [1.0])).values, x.values)


def test_integrator_ramp():
    y = filter_ct_zoh(_step(20), CtTransferFunction([1.0], [0.0, 1.0])).values
    np.testing.assert_allclose(y, 0.05 * np.arange(20), atol=1e-14)


def test_improper_filter():
    with pytest.raises(ValueError):
        filter_ct_zoh(_step(5), CtTransferFunction([0, 0, 1.0], [1.0, 1.0]))


def test_bank_single():
    x = _step(30)
    col = derivative_filter_bank(x, [1.0, 0.5], 0, [0])[:, 0]
    np.testing.assert_allclose(col, filter_ct_zoh(x, CtTransferFunction([1.0], [1.0, 0.5])).values, rtol=1e-12)


def test_bank_step_and_derivative():
    Y = derivative_filter_bank(_step(40), [1.0, 0.5], 0, [0, 1])
    k = np.arange(40)
    np.testing.assert_allclose(Y[:, 0], 1 - np.exp(-0.1 * k), atol=1e-13)
    # p/(0.5p + 1) of a step is 2 e^{-2t}, including the feedthrough at t_0
    expected = 2 * np.exp(-0.1 * k)
    np.testing.assert_allclose(Y[:, 1], expected, atol=1e-12)


def test_bank_matches_individual_filters(rng):
    for _ in range(5):
        n = int(rng.integers(1, 5))
        ell = int(rng.integers(0, 3))
        a = random_stable_poly(rng, n)
        x = rng.normal(size=300)
        orders = list(range(n + ell + 1))
        Y = derivative_filter_bank(SampledSignal(x, H), a, ell, orders)
        den = np.concatenate((np.zeros(ell), a))
        for j in orders:
            e = np.zeros(j + 1)
            e[j] = 1.0
            ref = scipy_zoh_filter(e, den, x, H)
            np.testing.assert_allclose(Y[:, j], ref, rtol=0, atol=1e-10 * max(1.0, np.abs(ref).max()))


def test_bank_improper_member():
    with pytest.raises(ValueError):
        derivative_filter_bank(_step(5), [1.0, 0.5], 0, [2])


def test_zoh_exact_against_rk4(rng):
    for _ in range(3):
        n = int(rng.integers(1, 4))
        den = random_stable_poly(rng, n, (0.5, 3.0))
        num = rng.normal(size=n)
        x = rng.normal(size=40)
        y = filter_ct_zoh(SampledSignal(x, 0.1), CtTransferFunction(num, den)).values
        ref = rk4_zoh_response(num, den, x, 0.1)
        np.testing.assert_allclose(y, ref, rtol=0, atol=1e-6 * np.abs(ref).max())


def test_linearity_and_time_invariance(rng):
    f = CtTransferFunction([1.0, 0.2], random_stable_poly(rng, 3))
    x, z = rng.normal(size=(2, 200))
    lhs = filter_ct_zoh(SampledSignal(2 * x - 3 * z, H), f).values
    rhs = 2 * filter_ct_zoh(SampledSignal(x, H), f).values - 3 * filter_ct_zoh(SampledSignal(z, H), f).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    xd = np.concatenate((np.zeros(7), x[:-7]))
    y = filter_ct_zoh(SampledSignal(x, H), f).values
    yd = filter_ct_zoh(SampledSignal(xd, H), f).values
    np.testing.assert_array_equal(yd[:7], 0.0)
    np.testing.assert_array_equal(yd[7:], y[:-7])


# --- discrete filters ------------------------------------------------------

def test_filter_dt_delay():
    y = filter_dt(SampledSignal([1.0, 2.0, 3.0], 1.0), DtTransferFunction([1.0], [0.0, 1.0], 1.0)).values
    np.testing.assert_allclose(y, [0, 1, 2])


def test_filter_dt_noise_impulse():
    imp = np.zeros(5)
    imp[0] = 1.0
    y = filter_dt(SampledSignal(imp, 1.0), DtTransferFunction([0.5, 1.0], [-0.85, 1.0], 1.0)).values
    np.testing.assert_allclose(y[:3], [1.0, 1.35, 1.1475], rtol=1e-14)


def test_filter_dt_identity_and_acausal(rng):
    x = SampledSignal(rng.normal(size=10), 1.0)
    np.testing.assert_array_equal(filter_dt(x, DtTransferFunction([1.0], [1.0], 1.0)).values, x.values)
    with pytest.raises(ValueError):
        filter_dt(x, DtTransferFunction([0.0, 0.0, 1.0], [0.0, 1.0], 1.0))


# --- generators ---------------------------------------------------------------

def test_white_variance():
    x = generate_signal(SignalSpec("gaussian_white", 1.0), 100_000, 0.05, seed=3).values
    assert abs(np.var(x) - 1.0) < 0.03


def test_multisine_bins():
    h = 1 / 4096
    spec = SignalSpec("multisine", 1.0, band=(0.5, 500.0), lines=100, period=8192)
    x = generate_signal(spec, 8192, h, seed=1).values
    X = np.fft.rfft(x)
    active = np.flatnonzero(np.abs(X) > 1e-8 * np.abs(X).max())
    freqs = active / (8192 * h)
    assert active.size == 100
    assert freqs.min() >= 0.5 and freqs.max() <= 500.0
    # flat amplitude on the excited lines
    np.testing.assert_allclose(np.abs(X[active]), np.abs(X[active]).mean(), rtol=1e-9)


def test_multisine_empty_band():
    with pytest.raises(ValueError):
        generate_signal(SignalSpec("multisine", 1.0, band=(3000.0, 4000.0)), 1024, 1 / 4096, seed=1)


def test_prbs_levels():
    x = generate_signal(SignalSpec("prbs", 4.0, hold=3), 99, 0.1, seed=2).values
    np.testing.assert_allclose(np.abs(x), 2.0)
    assert np.all(x[0::3] == x[1::3])


def test_generator_determinism():
    spec = SignalSpec("gaussian_white", 1.0)
    a = generate_signal(spec, 50, 0.1, seed=9).values
    b = generate_signal(spec, 50, 0.1, seed=9).values
    assert np.array_equal(a, b)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel([1.0], [-1.5, 1.0], 1.0)
    nm = NoiseModel([0.5, 1.0], [-0.85, 1.0], 0.02)
    # stationary variance of (q + 0.5)/(q - 0.85): 1 + (1.35^2)/(1 - 0.85^2)
    np.testing.assert_allclose(nm.stationary_variance(), 0.02 * (1 + 1.35**2 / (1 - 0.85**2)), rtol=1e-10)


# --- open loop ----------------------------------------------------------------

def test_open_loop_dc(ol_model):
    cfg = ExperimentConfig(ol_model, SignalSpec("gaussian_white", 0.0), NoiseModel(), 4000, H)
    data = simulate_open_loop(cfg)
    assert np.all(data.y.values == 0)
    y = sum(filter_ct_zoh(_step(4000), ol_model.submodel_tf(i)).values for i in range(4))
    assert abs(y[-1] - 3.65) < 1e-6


def test_open_loop_k1_equals_filter(rng):
    m = AdditiveModel((CtSubmodel([1.0, 0.3, 0.1], [1.0, 0.2]),))
    cfg = ExperimentConfig(m, SignalSpec(), NoiseModel(), 500, H, seed=4)
    data = simulate_open_loop(cfg)
    ref = filter_ct_zoh(data.u, m.submodel_tf(0)).values
    np.testing.assert_allclose(data.y.values, ref, rtol=1e-12, atol=1e-14)


def test_open_loop_snr():
    data = simulate(open_loop_experiment(20000, seed=5))
    assert abs(snr_db(data.x, data.v) - 9.0) <= 1.5


def test_open_loop_delay(rng):
    m = AdditiveModel((CtSubmodel([1.0, 0.3], [1.0]),), input_delay=4)
    data = simulate_open_loop(ExperimentConfig(m, SignalSpec(), NoiseModel(), 300, H, seed=2))
    ref = scipy_zoh_filter([1.0], [1.0, 0.3], np.concatenate((np.zeros(4), data.u.values[:-4])), H)
    np.testing.assert_allclose(data.y.values, ref, atol=1e-12)


def test_open_loop_integrator_rejected():
    m = AdditiveModel((CtSubmodel([1.0], [1.0]),), integrator_order=1)
    with pytest.raises(ValueError):
        simulate_open_loop(ExperimentConfig(m, SignalSpec(), NoiseModel(), 10, H))


# --- closed loop --------------------------------------------------------------

def test_closed_loop_sensitivity_identity():
    cfg = closed_loop_experiment(3000, seed=8)
    data = simulate_closed_loop(cfg)
    S = sensitivity_function(model_to_dt(cfg.model, H), cfg.controller)
    rhs = filter_dt(data.r, S).values - filter_dt(data.v, S).values
    rms = np.sqrt(np.mean((data.u.values - rhs) ** 2))
    assert rms < 1e-8 * np.sqrt(np.mean(data.u.values**2))


def test_closed_loop_noise_free_matches_sensitivity():
    cfg = closed_loop_experiment(2000, seed=1, noise_variance=0.0)
    data = simulate_closed_loop(cfg)
    S = sensitivity_function(model_to_dt(cfg.model, H), cfg.controller)
    np.testing.assert_allclose(data.u.values, filter_dt(data.r, S).values, atol=1e-8)


def test_closed_loop_zero_excitation():
    cfg = closed_loop_experiment(200, seed=1, noise_variance=0.0).replace(excitation=SignalSpec("gaussian_white", 0.0))
    data = simulate_closed_loop(cfg)
    assert not np.any(data.u.values) and not np.any(data.y.values)


def test_closed_loop_finite():
    data = simulate(closed_loop_experiment(5000, seed=2))
    assert np.isfinite(np.var(data.y.values))


def test_closed_loop_with_feedthrough(rng):
    # biproper plant and controller: the loop is solved per sample
    m = AdditiveModel((CtSubmodel([1.0, 0.5], [0.2, 0.1]),))
    C = DtTransferFunction([0.3, 0.5], [-0.2, 1.0], H)
    cfg = ExperimentConfig(m, SignalSpec(), NoiseModel(variance=0.01), 1000, H, seed=3, controller=C)
    data = simulate_closed_loop(cfg)
    S = sensitivity_function(model_to_dt(m, H), C)
    rhs = filter_dt(data.r, S).values - filter_dt(data.v, S).values
    np.testing.assert_allclose(data.u.values, rhs, atol=1e-9)


def test_unstable_loop_reports_moduli(cl_model):
    C = DtTransferFunction([50.0], [1.0], H)
    cfg = ExperimentConfig(cl_model, SignalSpec(), NoiseModel(), 100, H, controller=C)
    with pytest.raises(UnstableLoopError) as err:
        simulate_closed_loop(cfg)
    assert np.all(err.value.moduli >= 1.0)


def test_seeded_determinism():
    a = simulate(closed_loop_experiment(500, seed=11))
    b = simulate(closed_loop_experiment(500, seed=11))
    for s in ("u", "y", "r"):
        assert np.array_equal(getattr(a, s).values, getattr(b, s).values)
    c = simulate(closed_loop_experiment(500, seed=12))
    assert not np.array_equal(a.y.values, c.y.values)
