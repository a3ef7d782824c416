import numpy as np
import pytest
from numpy.polynomial import polynomial as P

from addivc.estimator import (
    EstimationError,
    EstimatorConfig,
    RegressionSnapshot,
    SingularNormalMatrixError,
    UnstableModelError,
    build_instrument_closed,
    build_instrument_open,
    build_regressor,
    build_snapshot,
    estimate,
    iterate_once,
    model_output,
    off_block_ratio,
    perturb_parameters,
    residual_outputs,
    stabilize,
)
from addivc.experiments import closed_loop_experiment, open_loop_experiment, rigid_body_model
from addivc.lti import AdditiveModel, CtSubmodel, DtTransferFunction, ModelStructure, pack_parameters, unpack_parameters
from addivc.signals import (
    Dataset,
    ExperimentConfig,
    NoiseModel,
    SampledSignal,
    SignalSpec,
    ct_filter_bank,
    derivative_filter_bank,
    sensitivity_filter,
    simulate,
)
from oracles import scipy_zoh_filter, srivc

H = 0.05


def _white(N, seed, h=H):
    return SampledSignal(np.random.default_rng(seed).normal(size=N), h)


def _k1_model():
    return AdditiveModel((CtSubmodel([1.0, 0.6, 0.25], [1.0, 0.4]),))


# --- residual outputs -----------------------------------------------------------

def test_residual_outputs_k1_is_y():
    m = _k1_model()
    u, y = _white(200, 1), _white(200, 2)
    yt, yf = residual_outputs(y, u, m)
    assert len(yt) == 1
    np.testing.assert_array_equal(yt[0].values, y.values)
    np.testing.assert_allclose(yf[0].values, scipy_zoh_filter([1.0], m.submodels[0].a, y.values, H), atol=1e-10)


def test_residual_outputs_at_truth(cl_model):
    data = simulate(ExperimentConfig(cl_model, SignalSpec(), NoiseModel(), 1000, H, seed=3))
    yt, _ = residual_outputs(data.y, data.u, cl_model)
    for i, s in enumerate(cl_model.submodels):
        np.testing.assert_allclose(yt[i].values, scipy_zoh_filter(s.b, s.a, data.u.values, H), atol=1e-8)


def test_residual_outputs_zero(cl_model):
    z = SampledSignal(np.zeros(50), H)
    yt, yf = residual_outputs(z, z, cl_model)
    assert all(not np.any(s.values) for s in yt + yf)


def test_residual_outputs_unstable():
    m = AdditiveModel((CtSubmodel([1.0, -0.5], [1.0]),))
    with pytest.raises(UnstableModelError):
        residual_outputs(_white(20, 1), _white(20, 2), m)


# --- regressor --------------------------------------------------------------------

def test_regressor_column_count(ol_model):
    Phi = build_regressor(_white(100, 1), _white(100, 2), ol_model)
    assert Phi.shape == (100, ol_model.structure.n_params) == (100, 12)


def test_regressor_first_order_k1():
    m = AdditiveModel((CtSubmodel([1.0, 0.7], [2.0]),))
    u, y = _white(300, 1), _white(300, 2)
    Phi = build_regressor(y, u, m)
    Yy = derivative_filter_bank(y, [1.0, 0.7], 0, [1])
    Yu = derivative_filter_bank(u, [1.0, 0.7], 0, [0])
    np.testing.assert_allclose(Phi[:, 0], -Yy[:, 0], atol=1e-12)
    np.testing.assert_allclose(Phi[:, 1], Yu[:, 0], atol=1e-12)


def test_regressor_double_integrator_column():
    model = rigid_body_model()
    u, y = _white(400, 4), _white(400, 5)
    Phi = build_regressor(y, u, model)
    # exact ZOH double integration: position/velocity recursion
    pos, vel = 0.0, 0.0
    ref = np.empty(400)
    for k, uk in enumerate(u.values):
        ref[k] = pos
        pos += H * vel + 0.5 * H**2 * uk
        vel += H * uk
    np.testing.assert_allclose(Phi[:, 0], ref, atol=1e-12 * np.abs(ref).max())
    # the output-derivative columns of submodel 2 carry no integrator
    s = model.submodels[1]
    yt = y.values - model_output(u.values, AdditiveModel((model.submodels[0],), integrator_order=2), H)
    np.testing.assert_allclose(Phi[:, 1], -scipy_zoh_filter([0.0, 1.0], s.a, yt, H), atol=1e-9)


# --- instruments ------------------------------------------------------------------

def test_instrument_finite_difference(cl_model):
    u = _white(800, 7)
    beta = pack_parameters(cl_model)
    Z = build_instrument_open(u, cl_model)
    for j in range(beta.size):
        step = 1e-6 * max(1.0, abs(beta[j]))
        bp, bm = beta.copy(), beta.copy()
        bp[j] += step
        bm[j] -= step
        fd = (model_output(u.values, unpack_parameters(bp, cl_model.structure), H)
              - model_output(u.values, unpack_parameters(bm, cl_model.structure), H)) / (2 * step)
        rel = np.sqrt(np.mean((Z[:, j] - fd) ** 2)) / np.sqrt(np.mean(fd**2))
        assert rel < 1e-4, (j, rel)


def test_instrument_zero_input(cl_model):
    assert not np.any(build_instrument_open(SampledSignal(np.zeros(40), H), cl_model))


def test_instrument_constant_numerator():
    m = AdditiveModel((CtSubmodel([1.0, 0.8], [1.5]),))
    u = _white(300, 8)
    Z = build_instrument_open(u, m)
    ref = -scipy_zoh_filter([0.0, 1.5], P.polymul([1.0, 0.8], [1.0, 0.8]), u.values, H)
    np.testing.assert_allclose(Z[:, 0], ref, atol=1e-10)


def test_closed_instrument_at_truth_uses_true_sensitivity(cl_model, pid):
    r = _white(600, 9)
    Z = build_instrument_closed(r, cl_model, pid)
    z = sensitivity_filter(r.values, cl_model, pid, H)
    np.testing.assert_allclose(Z, build_instrument_open(SampledSignal(z, H), cl_model), atol=1e-14)


def test_closed_instrument_zero_reference(cl_model, pid):
    assert not np.any(build_instrument_closed(SampledSignal(np.zeros(50), H), cl_model, pid))


@pytest.mark.filterwarnings("ignore:Badly conditioned filter coefficients")
def test_closed_instrument_zero_controller_flagged(cl_model):
    C0 = DtTransferFunction([0.0], [1.0], H)
    with pytest.warns(UserWarning, match="degenerate"):
        Z = build_instrument_closed(_white(50, 1), cl_model, C0)
    assert not np.any(Z)


# --- one iteration ------------------------------------------------------------------

def test_fixed_point_open(ol_model):
    data = simulate(ExperimentConfig(ol_model, SignalSpec(), NoiseModel(), 4000, H, seed=1))
    snap = build_snapshot(data.y.values, data.u.values, ol_model, H)
    B, beta = iterate_once(snap)
    np.testing.assert_allclose(beta, pack_parameters(ol_model), rtol=1e-8)
    assert off_block_ratio(B, ol_model.structure) < 1e-8


def test_fixed_point_closed(cl_model, pid):
    data = simulate(closed_loop_experiment(4000, seed=2, noise_variance=0.0))
    z = sensitivity_filter(data.r.values, cl_model, pid, H)
    snap = build_snapshot(data.y.values, data.u.values, cl_model, H, z=z)
    _, beta = iterate_once(snap)
    np.testing.assert_allclose(beta, pack_parameters(cl_model), rtol=1e-8)


def test_zero_upsilon(cl_model):
    data = simulate(ExperimentConfig(cl_model, SignalSpec(), NoiseModel(), 500, H, seed=1))
    snap = build_snapshot(data.y.values, data.u.values, cl_model, H)
    zero = RegressionSnapshot(snap.Phi, snap.PhiHat, np.zeros_like(snap.Upsilon), snap.structure)
    _, beta = iterate_once(zero)
    assert not np.any(beta)


def test_singular_normal_matrix(cl_model):
    data = simulate(ExperimentConfig(cl_model, SignalSpec(), NoiseModel(), 500, H, seed=1))
    snap = build_snapshot(data.y.values, data.u.values, cl_model, H)
    PhiHat = snap.PhiHat.copy()
    PhiHat[:, 1] = PhiHat[:, 0]
    with pytest.raises(SingularNormalMatrixError) as err:
        iterate_once(RegressionSnapshot(snap.Phi, PhiHat, snap.Upsilon, snap.structure))
    assert err.value.cond > 1e12


def test_snapshot_dimension_checks(cl_model):
    with pytest.raises(ValueError):
        RegressionSnapshot(np.zeros((5, 6)), np.zeros((5, 5)), np.zeros((5, 2)), cl_model.structure)


# --- iterations ------------------------------------------------------------------------

def test_k1_matches_standalone_srivc():
    m = _k1_model()
    data = simulate(ExperimentConfig(m, SignalSpec(), NoiseModel(variance=0.05), 3000, H, seed=6))
    theta0 = perturb_parameters(pack_parameters(m), 0.2, seed=1)
    res = estimate(data, m.structure, theta0, EstimatorConfig(max_iterations=6, tol=1e-300))

    def filt(num, den, x, h):
        return ct_filter_bank(np.asarray(x, dtype=float), den, [num], h)[:, 0]

    ref = srivc(theta0, 2, 1, data.y.values, data.u.values, H, 6, filt=filt)
    assert res.srivc_equivalent
    np.testing.assert_allclose(res.trajectory, ref, rtol=1e-12, atol=0)
    # the same update with scipy's discretization agrees to its own accuracy
    ref_scipy = srivc(theta0, 2, 1, data.y.values, data.u.values, H, 6)
    np.testing.assert_allclose(res.trajectory, ref_scipy, rtol=1e-8)


@pytest.mark.parametrize("mode", ["open", "closed"])
def test_converges_quickly_from_truth(cl_model, pid, mode):
    data = simulate(closed_loop_experiment(3000, seed=4, noise_variance=0.0))
    beta = pack_parameters(cl_model)
    res = estimate(data, cl_model.structure, beta, EstimatorConfig(), pid if mode == "closed" else None)
    assert res.converged and res.iterations <= 2
    assert res.trajectory.shape == (res.iterations + 1, beta.size)
    np.testing.assert_allclose(res.beta, beta, rtol=1e-8)


def test_open_loop_recovery_noise_free(ol_model):
    data = simulate(ExperimentConfig(ol_model, SignalSpec(), NoiseModel(), 5000, H, seed=3))
    beta = pack_parameters(ol_model)
    res = estimate(data, ol_model.structure, perturb_parameters(beta, 0.05, seed=4))
    assert res.converged
    np.testing.assert_allclose(res.beta, beta, rtol=1e-6)
    assert res.off_block[-1] < 1e-6
    assert res.orthogonality < 1e-8


def test_max_iterations_reported(cl_model):
    data = simulate(ExperimentConfig(cl_model, SignalSpec(), NoiseModel(variance=0.01), 1000, H, seed=1))
    beta0 = perturb_parameters(pack_parameters(cl_model), 0.05, seed=2)
    res = estimate(data, cl_model.structure, beta0, EstimatorConfig(max_iterations=1))
    assert not res.converged and res.termination == "max_iterations"
    assert res.iterations == 1 and len(res.trajectory) == 2
    assert len(res.condition_numbers) == len(res.off_block) == 1


def test_permutation_equivariance(ol_model):
    data = simulate(open_loop_experiment(4000, seed=8))
    beta0 = perturb_parameters(pack_parameters(ol_model), 0.05, seed=9)
    base = estimate(data, ol_model.structure, beta0)
    perm = [2, 0, 3, 1]
    blocks = [beta0[sl] for sl in ol_model.structure.slices]
    pstruct = ModelStructure(tuple(ol_model.structure.orders[i] for i in perm))
    res = estimate(data, pstruct, np.concatenate([blocks[i] for i in perm]))
    out = [res.beta[sl] for sl in pstruct.slices]
    for k, i in enumerate(perm):
        np.testing.assert_allclose(out[k], base.beta[ol_model.structure.slices[i]], rtol=1e-8)


def test_closed_loop_requires_reference(cl_model, pid):
    data = simulate(ExperimentConfig(cl_model, SignalSpec(), NoiseModel(), 100, H, seed=1))
    with pytest.raises(ValueError):
        estimate(data, cl_model.structure, pack_parameters(cl_model), controller=pid)


def test_nonfinite_data(cl_model):
    data = simulate(ExperimentConfig(cl_model, SignalSpec(), NoiseModel(), 100, H, seed=1))
    y = data.y.values.copy()
    y[10] = np.nan
    bad = Dataset(data.u, SampledSignal(y, H))
    with pytest.raises(EstimationError):
        estimate(bad, cl_model.structure, pack_parameters(cl_model))


def test_stability_policy():
    m = AdditiveModel((CtSubmodel([1.0, -0.5, 0.2], [1.0]),))
    assert np.all(stabilize(m).submodels[0].poles().real < 0)
    with pytest.raises(UnstableModelError):
        stabilize(m, "error")
    with pytest.raises(ValueError):
        EstimatorConfig(stability_policy="clip")


def test_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(max_iterations=0)
    with pytest.raises(ValueError):
        EstimatorConfig(tol=0.0)
    assert EstimatorConfig().tolerance(False) == 1e-10
    assert EstimatorConfig().tolerance(True) == 1e-7


# --- perturbation ----------------------------------------------------------------------

def test_perturb_parameters():
    beta = np.array([0.25, -3.0, 1e-2, 7.0])
    np.testing.assert_array_equal(perturb_parameters(beta, 0.0, seed=1), beta)
    p = perturb_parameters(beta, 0.05, seed=1)
    assert np.all(np.abs(p / beta - 1) <= 0.05)
    np.testing.assert_array_equal(p, perturb_parameters(beta, 0.05, seed=1))
    with pytest.raises(ValueError):
        perturb_parameters(beta, 1.0)
