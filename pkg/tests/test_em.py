import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cfgmm.em import (em_fit, initialize, log_likelihood, multi_restart_fit, responsibilities,
                      run_em, update_component, update_weights)
from cfgmm.errors import DegenerateComponentError, DegenerateInputError
from cfgmm.model import FitConfig, GammaComponent, MixtureModel
from cfgmm.special import GammaParams, gamma_sample, mom_estimate

from conftest import THREE_COMP, TWO_COMP, sample

positive_data = hnp.arrays(np.float64, st.integers(6, 60),
                           elements=st.floats(1e-2, 1e2)).filter(lambda a: np.ptp(a) > 1e-6)


def random_model(rng, k):
    w = rng.dirichlet(np.ones(k))
    return MixtureModel.from_arrays(10 ** rng.uniform(-0.5, 1, k), 10 ** rng.uniform(-1, 0.5, k),
                                    w / math.fsum(w))


# -- model containers ------------------------------------------------------------

def test_mixture_model_validation():
    with pytest.raises(ValueError):
        MixtureModel(())
    with pytest.raises(ValueError):
        MixtureModel.from_arrays([1, 2], [1, 1], [0.5, 0.6])
    with pytest.raises(ValueError):
        GammaComponent(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        FitConfig(tol=0)
    with pytest.raises(ValueError):
        FitConfig(restarts=0)


def test_canonical_order():
    m = MixtureModel.from_arrays([8, 0.5], [1 / 3, 0.5], [0.7, 0.3]).canonical()
    assert list(m.shapes) == [0.5, 8]
    tie = MixtureModel.from_arrays([2, 1], [1, 2], [0.6, 0.4]).canonical()
    assert list(tie.weights) == [0.4, 0.6]


# -- initialisation ------------------------------------------------------------

def test_initialize_single_component_is_mom():
    x = sample(TWO_COMP, 500, 1)
    m = initialize(x, 1, np.random.default_rng(0))
    p = mom_estimate(x)
    assert m.k == 1 and m.weights[0] == 1.0
    assert m.shapes[0] == pytest.approx(p.shape, rel=1e-14)
    assert m.scales[0] == pytest.approx(p.scale, rel=1e-14)


def test_initialize_two_components(two_comp_10k):
    m = initialize(two_comp_10k, 2, np.random.default_rng(3))
    assert np.all(np.isfinite(m.shapes)) and np.all(m.shapes > 0)
    assert np.all(np.isfinite(m.scales)) and np.all(m.scales > 0)
    assert math.fsum(m.weights) == pytest.approx(1.0, abs=1e-12)


def test_initialize_deterministic(two_comp_10k):
    a = initialize(two_comp_10k, 3, np.random.default_rng(9))
    b = initialize(two_comp_10k, 3, np.random.default_rng(9))
    assert a == b


def test_initialize_blocks_have_two_points():
    # Six points, three components: every block must hold exactly two.
    x = np.array([1.0, 1.5, 2.0, 4.0, 5.0, 9.0])
    for seed in range(20):
        m = initialize(x, 3, np.random.default_rng(seed))
        expected = [mom_estimate(x[i:i + 2]) for i in (0, 2, 4)]
        assert np.allclose(m.shapes, [p.shape for p in expected])


@pytest.mark.parametrize("data, k", [([1.0, 2.0, 3.0], 2), ([1.0, -1.0, 2.0, 3.0], 1),
                                     ([1.0, 0.0, 2.0], 1), ([1.0, math.nan], 1)])
def test_initialize_rejects_bad_data(data, k):
    with pytest.raises(DegenerateInputError):
        initialize(data, k, np.random.default_rng(0))


# -- responsibilities -------------------------------------------------------------

def test_responsibilities_single_component():
    z = responsibilities([0.5, 1.0, 3.0], MixtureModel.from_arrays([2], [1], [1]))
    assert np.array_equal(z, np.ones((3, 1)))


def test_responsibilities_identical_components():
    m = MixtureModel.from_arrays([2, 2], [1.5, 1.5], [0.5, 0.5])
    z = responsibilities([0.1, 1.0, 30.0], m)
    assert np.allclose(z, 0.5, atol=1e-15)


def test_responsibilities_direct_density_example():
    # f1(1) = e^-1 (a=1, b=1); f2(1) = 1 * e^-1 (a=2, b=1): equal densities.
    m = MixtureModel.from_arrays([1, 2], [1, 1], [0.5, 0.5])
    assert np.allclose(responsibilities([1.0, 1.0], m), 0.5, atol=1e-15)


def test_responsibilities_include_weights():
    m = MixtureModel.from_arrays([1, 2], [1, 1], [0.2, 0.8])
    assert np.allclose(responsibilities([1.0, 1.0], m), [[0.2, 0.8]] * 2, atol=1e-15)


def test_responsibilities_far_tail_is_stable():
    m = MixtureModel.from_arrays([0.5, 400.0], [0.01, 0.01], [0.5, 0.5])
    z = responsibilities([1e-300, 1e4], m)
    assert np.all(np.isfinite(z))
    assert np.allclose(z.sum(axis=1), 1.0)


@settings(max_examples=60, deadline=None)
@given(positive_data, st.integers(1, 4), st.integers(0, 2 ** 31))
def test_responsibility_rows_sum_to_one(x, k, seed):
    z = responsibilities(x, random_model(np.random.default_rng(seed), k))
    assert np.all((z >= 0) & (z <= 1))
    assert np.max(np.abs(z.sum(axis=1) - 1.0)) <= 1e-12
    assert z.sum() == pytest.approx(x.size, abs=1e-9)


# -- closed-form update -----------------------------------------------------------

def _paper_form_oracle(x, z):
    # Uncentred weighted sums in 40-digit arithmetic.
    mpmath.mp.dps = 40
    xs = [mpmath.mpf(float(v)) for v in x]
    zs = [mpmath.mpf(float(v)) for v in z]
    sz = mpmath.fsum(zs)
    sx = mpmath.fsum(w * v for w, v in zip(zs, xs))
    slx = mpmath.fsum(w * mpmath.log(v) for w, v in zip(zs, xs))
    sxlx = mpmath.fsum(w * v * mpmath.log(v) for w, v in zip(zs, xs))
    den = sz * sxlx - slx * sx
    return float(sz * sx / den), float(den / sz ** 2)


def test_update_component_example():
    a, b = update_component([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    # 18 / (3 (2 ln 2 + 3 ln 3) - 6 ln 6), evaluated at 40 digits
    assert a == pytest.approx(5.46143535976102436, rel=1e-13)
    assert b == pytest.approx(0.366204096222703230, rel=1e-13)
    assert (a, b) == pytest.approx(_paper_form_oracle([1, 2, 3], [1, 1, 1]), rel=1e-13)


@settings(max_examples=60, deadline=None)
@given(positive_data, st.integers(0, 2 ** 31))
def test_update_component_matches_oracle_and_mean_identity(x, seed):
    z = np.random.default_rng(seed).uniform(0.01, 1.0, x.size)
    a, b = update_component(x, z)
    ref_a, ref_b = _paper_form_oracle(x, z)
    assert a == pytest.approx(ref_a, rel=1e-8)
    assert b == pytest.approx(ref_b, rel=1e-8)
    assert a * b == pytest.approx(np.dot(z, x) / z.sum(), rel=1e-10)


def test_update_component_consistency():
    x = gamma_sample(GammaParams(8, 1 / 3), np.random.default_rng(4), 10_000)
    a, b = update_component(x, np.ones_like(x))
    assert a == pytest.approx(8, rel=0.05)
    assert b == pytest.approx(1 / 3, rel=0.05)


def test_update_component_degenerate():
    with pytest.raises(DegenerateComponentError):
        update_component([2.0, 2.0, 2.0], [1.0, 1.0, 1.0])
    with pytest.raises(DegenerateComponentError):
        update_component([1.0, 2.0], [0.0, 0.0])


def test_update_weights():
    z = np.zeros((100, 2))
    z[:30, 0] = 1
    z[30:, 1] = 1
    assert np.allclose(update_weights(z), [0.3, 0.7], atol=1e-15)
    assert update_weights(np.ones((5, 1)))[0] == 1.0
    assert np.allclose(update_weights(np.full((7, 4), 0.25)), 0.25, atol=1e-15)


# -- log-likelihood ------------------------------------------------------------------

def test_log_likelihood_exponential():
    x = np.array([0.3, 1.2, 4.0])
    m = MixtureModel.from_arrays([1], [1], [1])
    assert log_likelihood(x, m) == pytest.approx(-x.sum(), abs=1e-14)
    assert log_likelihood(np.tile(x, 2), m) == pytest.approx(2 * log_likelihood(x, m), rel=1e-14)


def test_log_likelihood_brute_force():
    m = MixtureModel.from_arrays([0.7, 3.0], [1.5, 0.5], [0.4, 0.6])
    # 40-digit per-point density sum
    assert log_likelihood([0.5, 1.0, 2.0], m) == pytest.approx(-3.15626020256129329, abs=1e-12)


def test_log_likelihood_survives_density_underflow():
    # Each density underflows to zero in linear space; log space keeps it finite.
    from cfgmm.special import gamma_log_density
    m = MixtureModel.from_arrays([1e6], [1e-6], [1.0])
    x = np.array([1e-300, 1.0])
    ll = log_likelihood(x, m)
    assert math.isfinite(ll)
    assert ll == pytest.approx(gamma_log_density(x, GammaParams(1e6, 1e-6)).sum(), rel=1e-14)


# -- EM fit ---------------------------------------------------------------------------

def test_single_component_fit_is_one_step():
    x = gamma_sample(GammaParams(2, 3), np.random.default_rng(8), 10_000)
    res = em_fit(x, 1, FitConfig(seed=1))
    a, b = update_component(x, np.ones_like(x))
    assert res.converged and res.iterations <= 3
    assert res.model.shapes[0] == pytest.approx(a, rel=0.05)
    assert res.model.scales[0] == pytest.approx(b, rel=0.05)
    assert res.model.shapes[0] == pytest.approx(2, rel=0.05)


def test_two_component_design_fit(two_comp_10k):
    res = multi_restart_fit(two_comp_10k, 2, FitConfig(seed=3))
    assert res.converged
    m = res.model
    assert np.allclose(m.shapes, [0.5, 8], rtol=0.1)
    assert np.allclose(m.scales, [0.5, 1 / 3], rtol=0.1)
    assert np.allclose(m.weights, [0.3, 0.7], atol=0.05)
    assert res.final_loglik == res.loglik_trajectory[-1]
    assert res.final_loglik == pytest.approx(log_likelihood(two_comp_10k, m), rel=1e-12)


def test_result_fields(two_comp_10k):
    res = em_fit(two_comp_10k, 2, FitConfig(seed=0))
    assert res.method == "cfgmm" and res.restarts_used == 1
    assert len(res.loglik_trajectory) == res.iterations + 1
    assert res.wall_time > 0
    d = res.to_dict()
    assert d["components"][0]["mode"] is None  # shape < 1 has no mode


def test_max_iter_gives_nonconverged_result(two_comp_10k):
    res = em_fit(two_comp_10k, 2, FitConfig(seed=0, max_iter=2))
    assert not res.converged and res.iterations == 2 and res.status == "max_iter"


def test_em_invariants_each_step(three_comp_2k):
    x = three_comp_2k
    model = initialize(x, 3, np.random.default_rng(5))
    for _ in range(25):
        z = responsibilities(x, model)
        assert np.max(np.abs(z.sum(axis=1) - 1)) <= 1e-12
        params = [update_component(x, z[:, k]) for k in range(3)]
        w = update_weights(z)
        assert abs(math.fsum(w) - 1) <= 1e-12
        for k, (a, b) in enumerate(params):
            assert a * b == pytest.approx(np.dot(z[:, k], x) / z[:, k].sum(), rel=1e-10)
        mix_mean = math.fsum(w[k] * a * b for k, (a, b) in enumerate(params))
        assert mix_mean == pytest.approx(x.mean(), rel=1e-10)
        model = MixtureModel.from_arrays([p[0] for p in params], [p[1] for p in params], w)


def test_fixed_point(two_comp_10k):
    cfg = FitConfig(seed=2)
    res = em_fit(two_comp_10k, 2, cfg)
    x = two_comp_10k
    z = responsibilities(x, res.model)
    params = [update_component(x, z[:, k]) for k in range(2)]
    again = MixtureModel.from_arrays([p[0] for p in params], [p[1] for p in params],
                                     update_weights(z))
    assert abs(log_likelihood(x, again) - res.final_loglik) <= 10 * cfg.tol * x.size


def test_determinism(three_comp_2k):
    cfg = FitConfig(seed=11, restarts=2)
    a = multi_restart_fit(three_comp_2k, 3, cfg)
    b = multi_restart_fit(three_comp_2k, 3, cfg)
    assert a.model == b.model
    assert a.loglik_trajectory == b.loglik_trajectory


@pytest.mark.parametrize("c", [2.0, 0.01, 37.5])
def test_scale_equivariance(two_comp_10k, c):
    cfg = FitConfig(seed=4, restarts=1)
    base = em_fit(two_comp_10k, 2, cfg)
    scaled = em_fit(two_comp_10k * c, 2, cfg)
    assert base.iterations == scaled.iterations
    assert np.allclose(scaled.model.shapes, base.model.shapes, rtol=1e-8, atol=0)
    assert np.allclose(scaled.model.weights, base.model.weights, rtol=1e-8, atol=0)
    assert np.allclose(scaled.model.scales, c * base.model.scales, rtol=1e-8, atol=0)


# -- divergence handling ------------------------------------------------------------

def test_divergence_restarts_then_recovers(two_comp_10k):
    from cfgmm.em import _closed_form_step
    calls = {"n": 0}

    def flaky(d, s, shapes, scales):
        calls["n"] += 1
        if calls["n"] <= 2:
            raise DegenerateComponentError("forced")
        return _closed_form_step(d, s, shapes, scales)

    res = run_em(two_comp_10k, 2, FitConfig(seed=0), flaky, "cfgmm")
    assert res.converged and res.divergence_restarts == 2


def test_divergence_exhausted(two_comp_10k):
    def broken(d, s, shapes, scales):
        return shapes * np.inf, scales

    res = run_em(two_comp_10k, 2, FitConfig(seed=0, max_divergence_retries=3), broken, "cfgmm")
    assert not res.converged and res.status == "diverged"
    assert res.divergence_restarts == 4


def test_empty_component_counts_as_divergence():
    # Two tight clusters and a third component: one block will starve.
    x = np.concatenate([np.full(50, 1.0) + np.linspace(0, 1e-3, 50),
                        np.full(50, 100.0) + np.linspace(0, 1e-3, 50)])
    res = em_fit(x, 3, FitConfig(seed=0, max_divergence_retries=2))
    assert res.status in {"converged", "max_iter", "diverged"}
    assert np.all(np.isfinite(res.model.shapes))


# -- restarts -------------------------------------------------------------------------

def test_single_restart_equals_em_fit(two_comp_10k):
    cfg = FitConfig(seed=21, restarts=1)
    a = multi_restart_fit(two_comp_10k, 2, cfg)
    b = em_fit(two_comp_10k, 2, cfg)
    assert a.model == b.model and a.loglik_trajectory == b.loglik_trajectory


def test_restart_selection(three_comp_2k):
    cfg = FitConfig(seed=3, restarts=5)
    res = multi_restart_fit(three_comp_2k, 3, cfg)
    assert res.restarts_used == 5 and len(res.restart_logliks) == 5
    singles = [em_fit(three_comp_2k, 3, replace(cfg, seed=cfg.seed + r)) for r in range(5)]
    converged = [s.final_loglik for s in singles if s.converged]
    assert res.final_loglik == max(converged)
    assert all(res.final_loglik >= s.final_loglik for s in singles if s.converged)
    assert list(res.restart_logliks) == [s.final_loglik for s in singles]


def test_unknown_method(two_comp_10k):
    with pytest.raises(ValueError):
        multi_restart_fit(two_comp_10k, 2, method="kmeans")
    with pytest.raises(ValueError):
        multi_restart_fit(two_comp_10k, 2, method="constrained")
