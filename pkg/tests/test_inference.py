import math

import numpy as np
import pytest

from breakdown.data import mcar_estimate
from breakdown.divergence import KL, SQ_HELLINGER
from breakdown.dual import nu_hat
from breakdown.harness import LOGIT_YBAR, draw, get_design
from breakdown.inference import (
    EstimateOptions,
    InferenceError,
    attach_inference,
    convexity_scan,
    estimate_breakdown,
    jacobian_phi_hat,
    lower_ci,
    stacked_moments,
)
from breakdown.moments import EmptyRegionError, Hypothesis, build_constraints, builtin_mean


def setup(design, n, seed=0):
    s = draw(design, n, seed)
    des = get_design(design)
    model = des.model()
    b_mcar = mcar_estimate(s, model)
    return s, model, build_constraints(model, s, des.mode), des.hypothesis(b_mcar), b_mcar


@pytest.fixture(scope="module")
def logit_fit():
    s, model, cs, hyp, b_mcar = setup("logit", 3000, 2)
    res = estimate_breakdown(s, model, cs, SQ_HELLINGER, hyp, b_mcar=b_mcar)
    attach_inference(res, cs, SQ_HELLINGER)
    return s, cs, hyp, res


def test_uniform_mean_minimiser_is_the_null_boundary():
    s, model, cs, hyp, b_mcar = setup("uniform-mean", 2000)
    res = estimate_breakdown(s, model, cs, SQ_HELLINGER, hyp, b_mcar=b_mcar)
    assert res.b_star[0] == pytest.approx(0.4, abs=1e-9)
    assert res.delta_hat == pytest.approx(nu_hat(cs, SQ_HELLINGER, [0.4]).value, abs=1e-12)
    assert res.diagnostics["warnings"] == []


def test_logit_estimate_is_a_global_minimum(logit_fit):
    s, cs, hyp, res = logit_fit
    assert hyp.contains(res.b_star, tol=1e-9)
    # MCAR violates the null, so the minimiser sits on the null hyperplane
    assert float(np.dot(LOGIT_YBAR, res.b_star)) == pytest.approx(0.0, abs=1e-6)
    rng = np.random.default_rng(99)
    for b in hyp.random_points(rng, 40):
        try:
            v = nu_hat(cs, SQ_HELLINGER, b).value
        except Exception:
            continue
        assert v >= res.delta_hat - 1e-7


def test_logit_inference_fields(logit_fit):
    _, _, _, res = logit_fit
    assert res.sigma_hat > 0
    assert res.ci_lower == pytest.approx(lower_ci(res.delta_hat, res.sigma_hat, res.n, 0.05))
    assert res.ci_lower < res.delta_hat
    assert res.diagnostics["jacobian_min_singular"] > 1e-10
    assert res.to_dict()["delta_hat_infinite"] is False


def test_stacked_moments_vanish_at_the_estimate(logit_fit):
    _, cs, _, res = logit_fit
    psi = stacked_moments(cs, SQ_HELLINGER, res.b_star, res.theta_hat)
    np.testing.assert_allclose(psi.mean(axis=0), 0.0, atol=1e-8)


def test_jacobian_matches_finite_differences(logit_fit):
    _, cs, _, res = logit_fit
    v, lam, p = res.theta_hat
    theta = np.concatenate([[v], lam, [p]])
    m = lam.size

    def mean_psi(t):
        return stacked_moments(cs, SQ_HELLINGER, res.b_star, (t[0], t[1 : m + 1], t[m + 1])).mean(axis=0)

    jac = jacobian_phi_hat(cs, SQ_HELLINGER, res.b_star, res.theta_hat)
    eps = 1e-6
    fd = np.column_stack([
        (mean_psi(theta + eps * e) - mean_psi(theta - eps * e)) / (2 * eps) for e in np.eye(theta.size)
    ])
    np.testing.assert_allclose(jac, fd, rtol=1e-6, atol=1e-8)


def test_lower_ci_formula():
    assert lower_ci(0.2, 1.0, 100, 0.05) == pytest.approx(0.2 - 0.1 * 1.6448536269514722, abs=1e-15)
    assert lower_ci(0.2, 1.0, 100, 0.5) == pytest.approx(0.2, abs=1e-15)


def test_inference_refuses_near_singular_jacobian(logit_fit):
    s, cs, hyp, res = logit_fit
    with pytest.raises(InferenceError):
        attach_inference(res, cs, SQ_HELLINGER, min_singular=1e6)
    assert "singular-jacobian" in res.diagnostics["warnings"]
    with pytest.raises(ValueError):
        attach_inference(res, cs, SQ_HELLINGER, alpha=1.5)


def test_unrationalisable_null_gives_infinite_breakdown_point():
    # under KL with p = 0.7 only b in (0.35, 0.65) is reachable
    s, model, cs, _, b_mcar = setup("uniform-mean", 1000)
    hyp = Hypothesis([[0.0, 1.0]], [[1.0]], [0.2])
    res = estimate_breakdown(s, model, cs, KL, hyp, EstimateOptions(n_audit=10), b_mcar=b_mcar)
    attach_inference(res, cs, KL)
    assert res.delta_hat == math.inf
    assert res.ci_lower is None and res.sigma_hat is None
    assert "null-not-rationalizable" in res.diagnostics["warnings"]
    d = res.to_dict()
    assert d["delta_hat"] is None and d["delta_hat_infinite"] is True


def test_region_and_dimension_errors():
    s, model, cs, _, b_mcar = setup("uniform-mean", 500)
    with pytest.raises(EmptyRegionError):
        estimate_breakdown(s, model, cs, SQ_HELLINGER, Hypothesis([[0.0, 1.0]], [[1.0]], [-0.5]))
    with pytest.raises(ValueError):
        estimate_breakdown(s, model, cs, SQ_HELLINGER, Hypothesis([[0.0, 1.0]] * 2, [[1.0, 0.0]], [0.4]))


def test_box_boundary_warning():
    s, model, cs, _, b_mcar = setup("uniform-mean", 1000)
    hyp = Hypothesis([[0.0, 0.45]], [[1.0]], [0.46])
    res = estimate_breakdown(s, model, cs, SQ_HELLINGER, hyp, b_mcar=b_mcar)
    assert res.b_star[0] == pytest.approx(0.45)
    assert "minimizer-on-box-boundary" in res.diagnostics["warnings"]


def test_estimate_is_invariant_to_thread_count():
    s, model, cs, hyp, b_mcar = setup("logit", 1500, 5)
    a = estimate_breakdown(s, model, cs, SQ_HELLINGER, hyp, EstimateOptions(threads=1), b_mcar=b_mcar)
    b = estimate_breakdown(s, model, cs, SQ_HELLINGER, hyp, EstimateOptions(threads=4), b_mcar=b_mcar)
    assert a.to_dict() == b.to_dict()


def test_options_report_omits_threads():
    assert "threads" not in EstimateOptions(threads=8).to_dict()


def test_convexity_scan_logit():
    s, model, cs, hyp, _ = setup("logit", 1500, 3)
    rep = convexity_scan(cs, SQ_HELLINGER, hyp.box, n_pairs=3, n_grid=20, seed=1)
    assert rep.triples_checked > 0
    assert rep.max_violation <= 1e-6
    assert rep.evaluated + rep.skipped == 60


def test_convexity_scan_linear_inside_the_rationalisable_region():
    # MCAR +- 0.1 keeps every grid point finite (+- 0.15 already leaves the
    # rationalisable region), so every triple is checked
    s, model, cs, _, b_mcar = setup("linear", 5000, 3)
    box = np.column_stack([b_mcar - 0.1, b_mcar + 0.1])
    rep = convexity_scan(cs, SQ_HELLINGER, box, n_pairs=4, n_grid=15, seed=2)
    assert rep.skipped == 0
    assert rep.triples_checked == 4 * 13
    assert rep.max_violation <= 1e-6


def test_convexity_scan_rejects_short_grid():
    s = draw("uniform-mean", 200, 0)
    cs = build_constraints(builtin_mean(), s)
    with pytest.raises(ValueError):
        convexity_scan(cs, SQ_HELLINGER, [[0.0, 1.0]], n_grid=2)
