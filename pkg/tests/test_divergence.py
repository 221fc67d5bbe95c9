import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from breakdown.divergence import (
    KL,
    REVERSE_KL,
    SQ_HELLINGER,
    DivergenceSpec,
    DomainError,
    cressie_read,
    divergence_between,
    parse_divergence,
)

ALL = [SQ_HELLINGER, KL, REVERSE_KL, cressie_read(0.5), cressie_read(2.0), cressie_read(-1.0)]
IDS = [s.name for s in ALL]


def interior_grid(spec, k=100, margin=1e-2):
    # relative central-difference error grows like (eps / distance to u*)^2
    lo, hi = spec.conjugate_domain
    lo = max(lo, -5.0) + margin
    hi = min(hi, 3.0) - margin
    return np.linspace(lo, hi, k)


@pytest.mark.parametrize("spec", ALL, ids=IDS)
def test_f_vanishes_at_one_and_is_nonnegative(spec):
    t = np.linspace(0.01, 10.0, 500)
    assert spec.f(1.0) == pytest.approx(0.0, abs=1e-15)
    assert np.all(spec.f(t) >= -1e-15)


@pytest.mark.parametrize("spec", ALL, ids=IDS)
def test_fenchel_equality_on_grid(spec):
    r = interior_grid(spec)
    t = spec.conj_d1(r)
    live = t > 0
    lhs = spec.f(t[live]) + spec.conj(r[live])
    np.testing.assert_allclose(lhs, r[live] * t[live], atol=1e-6, rtol=1e-6)


@pytest.mark.parametrize("spec", ALL, ids=IDS)
def test_conjugate_derivatives_match_finite_differences(spec):
    r = interior_grid(spec)
    eps = 1e-6
    fd1 = (spec.conj(r + eps) - spec.conj(r - eps)) / (2 * eps)
    fd2 = (spec.conj_d1(r + eps) - spec.conj_d1(r - eps)) / (2 * eps)
    np.testing.assert_allclose(spec.conj_d1(r), fd1, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(spec.conj_d2(r), fd2, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("spec", ALL, ids=IDS)
def test_primal_derivatives_match_finite_differences(spec):
    t = np.linspace(0.1, 5.0, 100)
    eps = 1e-6
    np.testing.assert_allclose(spec.f_d1(t), (spec.f(t + eps) - spec.f(t - eps)) / (2 * eps), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(spec.f_d2(t), (spec.f_d1(t + eps) - spec.f_d1(t - eps)) / (2 * eps), rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("spec", ALL, ids=IDS)
def test_conjugate_derivative_inverts_f_prime(spec):
    t = np.linspace(0.05, 5.0, 100)
    np.testing.assert_allclose(spec.conj_d1(spec.f_d1(t)), t, rtol=1e-10)


def test_closed_forms():
    assert SQ_HELLINGER.conj(0.25) == pytest.approx(0.25 / 0.5)
    assert KL.conj(1.0) == pytest.approx(math.e - 1)
    assert REVERSE_KL.conj(0.5) == pytest.approx(-math.log(0.5))
    assert SQ_HELLINGER.f(4.0) == pytest.approx(0.5)


def test_conjugate_is_infinite_beyond_upper_end():
    assert SQ_HELLINGER.conj(0.5) == math.inf
    assert REVERSE_KL.conj(1.5) == math.inf
    assert cressie_read(0.5).conj(2.0) == math.inf
    with pytest.raises(DomainError):
        SQ_HELLINGER.conj_d1(0.6)


def test_cressie_read_above_one_is_flat_below_lower_end():
    spec = cressie_read(2.0)
    lo, _ = spec.conjugate_domain
    assert lo == -1.0
    r = np.array([-5.0, -2.0, -1.0])
    np.testing.assert_allclose(spec.conj(r), -1.0 / 2.0)
    np.testing.assert_allclose(spec.conj_d1(r), 0.0)


def test_divergence_sup():
    assert SQ_HELLINGER.divergence_sup == 1.0
    assert cressie_read(0.5).divergence_sup == pytest.approx(4.0)
    assert KL.divergence_sup == math.inf
    assert cressie_read(2.0).divergence_sup == math.inf
    # mutually singular Q and P attain it
    assert divergence_between(SQ_HELLINGER, [0.0, 2.0], [0.5, 0.5]) == pytest.approx(0.5 * 0.5 + 0.5 * 0.5 * (math.sqrt(2) - 1) ** 2)


def test_two_atom_hellinger_value():
    # q = (0.4, 1.6) against p = (1/2, 1/2)
    assert divergence_between(SQ_HELLINGER, [0.4, 1.6], [0.5, 0.5]) == pytest.approx(0.0513167019494862, abs=1e-12)


def test_divergence_between_rejects_bad_inputs():
    with pytest.raises(ValueError):
        divergence_between(KL, [1.0, 1.0], [0.6, 0.6])
    with pytest.raises(ValueError):
        divergence_between(KL, [0.5, 0.5], [0.5, 0.5])
    assert divergence_between(KL, [0.0, 2.0], [0.5, 0.5]) == pytest.approx(0.5 * (2 * math.log(2) - 1) + 0.5)
    assert divergence_between(REVERSE_KL, [0.0, 2.0], [0.5, 0.5]) == math.inf


def test_parse_divergence():
    assert parse_divergence("kl") == KL
    assert parse_divergence("cressie-read:0.5") == cressie_read(0.5)
    for bad in ("cressie-read:1", "cressie-read:x", "chi2"):
        with pytest.raises(ValueError):
            parse_divergence(bad)
    with pytest.raises(ValueError):
        DivergenceSpec("kl", 2.0)


@given(
    st.lists(st.floats(0.01, 5.0), min_size=2, max_size=8),
    st.sampled_from(ALL),
)
def test_divergence_is_nonnegative_and_zero_only_at_p(weights, spec):
    p = np.asarray(weights) / np.sum(weights)
    q = np.ones_like(p)
    assert divergence_between(spec, q, p) == pytest.approx(0.0, abs=1e-14)
    q2 = np.linspace(0.5, 1.5, p.size)
    q2 = q2 / np.dot(q2, p)
    assert divergence_between(spec, q2, p) > 0.0


@given(st.floats(-20.0, 0.49), st.sampled_from(ALL))
def test_conjugate_is_convex_and_increasing(r, spec):
    lo, hi = spec.conjugate_domain
    if not lo < r < hi - 1e-6:
        return
    assert spec.conj_d1(r) >= 0.0
    assert spec.conj_d2(r) >= 0.0
