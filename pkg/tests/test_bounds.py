import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from smoney import bounds
from smoney.bounds import (
    REFERENCE_FIXED,
    NO_GUARANTEE,
    FreeVariables,
    SchemeParams,
    SweepFixed,
    beta_max_point,
    cor_exponents,
    delta,
    epsilon_cor,
    epsilon_multi,
    epsilon_priv,
    epsilon_rob,
    epsilon_unf,
    evaluate,
    union_exact,
    unf_rate,
)
from smoney.errors import DomainError, PreconditionError
from smoney.qmath import LogProb, h_factor, lambda_bound

EXPERIMENT = SchemeParams(
    N=40_000_000, P_det=0.019, gamma_det=0.018, E=0.058, gamma_err=0.07,
    beta_PB=2.4e-3, beta_PS=3.6e-3, theta=math.radians(10), P_noqub=3.8e-3, mu=0.09, eta=0.21,
)
EXPERIMENT_FREE = FreeVariables(nu_cor=0.009, nu_unf=3.9e-3)


def healthy(**changes):
    """A parameter set satisfying every constraint with a positive rate."""
    base = SchemeParams(N=10**6, P_det=0.5, gamma_det=0.4, E=0.02, gamma_err=0.03,
                        P_noqub=0.001, beta_PB=0.001, beta_PS=0.001, theta=0.01)
    return replace(base, **changes), FreeVariables(nu_cor=0.1, nu_unf=0.0015)


def f_by_hand(gamma_det, gamma_err, nu_unf, beta_PS, beta_PB, theta):
    """The unforgeability rate written out term by term, independent of bounds.unf_rate."""
    O = (math.cos(theta) + math.sin(theta)) / math.sqrt(2)
    lam = 0.5 * (1 - math.sqrt(1 - (1 - O**2) * (1 - 4 * beta_PB**2)))
    h = 2 * beta_PS * math.sqrt(0.5 + 2 * beta_PB**2 + (0.5 - 2 * beta_PB**2) * math.sin(2 * theta))
    d = gamma_det * gamma_err / (gamma_det - nu_unf)
    weight = gamma_det - nu_unf
    gain = (lam / 2) * (1 - d / lam) ** 2
    return weight * (gain - math.log(1 + 2 * beta_PS)) - (1 - weight) * math.log(1 + h)


# Robustness -----------------------------------------------------------------


def test_rob_experiment_exponent():
    assert epsilon_rob(EXPERIMENT).log == pytest.approx(-1052.6315789, abs=1e-6)


def test_rob_reference_values():
    p = SchemeParams(N=1000, P_det=0.02, gamma_det=0.01, E=0.01, gamma_err=0.015)
    assert epsilon_rob(p).log == pytest.approx(-2.5, rel=1e-14)
    tiny = replace(p, gamma_det=1e-15)
    assert epsilon_rob(tiny).log == pytest.approx(-0.02 * 1000 / 2, rel=1e-12)


def test_rob_names_violated_inequality():
    p = replace(EXPERIMENT, gamma_det=0.02)
    with pytest.raises(PreconditionError) as info:
        epsilon_rob(p)
    assert info.value.violations[0][0] == "gamma_det < P_det"
    assert info.value.violations[0][1] == pytest.approx(-0.001)


# Correctness ----------------------------------------------------------------


def test_cor_reference_terms():
    t1, t2 = cor_exponents(0.019, 0.0, 0.03, 0.05, 0.004, 4e7)
    # Independent arithmetic: (0.019*4e7/4)(1 - 0.008/0.019)^2 and (0.03*0.004*4e7/3)(2/3)^2.
    assert t1 == pytest.approx(-63684.2105263, rel=1e-10)
    assert t2 == pytest.approx(-711.111111, rel=1e-8)


def test_cor_degenerate_limits():
    _, t2 = cor_exponents(0.019, 0.0, 0.03, 0.05, 1e-15, 4e7)
    assert t2 > -1e-6
    _, t2 = cor_exponents(0.019, 0.0, 0.03, 0.03, 0.004, 4e7)
    assert t2 == 0.0


def test_cor_experiment_terms():
    res = epsilon_cor(EXPERIMENT, EXPERIMENT_FREE)
    assert res.terms == pytest.approx((-436.78998138, -297.93103448), rel=1e-9)
    assert res.eps.log == pytest.approx(-297.93103448, rel=1e-9)


def test_cor_constraints_named_individually():
    p = replace(EXPERIMENT, gamma_err=0.2)
    with pytest.raises(PreconditionError) as info:
        epsilon_cor(p, FreeVariables(0.5, 0.0039))
    names = {name for name, _ in info.value.violations}
    assert names == {"gamma_err/2 < E", "nu_cor < P_det(1-2beta_PB)/2"}


# Privacy --------------------------------------------------------------------


def test_priv_reference_values():
    assert epsilon_priv(0.01, 1) == 0.01
    assert epsilon_priv(0.0, 7) == 0.0
    assert epsilon_priv(0.01, 2) == pytest.approx(0.0101, rel=1e-12)


# Unforgeability ---------------------------------------------------------------


def test_unf_ideal_limit_rate():
    lam = lambda_bound(0.0, 0.0)
    assert unf_rate(0.018, 0.0, 0.0, lam, 0.0, 0.0) == pytest.approx(0.018 * lam / 2, rel=1e-14)


def test_delta_reference():
    assert delta(0.018, 0.05, 0.0) == pytest.approx(0.05, rel=1e-15)


def test_experiment_violates_beta_ps_limit():
    report = evaluate(EXPERIMENT, EXPERIMENT_FREE)
    assert report.unforgeability == "CONSTRAINT VIOLATED"
    assert [c.name for c in report.violations] == ["beta_PS < (exp((lambda/2)(1-delta/lambda)^2)-1)/2"]
    assert report.eps_unf is None and report.eps_rob.log == pytest.approx(-1052.63, abs=0.01)


def test_sweep_optimum_meets_target_at_reference_bias():
    pt = beta_max_point(REFERENCE_FIXED, 10, 0.058, 1e-9)
    p = SchemeParams(N=40_000_000, P_det=0.019, gamma_det=0.018, E=0.058, gamma_err=pt.gamma_err_opt,
                     beta_PB=6e-6, beta_PS=6e-6, theta=math.radians(10), P_noqub=3.8e-3)
    v = FreeVariables(nu_cor=pt.nu_cor_opt, nu_unf=3.9e-3)
    report = evaluate(p, v)
    assert report.constraints_ok and report.unforgeability == "GUARANTEED"
    half = math.log(1e-9 / 2)
    assert max(report.unf_terms) <= half
    assert max(report.cor_terms) <= half


def test_nonpositive_rate_reports_no_guarantee():
    # With few detections the multi-photon penalty outweighs the qubit gain.
    p, v = healthy(gamma_det=0.0035, beta_PS=1e-3)
    res = epsilon_unf(p, v)
    assert res.f <= 0
    assert res.eps is None and res.status == NO_GUARANTEE
    assert evaluate(p, v).unforgeability == NO_GUARANTEE


def test_healthy_point_is_guaranteed():
    p, v = healthy()
    report = evaluate(p, v)
    assert report.constraints_ok and report.unforgeability == "GUARANTEED"
    assert report.f_value == pytest.approx(-report.unf_terms[1] / p.N, rel=1e-12)


@settings(max_examples=1000, deadline=None)
@given(
    st.floats(0.005, 0.5), st.floats(0.0, 0.14), st.floats(0.0, 0.95),
    st.floats(0.0, 0.2), st.floats(0.0, 0.2), st.floats(0.0, 0.78),
)
def test_rate_matches_hand_expansion(gamma_det, gamma_err, nu_frac, bps, bpb, theta):
    nu_unf = nu_frac * gamma_det
    lam = lambda_bound(theta, bpb)
    assume(lam > 0)
    h = h_factor(bps, bpb, theta)
    ours = float(unf_rate(gamma_det, gamma_err, nu_unf, lam, bps, h))
    ref = f_by_hand(gamma_det, gamma_err, nu_unf, bps, bpb, theta)
    assert ours == pytest.approx(ref, rel=1e-12, abs=1e-15)


param_draws = st.builds(
    dict,
    N=st.integers(10, 10**8),
    P_det=st.floats(0.001, 1.0),
    gd_frac=st.floats(0.01, 1.2),
    E=st.floats(0.001, 0.2),
    ge_frac=st.floats(0.3, 3.0),
    beta_PB=st.floats(0.0, 0.1),
    beta_PS=st.floats(0.0, 0.1),
    theta=st.floats(0.0, 0.7),
    P_noqub=st.floats(0.0, 0.05),
    nu_cor=st.floats(1e-6, 0.6),
    nu_unf=st.floats(1e-6, 0.2),
)


@settings(max_examples=300, deadline=None)
@given(param_draws)
def test_evaluator_agrees_with_checker(d):
    gamma_det = d["gd_frac"] * d["P_det"]
    gamma_err = d["ge_frac"] * d["E"]
    assume(0 < gamma_det < 1 and 0 < gamma_err < 1)
    p = SchemeParams(N=d["N"], P_det=d["P_det"], gamma_det=gamma_det, E=d["E"], gamma_err=gamma_err,
                     beta_PB=d["beta_PB"], beta_PS=d["beta_PS"], theta=d["theta"], P_noqub=d["P_noqub"])
    v = FreeVariables(d["nu_cor"], d["nu_unf"])
    r = evaluate(p, v)
    if not all(c.ok for c in bounds.rob_constraints(p)):
        assert r.eps_rob is None
    if not all(c.ok for c in bounds.cor_constraints(p, v)):
        assert r.eps_cor is None
    if not all(c.ok for c in bounds.unf_constraints(p, v)):
        assert r.eps_unf is None and r.unforgeability == "CONSTRAINT VIOLATED"
    for eps in (r.eps_rob, r.eps_cor, r.eps_unf):
        assert eps is None or eps.log <= 1e-12


@settings(deadline=None)
@given(st.integers(10, 10**7), st.integers(1, 10**7))
def test_exponents_nonincreasing_in_N(N, extra):
    p, v = healthy(N=N)
    q = replace(p, N=N + extra)
    a, b = evaluate(p, v), evaluate(q, v)
    assert b.eps_rob.log <= a.eps_rob.log
    assert all(y <= x for x, y in zip(a.cor_terms, b.cor_terms))
    assert all(y <= x for x, y in zip(a.unf_terms, b.unf_terms))


# Many presentation points --------------------------------------------------------


def test_multi_single_round_reduces_exactly():
    p, v = healthy()
    single, multi = evaluate(p, v), epsilon_multi(p, v, C=1)
    assert multi.multi["eps_rob_exact"].log == pytest.approx(single.eps_rob.log, rel=1e-15)
    assert multi.multi["eps_rob_linear"] == single.eps_rob
    assert multi.multi["eps_cor_linear"] == single.eps_cor
    assert multi.multi["eps_unf"] == single.eps_unf
    assert multi.multi["eps_priv"] == single.eps_priv


def test_union_exact_small_eps():
    exact = union_exact(LogProb.from_value(1e-12), 5)
    assert exact.value == pytest.approx(5e-12, rel=1e-11)
    assert exact.value <= 5e-12


def test_multi_scales_unforgeability_by_pair_count():
    p, v = healthy(M=2)
    r = epsilon_multi(p, v, C=6)
    assert r.multi["eps_unf"].log == pytest.approx(r.eps_unf.log + math.log(6), rel=1e-15)
    assert r.multi["eps_priv"] == epsilon_priv(p.beta_E, 2)
    with pytest.raises(DomainError):
        epsilon_multi(p, v, C=-1)


# Parameter validation ---------------------------------------------------------


@pytest.mark.parametrize("field,value", [("N", 0), ("P_det", 0.0), ("beta_PS", 0.5), ("theta", 0.8), ("M", 0)])
def test_params_domain(field, value):
    with pytest.raises(DomainError):
        replace(EXPERIMENT, **{field: value})


def test_boundary_flags():
    p, _ = healthy(theta=0.0, beta_E=0.0)
    assert "theta=0" in p.boundary_flags and "beta_E=0" in p.boundary_flags


# Feasibility sweep --------------------------------------------------------------


ANCHORS = [(10, 0.058, 7.078578715942281e-06), (0, 0.01, 5.907532885585138e-04), (5, 0.03, 2.253986737022784e-04)]


@pytest.mark.parametrize("theta_deg,E,frozen", ANCHORS)
def test_sweep_anchor_frozen(theta_deg, E, frozen):
    pt = beta_max_point(REFERENCE_FIXED, theta_deg, E, 1e-9)
    assert pt.beta_max == pytest.approx(frozen, rel=1e-9)
    half = math.log(0.5e-9)
    assert max(pt.cor_T1, pt.cor_T2, pt.unf_T1, pt.unf_T2) <= half


def test_default_nu_unf_puts_first_term_at_half_target():
    nu = bounds.default_nu_unf(3.8e-3, 4e7, 1e-9)
    assert bounds.noqubit_exponent(3.8e-3, nu, 4e7) == pytest.approx(math.log(0.5e-9), rel=1e-12)
    assert round(nu, 4) == 3.9e-3


def test_grid_refine_agrees_with_boundary_solver():
    fast = beta_max_point(REFERENCE_FIXED, 5, 0.03, 1e-9)
    grid = bounds.refine_grid_sweep(REFERENCE_FIXED, 5, 0.03)
    assert grid.beta_max == pytest.approx(fast.beta_max, rel=0.01)
    assert grid.beta_max <= fast.beta_max * (1 + 1e-9)


def test_sweep_monotone_in_theta_and_reproducible():
    rows = bounds.sweep_beta_max()
    again = bounds.sweep_beta_max()
    assert [r.row() for r in rows] == [r.row() for r in again]
    for E in bounds.REFERENCE_E:
        betas = [r.beta_max for r in rows if r.E == E]
        assert len(betas) == 12 and all(np.diff(betas) <= 0)


def test_sweep_parallel_matches_serial():
    serial = bounds.sweep_beta_max(theta_deg_grid=[0, 6], E_list=[0.03])
    parallel = bounds.sweep_beta_max(theta_deg_grid=[0, 6], E_list=[0.03], jobs=2)
    assert [r.row() for r in serial] == [r.row() for r in parallel]


def test_infeasible_points_report_reason():
    pt = beta_max_point(SweepFixed(4e7, 0.019, 0.018, 3.8e-3, nu_unf=3.81e-3), 0, 0.01, 1e-9)
    assert pt.beta_max == 0.0 and "no-qubit" in pt.reason
    pt = beta_max_point(REFERENCE_FIXED, 0, 0.14, 1e-9)
    assert pt.beta_max == 0.0 and pt.reason


def test_sweep_rejects_bad_inputs():
    with pytest.raises(DomainError):
        beta_max_point(REFERENCE_FIXED, 0, 0.01, 0.0)
    with pytest.raises(DomainError):
        bounds.sweep_beta_max(theta_deg_grid=[])
    with pytest.raises(DomainError):
        bounds.sweep_beta_max(inner="newton")
