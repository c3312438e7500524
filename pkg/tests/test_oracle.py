import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoney import oracle
from smoney.errors import CapabilityError, DomainError
from smoney.oracle import (
    build_Dab,
    build_Dab_termwise,
    ideal_bb84,
    norm_upper_bound,
    max_norm_closed,
    max_norm_exact,
    random_spec,
    rho_eigen_check,
    tilted_spec,
)
from smoney.qmath import lambda_bound

BB84_SITE = 0.5 + 1 / (2 * math.sqrt(2))


def test_single_site_operator_eigenvalues():
    D = build_Dab(ideal_bb84(1), "0", "0", "0", 0.0)
    assert np.linalg.eigvalsh(D) == pytest.approx([0.5 * (1 - 1 / math.sqrt(2)), BB84_SITE], abs=1e-15)


def test_full_budget_gives_identity():
    spec = random_spec(np.random.default_rng(1), 3, 0.1, 0.05)
    assert np.allclose(build_Dab(spec, "000", "101", "011", 1.0), np.eye(8), atol=1e-13)


def test_two_site_ideal_norm():
    res = max_norm_exact(ideal_bb84(2), 0.0, exhaustive=True)
    assert res.norm_exact == pytest.approx(0.7285533905932737, abs=1e-12)


@pytest.mark.parametrize("N", [1, 3, 5])
def test_ideal_norm_powers(N):
    res = max_norm_exact(ideal_bb84(N), 0.0)
    assert res.norm_exact == pytest.approx(BB84_SITE**N, abs=1e-12)
    assert res.norm_closed == pytest.approx(BB84_SITE**N, abs=1e-14)


def test_three_site_value():
    assert max_norm_exact(ideal_bb84(3), 0.0).norm_exact == pytest.approx(0.6218592168, abs=1e-10)


def test_biased_basis_closed_and_exact_agree():
    spec = tilted_spec(np.zeros(2), np.zeros(2), np.full(2, 0.6))
    lam = 0.5 * (1 - math.sqrt(1 - 0.5 * 0.96))
    assert lam == pytest.approx(lambda_bound(0.0, 0.1), rel=1e-14)
    res = max_norm_exact(spec, 0.0, exhaustive=True)
    assert res.norm_exact == pytest.approx((1 - lam) ** 2, abs=1e-12)
    assert res.norm_closed == pytest.approx((1 - lam) ** 2, abs=1e-12)


def test_closed_form_reference_values():
    assert max_norm_closed(5, 0.0, 1 / math.sqrt(2), 0.0) == pytest.approx(BB84_SITE**5, rel=1e-14)
    lam = lambda_bound(0.0, 0.0)
    val = max_norm_closed(20, 0.1, 1 / math.sqrt(2), 0.0)
    assert val <= math.exp(-(20 * lam / 2) * (1 - 0.1 / lam) ** 2)
    assert max_norm_closed(8, 0.12, 1 / math.sqrt(2), 0.0) == max_norm_closed(8, 0.0, 1 / math.sqrt(2), 0.0)


def test_norm_upper_bound_regimes():
    lam = lambda_bound(0.0, 0.0)
    assert norm_upper_bound(4, 0.0, 1 / math.sqrt(2), 0.0) == pytest.approx((1 - lam) ** 4)
    assert norm_upper_bound(4, 0.2, 1 / math.sqrt(2), 0.0) == 1.0


def test_dp_builder_matches_termwise():
    rng = np.random.default_rng(7)
    for N, gamma in ((2, 0.0), (3, 0.34), (4, 0.5)):
        spec = random_spec(rng, N, 0.2, 0.1, homogeneous=False)
        h, a, b = (rng.integers(0, 2, N) for _ in range(3))
        assert np.allclose(build_Dab(spec, h, a, b, gamma), build_Dab_termwise(spec, h, a, b, gamma), atol=1e-13)


def test_operators_are_psd():
    rng = np.random.default_rng(3)
    for _ in range(20):
        N = int(rng.integers(1, 6))
        spec = random_spec(rng, N, 0.3, 0.2, homogeneous=False)
        h, a, b = (rng.integers(0, 2, N) for _ in range(3))
        D = build_Dab(spec, h, a, b, float(rng.uniform(0, 0.5)))
        assert np.linalg.eigvalsh(D).min() >= -1e-10


def test_norm_nondecreasing_in_error_budget():
    spec = random_spec(np.random.default_rng(5), 5, 0.15, 0.05)
    norms = [max_norm_exact(spec, g).norm_exact for g in (0.0, 0.2, 0.4, 0.6, 1.0)]
    assert all(np.diff(norms) >= -1e-12)
    assert norms[-1] == pytest.approx(1.0, abs=1e-12)


def test_reference_string_does_not_change_norm():
    rng = np.random.default_rng(11)
    spec = random_spec(rng, 3, 0.2, 0.1)
    base = max_norm_exact(spec, 0.34).norm_exact
    for _ in range(10):
        h = rng.integers(0, 2, 3)
        assert max_norm_exact(spec, 0.34, h=h).norm_exact == pytest.approx(base, abs=1e-10)


def test_symmetry_reduction_matches_exhaustive():
    spec = random_spec(np.random.default_rng(2), 4, 0.25, 0.1)
    reduced = max_norm_exact(spec, 0.25)
    full = max_norm_exact(spec, 0.25, exhaustive=True)
    assert reduced.norm_exact == pytest.approx(full.norm_exact, abs=1e-12)


def test_parallel_matches_serial():
    spec = random_spec(np.random.default_rng(4), 3, 0.2, 0.1, homogeneous=False)
    serial = max_norm_exact(spec, 0.34)
    parallel = max_norm_exact(spec, 0.34, jobs=2)
    assert parallel.norm_exact == pytest.approx(serial.norm_exact, abs=1e-14)


def test_inhomogeneous_closed_form():
    spec = random_spec(np.random.default_rng(8), 4, 0.3, 0.2, homogeneous=False)
    res = max_norm_exact(spec, 0.25)
    assert res.norm_exact == pytest.approx(res.norm_closed, abs=1e-10)
    assert res.norm_exact <= res.bound + 1e-9


def test_result_record_fields():
    rec = json.loads(max_norm_exact(ideal_bb84(2), 0.0).to_json())
    assert set(rec) == {"spec_hash", "N", "gamma_err", "norm_exact", "norm_closed", "bound", "argmax_a", "argmax_b"}
    assert len(rec["argmax_a"]) == 2 and len(rec["spec_hash"]) == 16


def test_spec_validation_and_caps():
    with pytest.raises(CapabilityError):
        ideal_bb84(13)
    with pytest.raises(CapabilityError):
        max_norm_exact(random_spec(np.random.default_rng(0), 7, 0.1, 0.1, homogeneous=False), 0.0)
    bad = ideal_bb84(1).states.copy()
    bad[0, 1, 0] = bad[0, 0, 0]
    with pytest.raises(DomainError):
        oracle.PreparationSpec(bad, np.array([0.5]), 1 / math.sqrt(2))
    with pytest.raises(DomainError):
        tilted_spec([0.3], [0.0], [0.5], overlap_cap=1 / math.sqrt(2))
    with pytest.raises(DomainError):
        build_Dab(ideal_bb84(2), "0", "00", "00", 0.0)


def test_symmetry_reduction_reaches_beyond_exhaustive_cap():
    res = max_norm_exact(ideal_bb84(8), 0.0)
    assert res.norm_exact == pytest.approx(BB84_SITE**8, abs=1e-12)


# Average-state eigenvalue bound -----------------------------------------------------


def test_rho_check_reference_values():
    exact, bound = rho_eigen_check(0.0, 0.2, 0.1)
    assert exact == pytest.approx(0.5, abs=1e-14) and bound == 0.5
    exact, bound = rho_eigen_check(0.5, 0.0, 0.0)
    assert exact == pytest.approx(0.5 * (1 + 1 / math.sqrt(2)), abs=1e-14)
    assert bound == pytest.approx(exact, abs=1e-12)
    exact, bound = rho_eigen_check(0.1, 0.1, math.radians(5))
    assert exact <= bound + 1e-12 and bound - exact >= 0


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0, math.pi / 4, exclude_max=True))
def test_rho_bound_holds(bps, bpb, theta):
    exact, bound = rho_eigen_check(bps, bpb, theta, xi_points=16, prob_points=3)
    assert exact <= bound + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.floats(0, math.pi / 4, exclude_max=True), st.floats(0, 0.49), st.integers(0, 2**32 - 1))
def test_random_specs_obey_bound(N, theta, beta, seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, N, theta, beta)
    lam = lambda_bound(theta, beta)
    gamma = float(rng.uniform(0, lam)) if rng.random() < 0.7 else 0.0
    res = max_norm_exact(spec, gamma)
    assert res.norm_exact <= res.bound + 1e-9
    assert res.norm_exact == pytest.approx(res.norm_closed, abs=1e-9)
