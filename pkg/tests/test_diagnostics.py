from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tmsynce.diagnostics import (REPORT_COLUMNS, ChainDiagnostics, DiagnosticWarning, autocorrelation,
                                 chain_diagnostics, compare, ess, iat, integrated_time, pearson, relative_to,
                                 report)


def ar1(phi, n, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=n)
    x = np.empty(n)
    x[0] = e[0] / math.sqrt(1 - phi * phi)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    return x


def test_autocorrelation_matches_direct_sum(rng):
    # [DERIVED] O(n^2) biased estimator as the oracle
    x = rng.normal(size=300).cumsum()
    xc = x - x.mean()
    direct = np.array([xc[: x.size - k] @ xc[k:] for k in range(40)]) / (xc @ xc)
    np.testing.assert_allclose(autocorrelation(x, 39), direct, atol=1e-12)


def test_ar1_autocorrelation_and_iat():
    # [DERIVED] AR(1): r(k) = phi^k, tau = (1 + phi) / (1 - phi)
    phi = 0.8
    x = ar1(phi, 200_000, 0)
    np.testing.assert_allclose(autocorrelation(x, 5), phi ** np.arange(6), atol=0.01)
    est = integrated_time(x)
    assert est.tau == pytest.approx((1 + phi) / (1 - phi), rel=0.05)
    assert not est.flagged
    assert est.ess == pytest.approx(x.size / est.tau)


def test_white_noise_iat_near_one(rng):
    assert integrated_time(rng.normal(size=50_000)).tau == pytest.approx(1.0, abs=0.05)


def test_constant_series():
    with pytest.raises(ValueError):
        autocorrelation(np.ones(10))
    est = integrated_time(np.ones(10))
    assert est.flagged and est.tau == 10 and est.ess == 1.0


def test_short_correlated_series_warns():
    x = ar1(0.999, 200, 1)
    with pytest.warns(DiagnosticWarning):
        iat(x)
    with pytest.warns(DiagnosticWarning):
        ess(x)


def test_converged_series_does_not_warn(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert iat(rng.normal(size=5000)) < 1.5


series = arrays(float, st.integers(20, 400), elements=st.floats(-100, 100, allow_nan=False))


def test_iat_of_underflowing_series_is_flagged():
    x = np.zeros(20)
    x[0] = 1.3e-217
    est = integrated_time(x)
    assert est.flagged and est.tau == 20


@given(series)
def test_iat_bounds(x):
    est = integrated_time(x)
    assert est.tau >= 1.0
    assert est.ess <= est.n + 1e-9


@given(series, st.floats(0.1, 10), st.floats(-5, 5))
def test_iat_affine_invariant(x, a, b):
    if np.ptp(x) < 1e-6:
        return
    assert integrated_time(a * x + b).tau == pytest.approx(integrated_time(x).tau, rel=1e-6)


def test_pearson(rng):
    x, y = rng.normal(size=(2, 100))
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], rel=1e-12)
    assert math.isnan(pearson(x, np.ones(100)))
    with pytest.raises(ValueError):
        pearson(x, y[:50])


def test_chain_diagnostics_worst_dimension(rng):
    f = rng.normal(size=(2000, 2))
    c = np.column_stack([f[:, 0], 0.3 * f[:, 1] + rng.normal(size=2000)])
    d = chain_diagnostics(f, c, 2.0)
    assert d.rho[0] == pytest.approx(1.0)
    assert d.rho_min == pytest.approx(d.rho[1])
    assert d.ess_min == min(d.ess) and d.tau_max == max(d.tau)
    assert math.isnan(chain_diagnostics(f, None, 1.0).rho_min)


def _chain(rho, ess_val, time):
    return ChainDiagnostics([rho, 1.0], [1000 / ess_val, 1.0], [ess_val, 1000.0], False, time)


def test_report_aggregates_medians_and_mean_time():
    chains = [_chain(0.5, 100, 1.0), _chain(0.7, 300, 2.0), _chain(0.6, 200, 6.0)]
    rep = report(chains, "LT direct", 0.5, sigma2_M=0.1)
    assert rep.rho_min == 0.6 and rep.ESS == 200 and rep.time == 3.0
    assert rep.ESS_per_sec == pytest.approx(200 / 3)
    assert rep.KL_m == pytest.approx(1 - math.exp(-0.1))
    assert list(rep.row()) == list(REPORT_COLUMNS)
    assert rep.to_dict()["chains"][0]["rho"] == [0.5, 1.0]


def test_relative_to_self_is_one():
    rep = report([_chain(0.5, 100, 1.0)], "No map", 0.0)
    relative_to(rep, rep)
    assert rep.rel_rho_min == 1.0 and rep.rel_ESS_per_sec == 1.0


def test_compare_matches_baseline_by_omega():
    reps = [report([_chain(0.1, 10, 1.0)], "No map", 0.0), report([_chain(0.05, 20, 1.0)], "No map", 0.5),
            report([_chain(0.4, 100, 1.0)], "LT", 0.0), report([_chain(0.5, 400, 1.0)], "LT", 0.5)]
    compare(reps, "No map")
    assert reps[2].rel_rho_min == pytest.approx(4.0) and reps[2].rel_ESS_per_sec == pytest.approx(10.0)
    assert reps[3].rel_rho_min == pytest.approx(10.0) and reps[3].rel_ESS_per_sec == pytest.approx(20.0)
    with pytest.raises(ValueError):
        compare(reps, "missing")
    with pytest.raises(ValueError):
        report([], "x", 0.0)
