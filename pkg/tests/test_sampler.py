from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from tmsynce.diagnostics import integrated_time
from tmsynce.errors import ConfigurationError, InversionError
from tmsynce.model import BananaDensity, QuarticDensity, StandardGaussian
from tmsynce.sampler import (OPTIMAL_SCALE, ChainState, CoupledChainState, GaussianKernel, LevelMaps,
                             ProposalConfig, RandomStream, RunConfig, adapt_covariance, coupled_step,
                             mh_step, mixture_log_density, run_coupled, run_repetitions, run_single,
                             synce_propose, tm_mh_step, tm_synce_propose)
from tmsynce.transport import (AnalyticalBananaMap, AnalyticalQuarticMap, AnalyticalQuarticToBananaMap,
                               ComposedMap, IdentityMap, MapTrainer, MonotoneTriangularMap, TransportMap)

TARGETS = (QuarticDensity(), BananaDensity())
TRUE_MAPS = LevelMaps(AnalyticalQuarticMap(), AnalyticalBananaMap())
STARTS = ([4.0, 0.0], [-4.0, 0.0])


# --------------------------------------------------------------- streams

def test_stream_is_reproducible_and_counts():
    a, b = RandomStream(5), RandomStream(5)
    draws_a = [a.uniform() for _ in range(10)] + list(a.normal(3))
    draws_b = [b.uniform() for _ in range(10)] + list(b.normal(3))
    assert draws_a == draws_b
    assert a.uniform_count == 10 and a.normal_count == 3


def test_stream_block_size_does_not_change_uniforms():
    a, b = RandomStream(1, block=7), RandomStream(1, block=4096)
    assert [a.uniform() for _ in range(50)] == [b.uniform() for _ in range(50)]


def test_chain_streams_differ():
    assert RandomStream.for_chain(0, 0).uniform() != RandomStream.for_chain(0, 1).uniform()
    assert RandomStream.for_chain(3, 2).uniform() == RandomStream.for_chain(3, 2).uniform()


# ----------------------------------------------------------- densities

def test_kernel_against_scipy(rng):
    cov = np.array([[2.0, 0.4], [0.4, 1.0]])
    k = GaussianKernel(cov)
    x, m = rng.normal(size=2), rng.normal(size=2)
    assert k.log_pdf(x, m) == pytest.approx(stats.multivariate_normal(m, cov).logpdf(x), rel=1e-12)
    np.testing.assert_allclose(k.chol @ k.chol.T, cov)


@pytest.mark.parametrize("cov", [np.array([[1.0, 2.0], [2.0, 1.0]]), np.array([[1.0, 0.5], [0.0, 1.0]])])
def test_kernel_rejects_bad_covariance(cov):
    with pytest.raises(ConfigurationError):
        GaussianKernel(cov)


@given(st.floats(0, 1), st.integers(0, 10_000))
def test_mixture_density_against_scipy(omega, seed):
    rng = np.random.default_rng(seed)
    cov = np.diag(rng.uniform(0.5, 2.0, 2))
    a, b = rng.normal(size=2), rng.normal(size=2)
    expected = np.log(omega * stats.multivariate_normal(np.zeros(2), cov).pdf(a)
                      + (1 - omega) * stats.multivariate_normal(b, cov).pdf(a))
    assert mixture_log_density(a, b, GaussianKernel(cov), omega) == pytest.approx(expected, rel=1e-10, abs=1e-10)


def test_proposal_defaults_and_validation():
    p = ProposalConfig(2)
    np.testing.assert_allclose(p.covariance, OPTIMAL_SCALE / 2 * np.eye(2))
    assert OPTIMAL_SCALE == pytest.approx(2.38**2)
    with pytest.raises(ConfigurationError):
        ProposalConfig(2, omega=1.5)
    with pytest.raises(ConfigurationError):
        ProposalConfig(2, np.eye(3))
    q = p.with_covariance(np.eye(2))
    assert q.omega == p.omega and np.array_equal(q.covariance, np.eye(2))


def test_run_config_validation():
    with pytest.raises(ConfigurationError):
        RunConfig(100, burn_in=100)
    with pytest.raises(ConfigurationError):
        RunConfig(0)
    with pytest.raises(ConfigurationError):
        RunConfig(10, retrain_period=0)


def test_initial_state_requires_support():
    class Box:
        dim = 1

        def log_pdf(self, x):
            return 0.0 if abs(float(np.ravel(x)[0])) < 1 else -math.inf

    with pytest.raises(ConfigurationError):
        ChainState.initial(Box(), [2.0])


# -------------------------------------------------------------- kernels

def test_tm_mh_with_identity_is_bit_identical_to_mh():
    target = BananaDensity()
    prop = ProposalConfig(2)
    a = ChainState.initial(target, [-4.0, 0.0])
    b = ChainState.initial(target, [-4.0, 0.0], IdentityMap(2))
    ra, rb = RandomStream(99), RandomStream(99)
    for _ in range(10_000):
        mh_step(a, target, prop, ra)
        tm_mh_step(b, target, IdentityMap(2), prop, rb)
        assert np.array_equal(a.theta, b.theta) and a.log_pdf == b.log_pdf
    assert a.accepted == b.accepted > 0


def test_mh_step_acceptance_oracle():
    # [DERIVED] replay the stream by hand
    target = StandardGaussian(2)
    prop = ProposalConfig(2, np.eye(2))
    state = ChainState.initial(target, [0.5, -0.5])
    replay = np.random.default_rng(7)
    z = replay.standard_normal(4096 * 2)[:2]
    u = replay.random(4096)[0]
    before = state.theta.copy()
    mh_step(state, target, prop, RandomStream(7))
    new = before + z
    alpha = min(1.0, math.exp(-0.5 * (new @ new) + 0.5 * (before @ before)))
    assert state.last_accepted == (u < alpha)


def _replay_coupled(seed, coupled, maps, omega, cov):
    """Independent recomputation of both acceptance probabilities."""
    gen = np.random.default_rng(seed)
    uniforms = gen.random(4096)
    branch = uniforms[0] < omega
    z = np.linalg.cholesky(cov) @ gen.standard_normal(4096 * 2)[:2]
    out = []
    for state, tmap, target in ((coupled.fine, maps[0], TARGETS[0]), (coupled.coarse, maps[1], TARGETS[1])):
        r = tmap.forward(state.theta)
        r_new = z if branch else r + z
        x_new = tmap.inverse(r_new)

        def q(a, b):
            return (omega * stats.multivariate_normal(np.zeros(2), cov).pdf(a)
                    + (1 - omega) * stats.multivariate_normal(b, cov).pdf(a))

        log_alpha = (target.log_pdf(x_new) - target.log_pdf(state.theta)
                     + tmap.log_det_jacobian(state.theta) - tmap.log_det_jacobian(x_new)
                     + np.log(q(r, r_new)) - np.log(q(r_new, r)))
        out.append(min(1.0, math.exp(log_alpha)))
    return branch, out, uniforms[1]


@pytest.mark.parametrize("omega", [0.0, 0.3, 1.0])
def test_coupled_step_acceptance_oracle(omega):
    # [DERIVED] acceptance ratio written out with scipy densities, deep maps with nonzero log-dets
    inner = MonotoneTriangularMap(2, 2)
    inner.parameters = inner.parameters + np.random.default_rng(1).uniform(-0.2, 0.2, inner.num_parameters)
    maps = (ComposedMap(AnalyticalQuarticMap(), inner), AnalyticalBananaMap())
    cov = np.array([[1.5, 0.2], [0.2, 0.7]])
    for seed in range(20):
        coupled = CoupledChainState(ChainState.initial(TARGETS[0], [4.3, -0.4], maps[0]),
                                    ChainState.initial(TARGETS[1], [-3.6, 0.2], maps[1]))
        branch, expected, u = _replay_coupled(seed, coupled, maps, omega, cov)
        record = {}
        coupled_step(coupled, TARGETS, maps, ProposalConfig(2, cov, omega), RandomStream(seed), record)
        np.testing.assert_allclose(record["alpha"], expected, rtol=1e-8, atol=1e-12)
        assert coupled.last_branch_independent == branch
        assert coupled.fine.last_accepted == (u < expected[0])


def test_identical_levels_stay_synchronized():
    # [TRIVIAL] same target, map and start: the coupling keeps both chains equal
    coupled = CoupledChainState(ChainState.initial(TARGETS[1], [-4, 0]), ChainState.initial(TARGETS[1], [-4, 0]))
    rng = RandomStream(0)
    for _ in range(2000):
        coupled_step(coupled, (TARGETS[1], TARGETS[1]), (AnalyticalBananaMap(), AnalyticalBananaMap()),
                     ProposalConfig(2, omega=0.5), rng)
        assert np.array_equal(coupled.fine.theta, coupled.coarse.theta)


@given(seed=st.integers(0, 2**32 - 1), omega=st.floats(0, 1))
def test_shared_uniform_orders_acceptances(seed, omega):
    rng = np.random.default_rng(seed)
    coupled = CoupledChainState(ChainState.initial(TARGETS[0], [4, 0] + rng.normal(size=2)),
                                ChainState.initial(TARGETS[1], [-4, 0] + rng.normal(size=2)))
    record = {}
    coupled_step(coupled, TARGETS, TRUE_MAPS, ProposalConfig(2, omega=omega), RandomStream(seed), record)
    af, ac = record["alpha"]
    assert 0.0 <= af <= 1.0 and 0.0 <= ac <= 1.0
    if af >= ac and coupled.coarse.last_accepted:
        assert coupled.fine.last_accepted
    if ac >= af and coupled.fine.last_accepted:
        assert coupled.coarse.last_accepted


def test_tm_synce_shares_the_reference_increment():
    coupled = CoupledChainState(ChainState.initial(TARGETS[0], [4.2, 0.1], TRUE_MAPS.fine),
                                ChainState.initial(TARGETS[1], [-4.5, 0.3], TRUE_MAPS.coarse))
    prop = tm_synce_propose(coupled, TRUE_MAPS, ProposalConfig(2, omega=0.0), RandomStream(4))
    np.testing.assert_allclose(prop.fine.r - coupled.fine.r, prop.coarse.r - coupled.coarse.r, atol=1e-12)
    prop = tm_synce_propose(coupled, TRUE_MAPS, ProposalConfig(2, omega=1.0), RandomStream(4))
    np.testing.assert_allclose(prop.fine.r, prop.coarse.r)
    assert prop.independent


def test_synce_propose_shares_target_increment():
    a = ChainState.initial(TARGETS[0], [4.0, 0.0])
    b = ChainState.initial(TARGETS[1], [-4.0, 0.0])
    fa, fb = synce_propose(a, b, ProposalConfig(2), RandomStream(0))
    np.testing.assert_allclose(fa - a.theta, fb - b.theta)


class _Failing(TransportMap):
    dim = 2

    def _forward(self, x):
        return x.copy()

    def _inverse(self, r, hint):
        raise InversionError("no root")

    def _log_det(self, x):
        return np.zeros(len(x))


def test_inversion_failure_is_a_rejection():
    state = ChainState.initial(TARGETS[1], [-4.0, 0.0], _Failing())
    rng = RandomStream(0)
    tm_mh_step(state, TARGETS[1], _Failing(), ProposalConfig(2, omega=0.5), rng)
    assert not state.last_accepted and np.array_equal(state.theta, [-4.0, 0.0])
    assert rng.uniform_count == 2 and state.iteration == 1


def test_level_maps_configuration():
    deep = LevelMaps(AnalyticalQuarticToBananaMap(), AnalyticalBananaMap(), "deep")
    assert isinstance(deep.fine_effective, ComposedMap)
    assert TRUE_MAPS.fine_effective is TRUE_MAPS.fine
    with pytest.raises(ConfigurationError):
        LevelMaps(IdentityMap(2), IdentityMap(2), "sideways")
    with pytest.raises(ConfigurationError):
        LevelMaps(IdentityMap(2), IdentityMap(3))


# ----------------------------------------------------------- adaptation

def test_adapt_covariance_oracle(rng):
    prop = ProposalConfig(3, adapt=True, adapt_warmup=10)
    hist = rng.normal(size=(500, 3)) * [1, 2, 3]
    expected = OPTIMAL_SCALE / 3 * (np.cov(hist, rowvar=False) + 1e-6 * np.eye(3))
    np.testing.assert_allclose(adapt_covariance(hist, prop), expected)
    np.testing.assert_array_equal(adapt_covariance(hist[:5], prop), prop.covariance)


# -------------------------------------------------------------- runners

def test_single_chain_stationary_moments():
    # [DERIVED] banana moments E[x] = (-4, -1), Var[x] = (1, 3)
    res = run_single(TARGETS[1], AnalyticalBananaMap(), None, RunConfig(40_000, 2000, seed=3),
                     ProposalConfig(2, omega=0.5), STARTS[1])
    x = res.post_burn_in()
    for j, (mean, var) in enumerate(((-4.0, 1.0), (-1.0, 3.0))):
        se = math.sqrt(var * integrated_time(x[:, j]).tau / x.shape[0])
        assert abs(x[:, j].mean() - mean) < 5 * se
    assert 0.2 < res.fine.acceptance_rate < 0.95


def test_run_coupled_is_deterministic_and_records():
    rc = RunConfig(3000, 500, seed=11)
    a = run_coupled(TARGETS, TRUE_MAPS, None, rc, ProposalConfig(2, omega=0.5), STARTS, chain=1)
    b = run_coupled(TARGETS, TRUE_MAPS, None, rc, ProposalConfig(2, omega=0.5), STARTS, chain=1)
    c = run_coupled(TARGETS, TRUE_MAPS, None, rc, ProposalConfig(2, omega=0.5), STARTS, chain=2)
    np.testing.assert_array_equal(a.fine.theta, b.fine.theta)
    np.testing.assert_array_equal(a.branch, b.branch)
    assert not np.array_equal(a.fine.theta, c.fine.theta)
    assert a.post_burn_in(1).shape == (2500, 2)
    assert 0.3 < a.branch.mean() < 0.7
    np.testing.assert_allclose(TARGETS[0].log_pdf(a.fine.theta), a.fine.log_pdf)


def test_run_coupled_retrains_and_logs_failures():
    maps = LevelMaps(MonotoneTriangularMap(2, 4), MonotoneTriangularMap(2, 2))
    res = run_coupled(TARGETS, maps, MapTrainer(period=100), RunConfig(1200, 200, 100, seed=0),
                      ProposalConfig(2, omega=0.5), STARTS)
    kinds = {(e["level"], e["event"]) for e in res.events}
    assert ("fine", "training_error") in kinds
    assert ("coarse", "trained") in kinds and ("fine", "trained") in kinds
    assert not np.allclose(maps.coarse.parameters, MonotoneTriangularMap(2, 2).parameters)


def test_run_coupled_deep_trains_fine_to_coarse():
    maps = LevelMaps(MonotoneTriangularMap(2, 4), AnalyticalBananaMap(), "deep")
    res = run_coupled(TARGETS, maps, MapTrainer(period=1000), RunConfig(2001, 500, 1000, seed=1),
                      ProposalConfig(2, omega=0.5), STARTS)
    fine_events = [e for e in res.events if e["level"] == "fine" and e["event"] == "trained"]
    assert fine_events and fine_events[-1]["loss"] < fine_events[-1]["initial_loss"]
    np.testing.assert_allclose(maps.fine.output_center, res.coarse.theta[:2000].mean(0), atol=1e-12)


def test_adaptation_happens_only_during_burn_in():
    prop = ProposalConfig(2, omega=0.0, adapt=True, adapt_epoch=100, adapt_warmup=200)
    res = run_single(TARGETS[1], AnalyticalBananaMap(), None, RunConfig(2000, 600, seed=0), prop, STARTS[1])
    its = [e["iteration"] for e in res.events if e["event"] == "adapted"]
    assert its == [200, 300, 400, 500]
    assert not np.allclose(res.covariance, prop.covariance)


def _job(chain):
    return run_coupled(TARGETS, TRUE_MAPS, None, RunConfig(500, 100, seed=5), ProposalConfig(2, omega=0.5),
                       STARTS, chain)


def test_repetitions_independent_of_workers():
    serial = run_repetitions(_job, 2, workers=1)
    parallel = run_repetitions(_job, 2, workers=2)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.fine.theta, b.fine.theta)
        np.testing.assert_array_equal(a.coarse.theta, b.coarse.theta)
