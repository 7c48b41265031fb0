"""Markov kernels and chain runners.

Single-level kernels are random-walk Metropolis-Hastings in target space
and its transport-map variant in reference space. The coupled kernel
drives a fine and a coarse chain with shared proposal and acceptance
randomness: one branch uniform, one Gaussian increment and one acceptance
uniform per iteration.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InversionError, TrainingError
from .model import LOG_2PI, TargetDensity
from .transport import ComposedMap, IdentityMap, MapTrainer, TransportMap, compose

logger = logging.getLogger(__name__)

OPTIMAL_SCALE = 2.38**2


class RandomStream:
    """Buffered uniform and normal draws with consumption counters.

    Buffers only change how draws are fetched from the generator, so the
    sequence seen by a kernel is a deterministic function of the seed and of
    the order of requests.
    """

    def __init__(self, seed=None, *, generator: np.random.Generator | None = None, block: int = 4096):
        self._gen = generator if generator is not None else np.random.default_rng(seed)
        self._block = block
        self._u: list[float] = []
        self._ui = 0
        self._n = np.empty(0)
        self._ni = 0
        self.uniform_count = 0
        self.normal_count = 0

    @classmethod
    def for_chain(cls, master_seed: int, chain_index: int) -> "RandomStream":
        """Independent stream for one repetition."""
        return cls(generator=np.random.default_rng([int(master_seed), int(chain_index)]))

    def uniform(self) -> float:
        if self._ui >= len(self._u):
            self._u = self._gen.random(self._block).tolist()
            self._ui = 0
        self._ui += 1
        self.uniform_count += 1
        return self._u[self._ui - 1]

    def normal(self, d: int) -> np.ndarray:
        if self._ni + d > self._n.size:
            self._n = self._gen.standard_normal(max(self._block, d) * d)
            self._ni = 0
        out = self._n[self._ni:self._ni + d]
        self._ni += d
        self.normal_count += d
        return out


class GaussianKernel:
    """Zero-mean Gaussian ``N(0, C)`` with cached factorization."""

    def __init__(self, covariance: np.ndarray):
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14):
            raise ConfigurationError("proposal covariance must be a symmetric matrix")
        try:
            self.chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("proposal covariance is not positive definite") from exc
        self.covariance = cov
        self.dim = cov.shape[0]
        self.inv_chol = np.linalg.inv(self.chol)
        self.log_norm = -float(np.log(np.diag(self.chol)).sum()) - 0.5 * self.dim * LOG_2PI

    def scale(self, eta: np.ndarray) -> np.ndarray:
        return self.chol @ eta

    def log_pdf(self, x: np.ndarray, mean=None) -> float:
        v = x if mean is None else x - mean
        w = self.inv_chol @ v
        return self.log_norm - 0.5 * float(w @ w)


def mixture_log_density(r_to, r_from, kernel: GaussianKernel, omega: float) -> float:
    """``log[omega N(r_to; 0, C) + (1 - omega) N(r_to; r_from, C)]``."""
    r_to = np.asarray(r_to, dtype=float)
    if omega <= 0.0:
        return kernel.log_pdf(r_to, r_from)
    if omega >= 1.0:
        return kernel.log_pdf(r_to)
    return float(np.logaddexp(math.log(omega) + kernel.log_pdf(r_to),
                              math.log1p(-omega) + kernel.log_pdf(r_to, r_from)))


@dataclass
class ProposalConfig:
    """Reference-space proposal settings.

    Attributes:
        dim: Parameter dimension.
        covariance: Proposal covariance; defaults to ``(2.38^2 / d) I``.
        omega: Probability of the shared independent branch.
        adapt: Enable covariance adaptation during burn-in.
        adapt_epoch: Iterations between adaptation updates.
        adapt_eps: Regularization added before scaling.
        adapt_warmup: Non-adaptive iterations before the first update.
    """

    dim: int
    covariance: np.ndarray | None = None
    omega: float = 0.0
    adapt: bool = False
    adapt_epoch: int = 500
    adapt_eps: float = 1e-6
    adapt_warmup: int = 1000

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError("proposal dimension must be positive")
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigurationError(f"omega must lie in [0, 1], got {self.omega}")
        if self.covariance is None:
            self.covariance = OPTIMAL_SCALE / self.dim * np.eye(self.dim)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if self.covariance.shape != (self.dim, self.dim):
            raise ConfigurationError("proposal covariance shape does not match dim")
        if self.adapt_epoch < 1 or self.adapt_warmup < 0 or self.adapt_eps < 0:
            raise ConfigurationError("invalid adaptation settings")
        self.kernel = GaussianKernel(self.covariance)

    def with_covariance(self, covariance: np.ndarray) -> "ProposalConfig":
        return ProposalConfig(self.dim, covariance, self.omega, self.adapt,
                              self.adapt_epoch, self.adapt_eps, self.adapt_warmup)


@dataclass
class ChainState:
    """Current point of one chain plus cached reference-space quantities."""

    theta: np.ndarray
    log_pdf: float
    r: np.ndarray | None = None
    log_det: float = 0.0
    iteration: int = 0
    accepted: int = 0
    last_accepted: bool = False

    @classmethod
    def initial(cls, target: TargetDensity, theta, tmap: TransportMap | None = None) -> "ChainState":
        theta = np.array(theta, dtype=float)
        lp = float(target.log_pdf(theta))
        if not math.isfinite(lp):
            raise ConfigurationError("initial point has zero posterior density")
        state = cls(theta, lp)
        if tmap is not None:
            state.refresh(tmap)
        return state

    def refresh(self, tmap: TransportMap) -> None:
        """Recompute the cached reference image and log-determinant."""
        self.r = np.asarray(tmap.forward(self.theta), dtype=float)
        self.log_det = float(tmap.log_det_jacobian(self.theta))

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.iteration if self.iteration else 0.0


@dataclass
class CoupledChainState:
    fine: ChainState
    coarse: ChainState
    iteration: int = 0
    last_branch_independent: bool = False


@dataclass
class LevelProposal:
    theta: np.ndarray
    r: np.ndarray
    log_det: float
    log_q_forward: float
    log_q_reverse: float


@dataclass
class CoupledProposal:
    fine: LevelProposal | None
    coarse: LevelProposal | None
    independent: bool


@dataclass
class LevelMaps:
    """Transport maps of a coupled pair.

    In the ``"deep"`` configuration ``fine`` pushes the fine posterior onto
    the coarse one and the fine chain uses ``coarse o fine``.
    """

    fine: TransportMap
    coarse: TransportMap
    configuration: str = "direct"

    def __post_init__(self):
        if self.configuration not in ("direct", "deep"):
            raise ConfigurationError(f"unknown map configuration {self.configuration!r}")
        if self.fine.dim != self.coarse.dim:
            raise ConfigurationError("fine and coarse maps differ in dimension")

    @property
    def fine_effective(self) -> TransportMap:
        if self.configuration == "deep":
            return compose(self.coarse, self.fine)
        return self.fine


def _acceptance(state: ChainState, lp_new: float, log_det_new: float, log_q_ratio: float) -> float:
    if math.isnan(lp_new):
        return 0.0
    log_alpha = (lp_new - state.log_pdf) + (state.log_det - log_det_new) + log_q_ratio
    if math.isnan(log_alpha):
        return 0.0
    return 1.0 if log_alpha >= 0.0 else math.exp(log_alpha)


def _update(state: ChainState, accept: bool, theta, lp, r=None, log_det=0.0) -> ChainState:
    state.iteration += 1
    state.last_accepted = accept
    if accept:
        state.theta = theta
        state.log_pdf = lp
        state.r = r
        state.log_det = log_det
        state.accepted += 1
    return state


def mh_step(state: ChainState, target: TargetDensity, proposal: ProposalConfig,
            rng: RandomStream) -> ChainState:
    """One random-walk Metropolis-Hastings step in target space.

    Consumes one normal vector, then one uniform. ``state`` is updated in
    place and returned.
    """
    theta_new = state.theta + proposal.kernel.scale(rng.normal(proposal.dim))
    lp_new = float(target.log_pdf(theta_new))
    alpha = _acceptance(state, lp_new, 0.0, 0.0)
    u = rng.uniform()
    return _update(state, u < alpha, theta_new, lp_new)


def tm_mh_step(state: ChainState, target: TargetDensity, tmap: TransportMap,
               proposal: ProposalConfig, rng: RandomStream) -> ChainState:
    """One transport-map Metropolis-Hastings step.

    The proposal is made in reference space and pulled back through
    ``tmap``. With ``omega > 0`` a branch uniform is drawn first and the
    mixture proposal is used; with ``omega == 0`` the draw pattern is the
    same as :func:`mh_step`. An inversion failure counts as a rejection.
    """
    if state.r is None:
        state.refresh(tmap)
    omega = proposal.omega
    independent = rng.uniform() < omega if omega > 0.0 else False
    z = proposal.kernel.scale(rng.normal(proposal.dim))
    r_new = z if independent else state.r + z
    try:
        theta_new, ld_new = tmap.inverse_and_log_det(r_new, hint=state.theta)
    except InversionError as exc:
        logger.warning("inversion failed, proposal rejected: %s", exc)
        rng.uniform()
        return _update(state, False, None, None)
    log_q_ratio = 0.0 if omega <= 0.0 else (
        mixture_log_density(state.r, r_new, proposal.kernel, omega)
        - mixture_log_density(r_new, state.r, proposal.kernel, omega))
    lp_new = float(target.log_pdf(theta_new))
    alpha = _acceptance(state, lp_new, ld_new, log_q_ratio)
    u = rng.uniform()
    return _update(state, u < alpha, theta_new, lp_new, r_new, ld_new)


def synce_propose(state_fine: ChainState, state_coarse: ChainState, proposal: ProposalConfig,
                  rng: RandomStream) -> tuple[np.ndarray, np.ndarray]:
    """Target-space synchronized proposal sharing one increment ``eta ~ N(0, C)``."""
    if state_fine.theta.shape != state_coarse.theta.shape:
        raise ConfigurationError("coupled states differ in dimension")
    eta = proposal.kernel.scale(rng.normal(proposal.dim))
    return state_fine.theta + eta, state_coarse.theta + eta


def _level_proposal(state: ChainState, tmap: TransportMap, z: np.ndarray, independent: bool,
                    proposal: ProposalConfig) -> LevelProposal | None:
    r_new = z.copy() if independent else state.r + z
    try:
        theta_new, ld_new = tmap.inverse_and_log_det(r_new, hint=state.theta)
    except InversionError as exc:
        logger.warning("inversion failed, proposal rejected: %s", exc)
        return None
    omega = proposal.omega
    if omega <= 0.0:
        fwd = rev = 0.0
    else:
        fwd = mixture_log_density(r_new, state.r, proposal.kernel, omega)
        rev = mixture_log_density(state.r, r_new, proposal.kernel, omega)
    return LevelProposal(theta_new, r_new, ld_new, fwd, rev)


def tm_synce_propose(coupled: CoupledChainState, maps: LevelMaps | tuple, proposal: ProposalConfig,
                     rng: RandomStream) -> CoupledProposal:
    """Reference-space synchronized proposal for both levels.

    Draws the branch uniform and the shared increment, forms ``r*`` for each
    level and maps it back through that level's inverse. ``maps`` holds the
    effective (fine, coarse) maps onto the reference space.
    """
    fine_map, coarse_map = _effective(maps)
    independent = rng.uniform() < proposal.omega
    z = proposal.kernel.scale(rng.normal(proposal.dim))
    return CoupledProposal(_level_proposal(coupled.fine, fine_map, z, independent, proposal),
                           _level_proposal(coupled.coarse, coarse_map, z, independent, proposal),
                           independent)


def _effective(maps):
    if isinstance(maps, LevelMaps):
        return maps.fine_effective, maps.coarse
    return maps


def coupled_step(coupled: CoupledChainState, targets, maps, proposal: ProposalConfig,
                 rng: RandomStream, record: dict | None = None) -> CoupledChainState:
    """Advance both levels once with a shared acceptance uniform.

    Args:
        coupled: Current pair; updated in place.
        targets: ``(fine, coarse)`` target densities.
        maps: :class:`LevelMaps` or effective ``(fine, coarse)`` maps.
        proposal: Reference proposal settings.
        rng: Stream shared by both levels.
        record: Optional dict that receives the two acceptance
            probabilities under ``"alpha"``.
    """
    fine_map, coarse_map = _effective(maps)
    for state, tmap in ((coupled.fine, fine_map), (coupled.coarse, coarse_map)):
        if state.r is None:
            state.refresh(tmap)
    prop = tm_synce_propose(coupled, (fine_map, coarse_map), proposal, rng)
    u = rng.uniform()
    alphas = []
    for state, target, lp in ((coupled.fine, targets[0], prop.fine), (coupled.coarse, targets[1], prop.coarse)):
        if lp is None:
            alphas.append(0.0)
            _update(state, False, None, None)
            continue
        lp_new = float(target.log_pdf(lp.theta))
        alpha = _acceptance(state, lp_new, lp.log_det, lp.log_q_reverse - lp.log_q_forward)
        alphas.append(alpha)
        _update(state, u < alpha, lp.theta, lp_new, lp.r, lp.log_det)
    coupled.iteration += 1
    coupled.last_branch_independent = prop.independent
    if record is not None:
        record["alpha"] = tuple(alphas)
    return coupled


def adapt_covariance(history: np.ndarray, proposal: ProposalConfig) -> np.ndarray:
    """Haario-style covariance ``(2.38^2 / d)(Cov(history) + eps I)``.

    Histories shorter than the warmup leave the current covariance unchanged.
    """
    history = np.atleast_2d(np.asarray(history, dtype=float))
    if history.shape[0] < max(proposal.adapt_warmup, 2):
        return proposal.covariance.copy()
    d = proposal.dim
    emp = np.atleast_2d(np.cov(history, rowvar=False))
    return OPTIMAL_SCALE / d * (emp + proposal.adapt_eps * np.eye(d))


@dataclass
class RunConfig:
    """Iteration counts and seeding for a set of repetitions."""

    iterations: int
    burn_in: int = 0
    retrain_period: int = 5000
    repetitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigurationError("burn-in must be nonnegative and smaller than the iteration count")
        if self.retrain_period < 1:
            raise ConfigurationError("retrain period must be at least 1")
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be at least 1")


@dataclass
class LevelTrace:
    """Per-iteration record of one level; row ``i`` is the state after step ``i + 1``."""

    theta: np.ndarray
    log_pdf: np.ndarray
    accepted: np.ndarray

    @classmethod
    def empty(cls, n: int, d: int) -> "LevelTrace":
        return cls(np.empty((n, d)), np.empty(n), np.zeros(n, dtype=bool))

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if self.accepted.size else 0.0


@dataclass
class ChainResult:
    """Output of one repetition.

    ``levels`` is ``[fine, coarse]`` for coupled runs and ``[single]``
    otherwise. ``branch`` flags iterations that took the independent branch.
    """

    chain: int
    levels: list[LevelTrace]
    branch: np.ndarray
    burn_in: int
    wall_time: float
    events: list[dict] = field(default_factory=list)
    maps: list[TransportMap] = field(default_factory=list)
    covariance: np.ndarray | None = None

    @property
    def fine(self) -> LevelTrace:
        return self.levels[0]

    @property
    def coarse(self) -> LevelTrace:
        return self.levels[-1]

    def post_burn_in(self, level: int = 0) -> np.ndarray:
        return self.levels[level].theta[self.burn_in:]


def _retrain(trainer: MapTrainer, tmap: TransportMap, history: np.ndarray, target, level: str,
             iteration: int, events: list, target_history=None) -> None:
    if not tmap.trainable or isinstance(tmap, ComposedMap):
        return
    try:
        res = trainer.train(tmap, history, target, target_history)
    except TrainingError as exc:
        events.append({"iteration": iteration, "level": level, "event": "training_error",
                       "message": str(exc)})
        logger.info("level %s retrain at %d skipped: %s", level, iteration, exc)
        return
    events.append({"iteration": iteration, "level": level, "event": "trained",
                   "loss": res.loss, "initial_loss": res.initial_loss,
                   "optimizer_iterations": res.iterations, "samples": res.n_samples})


def run_coupled(targets, maps: LevelMaps, trainer: MapTrainer | None, run_config: RunConfig,
                proposal: ProposalConfig, initial, chain: int = 0) -> ChainResult:
    """Run one coupled repetition.

    Args:
        targets: ``(fine, coarse)`` target densities.
        maps: Level maps; trainable maps are retrained in place every
            ``run_config.retrain_period`` iterations on that level's history.
        trainer: Map trainer, or ``None`` to keep maps fixed.
        run_config: Iteration counts and master seed.
        proposal: Reference proposal settings (adapted copies are local).
        initial: ``(fine, coarse)`` starting points.
        chain: Repetition index, which selects the random stream.
    """
    rng = RandomStream.for_chain(run_config.seed, chain)
    n, d = run_config.iterations, proposal.dim
    traces = [LevelTrace.empty(n, d), LevelTrace.empty(n, d)]
    branch = np.zeros(n, dtype=bool)
    events: list[dict] = []
    fine_eff = maps.fine_effective
    coupled = CoupledChainState(ChainState.initial(targets[0], initial[0], fine_eff),
                                ChainState.initial(targets[1], initial[1], maps.coarse))
    period = run_config.retrain_period
    t0 = time.perf_counter()
    for i in range(n):
        coupled_step(coupled, targets, (fine_eff, maps.coarse), proposal, rng)
        branch[i] = coupled.last_branch_independent
        for trace, state in zip(traces, (coupled.fine, coupled.coarse)):
            trace.theta[i] = state.theta
            trace.log_pdf[i] = state.log_pdf
            trace.accepted[i] = state.last_accepted
        done = i + 1
        if trainer is not None and done % period == 0 and done < n:
            deep = maps.configuration == "deep"
            _retrain(trainer, maps.coarse, traces[1].theta[:done], None, "coarse", done, events)
            _retrain(trainer, maps.fine, traces[0].theta[:done], targets[1] if deep else None,
                     "fine", done, events, traces[1].theta[:done] if deep else None)
            coupled.fine.refresh(fine_eff)
            coupled.coarse.refresh(maps.coarse)
        if proposal.adapt and done < run_config.burn_in and done >= proposal.adapt_warmup \
                and done % proposal.adapt_epoch == 0:
            history = fine_eff.forward(traces[0].theta[:done])
            proposal = proposal.with_covariance(adapt_covariance(history, proposal))
            events.append({"iteration": done, "level": "fine", "event": "adapted"})
    wall = time.perf_counter() - t0
    return ChainResult(chain, traces, branch, run_config.burn_in, wall, events,
                       [maps.fine, maps.coarse], proposal.covariance)


def run_single(target: TargetDensity, tmap: TransportMap | None, trainer: MapTrainer | None,
               run_config: RunConfig, proposal: ProposalConfig, initial, chain: int = 0) -> ChainResult:
    """Run one single-level chain with :func:`tm_mh_step`.

    ``tmap=None`` uses the identity map, i.e. plain random-walk MH.
    """
    rng = RandomStream.for_chain(run_config.seed, chain)
    tmap = IdentityMap(proposal.dim) if tmap is None else tmap
    n, d = run_config.iterations, proposal.dim
    trace = LevelTrace.empty(n, d)
    branch = np.zeros(n, dtype=bool)
    events: list[dict] = []
    state = ChainState.initial(target, initial, tmap)
    period = run_config.retrain_period
    t0 = time.perf_counter()
    for i in range(n):
        tm_mh_step(state, target, tmap, proposal, rng)
        trace.theta[i] = state.theta
        trace.log_pdf[i] = state.log_pdf
        trace.accepted[i] = state.last_accepted
        done = i + 1
        if trainer is not None and done % period == 0 and done < n:
            _retrain(trainer, tmap, trace.theta[:done], None, "single", done, events)
            state.refresh(tmap)
        if proposal.adapt and done < run_config.burn_in and done >= proposal.adapt_warmup \
                and done % proposal.adapt_epoch == 0:
            proposal = proposal.with_covariance(adapt_covariance(tmap.forward(trace.theta[:done]), proposal))
            events.append({"iteration": done, "level": "single", "event": "adapted"})
    wall = time.perf_counter() - t0
    return ChainResult(chain, [trace], branch, run_config.burn_in, wall, events, [tmap], proposal.covariance)


def run_repetitions(job, n_chains: int, workers: int = 1) -> list[ChainResult]:
    """Run ``job(chain_index)`` for every repetition, optionally in processes.

    Each repetition draws from its own stream, so results do not depend on
    ``workers``.
    """
    if workers <= 1 or n_chains == 1:
        return [job(c) for c in range(n_chains)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(n_chains)))
