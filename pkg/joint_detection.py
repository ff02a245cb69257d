# joint_detection.py
# Model-agnostic engine for joint detection and estimation: posterior
# summaries, the Neyman-Pearson / two-step / single-step decision rules and the
# Monte-Carlo threshold calibration solvers.

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Optional
import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from utils import get_logger, format_real, parse_real, order_statistic_index, \
    empirical_quantile, binomial_standard_error, MIN_TAIL_COUNT, MAX_DOUBLINGS, \
    MAX_BISECTIONS


logger = get_logger(__name__)

NEGATIVE_COST_TOLERANCE = 1e-9
WEIGHT_SUM_TOLERANCE = 1e-10


##############################################################################
# ERRORS
##############################################################################


class ModelDomainError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class CalibrationError(RuntimeError):

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


##############################################################################
# DOMAIN TYPES
##############################################################################


class CostKind(Enum):
    MSE = "mse"
    ZERO_ONE = "zero_one"


class Verdict(Enum):
    H0 = "H0"
    H1 = "H1"
    H1_RELIABLE = "H1r"
    H1_UNRELIABLE = "H1u"

    @property
    def detected(self):
        return self is not Verdict.H0


class Regime(Enum):
    COST_THRESHOLD_ONLY = "cost_threshold_only"
    COUPLED = "coupled"


class JointModel(ABC):
    """Hypothesis pair H0: X ~ f0, H1: X ~ f1(.|theta), theta ~ prior.

    The parameter domain is a finite list of points with prior weights;
    continuous priors are represented by their quadrature grid. Subclasses
    supply the conditional log-likelihood ratios log L(X|theta_l) for all
    points at once and randomized samplers that take an explicit Generator.
    """

    cost_kind = CostKind.MSE

    @property
    @abstractmethod
    def parameter_points(self):
        """(L, d) array of parameter points."""

    @property
    @abstractmethod
    def prior(self):
        """(L,) array of prior weights summing to one."""

    @abstractmethod
    def cond_llrs(self, x):
        """log L(x|theta_l) for every l, as an (L,) array."""

    @abstractmethod
    def sample_h0(self, rng):
        pass

    @abstractmethod
    def sample_h1(self, rng):
        """Draw theta from the prior and an observation; returns (x, theta)."""

    def cond_llr(self, x, index):
        return float(self.cond_llrs(x)[index])

    def glrt_stat(self, x, llrs=None):
        """max_l log L(x|theta_l) and its point, smallest index on ties."""
        if llrs is None:
            llrs = self.cond_llrs(x)
        best = int(np.argmax(llrs))
        return float(llrs[best]), self.parameter_points[best]

    @property
    def parameter_dim(self):
        return self.parameter_points.shape[1]

    def cost(self, estimate, truth):
        estimate = np.asarray(estimate, dtype=float)
        truth = np.asarray(truth, dtype=float)
        if self.cost_kind is CostKind.MSE:
            return float(np.sum((estimate - truth) ** 2))
        return float(not np.array_equal(estimate, truth))

    def validate(self):
        points = np.asarray(self.parameter_points, dtype=float)
        prior = np.asarray(self.prior, dtype=float)
        if points.ndim != 2 or points.shape[0] == 0:
            raise ModelDomainError("Parameter domain is empty")
        if prior.shape != (points.shape[0],):
            raise ModelDomainError(
                f"Prior has shape {prior.shape}, expected ({points.shape[0]},)")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise ModelDomainError(
                f"Prior weights must be nonnegative and sum to 1 (sum={prior.sum()!r})")
        if self.cost_kind is CostKind.ZERO_ONE and points.shape[1] != 1:
            raise ModelDomainError("ZeroOne cost needs a one-dimensional parameter")


class FiniteModel(JointModel):
    """Tabulated model: observations are indices 0..K-1.

    f0 is a (K,) pmf, f1 an (L, K) table of conditional pmfs f1(x|theta_l).
    """

    def __init__(self, f0, f1, prior, points=None, cost_kind=CostKind.MSE):
        self.f0 = np.asarray(f0, dtype=float)
        self.f1 = np.asarray(f1, dtype=float)
        self._prior = np.asarray(prior, dtype=float)
        if points is None:
            points = np.arange(self.f1.shape[0], dtype=float)
        points = np.asarray(points, dtype=float)
        self._points = points if points.ndim == 2 else points.reshape(-1, 1)
        self.cost_kind = cost_kind
        self.validate()

    @property
    def parameter_points(self):
        return self._points

    @property
    def prior(self):
        return self._prior

    @property
    def n_observations(self):
        return self.f0.size

    def cond_llrs(self, x):
        return np.log(self.f1[:, x]) - np.log(self.f0[x])

    def sample_h0(self, rng):
        return int(rng.choice(self.n_observations, p=self.f0))

    def sample_h1(self, rng):
        l = int(rng.choice(len(self._prior), p=self._prior))
        x = int(rng.choice(self.n_observations, p=self.f1[l]))
        return x, self._points[l]

    def marginal_h1(self):
        return self._prior @ self.f1


def finite_model(f0, f1, prior, points=None, cost_kind=CostKind.MSE):
    return FiniteModel(f0, f1, prior, points, cost_kind)


def random_finite_model(rng, n_params, n_obs, cost_kind=CostKind.MSE):
    """Strictly positive random tables, used by the brute-force oracles."""
    f0 = rng.dirichlet(np.ones(n_obs)) + 1e-3
    f0 /= f0.sum()
    f1 = rng.dirichlet(np.ones(n_obs), size=n_params) + 1e-3
    f1 /= f1.sum(axis=1, keepdims=True)
    prior = rng.dirichlet(np.ones(n_params))
    if cost_kind is CostKind.MSE:
        points = rng.normal(size=n_params)
    else:
        points = np.arange(n_params, dtype=float)
    return FiniteModel(f0, f1, prior, points, cost_kind)


@dataclass(frozen=True)
class PosteriorSummary:
    log_lr: float
    theta_hat: np.ndarray
    c_o: float
    posterior_weights: Optional[np.ndarray] = None

    def to_record(self):
        record = {
            "log_lr": format_real(self.log_lr),
            "theta_hat": [format_real(v) for v in np.ravel(self.theta_hat)],
            "c_o": format_real(self.c_o),
        }
        if self.posterior_weights is not None:
            record["posterior_weights"] = [
                format_real(w) for w in self.posterior_weights]
        return record


@dataclass
class ThresholdSet:
    """Calibrated decision constants.

    gamma_np, gamma and glrt_threshold live in the log domain: the NP test
    compares log L(X) with gamma_np, the Coupled single-step test compares
    log L(X) + log(lam - c_o) with gamma = log(gamma_linear).
    """
    alpha: float
    gamma_np: float
    beta: Optional[float] = None
    beta_np: Optional[float] = None
    lambda_o: Optional[float] = None
    regime: Optional[Regime] = None
    lam: Optional[float] = None
    gamma: Optional[float] = None
    reliability_lambdas: dict = field(default_factory=dict)
    glrt_threshold: Optional[float] = None
    provenance: dict = field(default_factory=dict)

    def to_record(self):
        def real_or_none(x):
            return None if x is None else format_real(x)
        return {
            "alpha": format_real(self.alpha),
            "beta": real_or_none(self.beta),
            "beta_np": real_or_none(self.beta_np),
            "gamma_np": format_real(self.gamma_np),
            "lambda_o": real_or_none(self.lambda_o),
            "regime": None if self.regime is None else self.regime.value,
            "lambda": real_or_none(self.lam),
            "gamma": real_or_none(self.gamma),
            "reliability_lambdas": {format_real(k): format_real(v)
                                    for k, v in sorted(self.reliability_lambdas.items())},
            "glrt_threshold": real_or_none(self.glrt_threshold),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_record(cls, record):
        def real_or_none(s):
            return None if s is None else parse_real(s)
        return cls(
            alpha=parse_real(record["alpha"]),
            beta=real_or_none(record.get("beta")),
            beta_np=real_or_none(record.get("beta_np")),
            gamma_np=parse_real(record["gamma_np"]),
            lambda_o=real_or_none(record.get("lambda_o")),
            regime=None if record.get("regime") is None else Regime(record["regime"]),
            lam=real_or_none(record.get("lambda")),
            gamma=real_or_none(record.get("gamma")),
            reliability_lambdas={parse_real(k): parse_real(v)
                                 for k, v in record.get("reliability_lambdas", {}).items()},
            glrt_threshold=real_or_none(record.get("glrt_threshold")),
            provenance=dict(record.get("provenance", {})),
        )


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    estimate: Optional[np.ndarray] = None
    c_o: Optional[float] = None


@dataclass(frozen=True)
class ConditionalCost:
    """Mean cost over the selected trials; value is None when count == 0."""
    value: Optional[float]
    count: int


##############################################################################
# POSTERIOR
##############################################################################


def posterior_summary(model, x, keep_weights=True, llrs=None):
    """Posterior-weighted statistic, estimate and cost for one observation.

    llrs, when given, are the conditional log-LRs of x already computed by
    the caller.
    """
    points = np.asarray(model.parameter_points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ModelDomainError("Parameter domain is empty")
    if llrs is None:
        llrs = model.cond_llrs(x)
    llrs = np.asarray(llrs, dtype=float)
    if not np.all(np.isfinite(llrs)):
        bad = int(np.flatnonzero(~np.isfinite(llrs))[0])
        raise ModelDomainError(f"Conditional log-LR is not finite at parameter index {bad}")

    with np.errstate(divide="ignore"):
        log_weights = llrs + np.log(model.prior)
    log_lr = float(logsumexp(log_weights))
    weights = np.exp(log_weights - log_lr)
    total = weights.sum()
    assert total > 0, "posterior weights underflowed after max shift"
    if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
        weights = weights / total

    if model.cost_kind is CostKind.MSE:
        theta_hat = weights @ points
        # centered second moment, equal to sum w|theta|^2 - |theta_hat|^2
        c_o = float(weights @ np.sum((points - theta_hat) ** 2, axis=1))
    else:
        best = int(np.argmax(log_weights))
        theta_hat = points[best].copy()
        c_o = float(1.0 - weights[best])

    if c_o < 0:
        if c_o < -NEGATIVE_COST_TOLERANCE:
            raise NumericalError(f"Posterior cost is negative: {c_o!r}")
        logger.debug("Clamping posterior cost %r to 0", c_o)
        c_o = 0.0

    return PosteriorSummary(log_lr=log_lr, theta_hat=theta_hat, c_o=c_o,
                            posterior_weights=weights if keep_weights else None)


def brute_force_bayes(model, x, candidate_grid):
    """Exhaustive minimization of the posterior cost C(U|x) over a grid."""
    summary = posterior_summary(model, x)
    weights = summary.posterior_weights
    points = np.asarray(model.parameter_points, dtype=float)
    grid = np.asarray(candidate_grid, dtype=float).reshape(len(candidate_grid), -1)

    if model.cost_kind is CostKind.MSE:
        sq = np.sum((grid[:, None, :] - points[None, :, :]) ** 2, axis=2)
        costs = sq @ weights
    else:
        hits = np.all(grid[:, None, :] == points[None, :, :], axis=2)
        costs = 1.0 - hits.astype(float) @ weights
    best = int(np.argmin(costs))
    return grid[best], float(costs[best])


##############################################################################
# DECISION RULES
##############################################################################


def np_decide(summary, gamma_np):
    """Likelihood ratio test; H1 on strict exceedance, ties go to H0."""
    return Verdict.H1 if summary.log_lr > gamma_np else Verdict.H0


def two_step_decide(summary, gamma_np, lam):
    """NP detection, then reliable iff c_o <= lam (boundary inclusive)."""
    if lam < 0:
        raise PreconditionError(f"lambda must be nonnegative, got {lam}")
    if np_decide(summary, gamma_np) is Verdict.H0:
        return Decision(Verdict.H0)
    verdict = Verdict.H1_RELIABLE if summary.c_o <= lam else Verdict.H1_UNRELIABLE
    return Decision(verdict, estimate=summary.theta_hat, c_o=summary.c_o)


def coupled_statistic(log_lr, c_o, lam):
    """log(L(X) * (lam - c_o)), -inf wherever lam - c_o <= 0."""
    log_lr, diff = np.broadcast_arrays(np.asarray(log_lr, dtype=float),
                                       lam - np.asarray(c_o, dtype=float))
    out = np.full(diff.shape, -np.inf)
    positive = diff > 0
    out[positive] = log_lr[positive] + np.log(diff[positive])
    return out if out.ndim else float(out)


def single_step_decide(summary, t):
    if t.regime is Regime.COST_THRESHOLD_ONLY:
        detected = summary.c_o <= t.lambda_o
    elif t.regime is Regime.COUPLED:
        if t.gamma is None or not np.isfinite(t.gamma):
            raise CalibrationError(
                "Coupled regime needs gamma > 0 (finite log gamma)",
                {"gamma": t.gamma})
        detected = float(coupled_statistic(summary.log_lr, summary.c_o, t.lam)) >= t.gamma
    else:
        raise PreconditionError("Threshold set has no single-step regime; calibrate first")
    if not detected:
        return Decision(Verdict.H0)
    return Decision(Verdict.H1_RELIABLE, estimate=summary.theta_hat, c_o=summary.c_o)


##############################################################################
# CALIBRATION
##############################################################################


def _as_sample(sample, name):
    sample = np.asarray(sample, dtype=float).ravel()
    if sample.size == 0:
        raise PreconditionError(f"{name} is empty")
    return sample


def _check_probability(p, name):
    if not 0 < p < 1:
        raise PreconditionError(f"{name} must lie in (0, 1), got {p}")


def _tail_warning(provenance, key, n, tail):
    if n * tail < MIN_TAIL_COUNT:
        message = f"{key}: n*tail = {n * tail:.3g} < {MIN_TAIL_COUNT}, quantile unreliable"
        logger.warning(message)
        if provenance is not None:
            provenance.setdefault("warnings", []).append(message)


def calibrate_gamma_np(h0_log_lrs, alpha, provenance=None):
    """Empirical (1 - alpha) quantile of the H0 log-LR sample.

    Uses the order statistic at 1-based index ceil((1 - alpha) n); with the
    strict NP comparison the empirical false alarm is at most alpha.
    """
    sample = _as_sample(h0_log_lrs, "H0 log-LR sample")
    _check_probability(alpha, "alpha")
    _tail_warning(provenance, "gamma_np", sample.size, alpha)
    return empirical_quantile(sample, 1.0 - alpha)


def solve_lambda_o(h1_c_o, beta, provenance=None):
    """Empirical (1 - beta) quantile of the H1 posterior cost."""
    sample = _as_sample(h1_c_o, "H1 posterior cost sample")
    _check_probability(beta, "beta")
    _tail_warning(provenance, "lambda_o", sample.size, beta)
    return empirical_quantile(sample, 1.0 - beta)


def empirical_miss_rate(h1_log_lrs, gamma_np):
    sample = _as_sample(h1_log_lrs, "H1 log-LR sample")
    return float(np.mean(sample <= gamma_np))


def _split_pairs(pairs, name):
    pairs = np.asarray(pairs, dtype=float)
    if pairs.size == 0:
        raise PreconditionError(f"{name} is empty")
    pairs = pairs.reshape(-1, 2)
    return pairs[:, 0], pairs[:, 1]


def calibrate_single_step(h0_pairs, h1_pairs, alpha, beta):
    """Solve the single-step thresholds from (log_lr, c_o) samples.

    lambda_o comes from the H1 cost quantile. When the cost-only test already
    meets the false alarm level the CostThresholdOnly regime is returned;
    otherwise (lam, gamma) are found by an inner order-statistic solve for
    gamma(lam) on H1 and an outer doubling + bisection on lam for the H0
    false alarm equation.
    """
    h0_llr, h0_c = _split_pairs(h0_pairs, "H0 calibration pairs")
    h1_llr, h1_c = _split_pairs(h1_pairs, "H1 calibration pairs")
    _check_probability(alpha, "alpha")
    _check_probability(beta, "beta")
    n0, n1 = h0_llr.size, h1_llr.size

    provenance = {"n_h0": n0, "n_h1": n1}
    gamma_np = calibrate_gamma_np(h0_llr, alpha, provenance)
    beta_np = empirical_miss_rate(h1_llr, gamma_np)
    if beta < beta_np:
        raise PreconditionError(
            f"beta = {beta} is below the NP miss rate beta(alpha) = {beta_np:.6g}")

    lambda_o = solve_lambda_o(h1_c, beta, provenance)
    p0_cost_only = float(np.mean(h0_c <= lambda_o))
    logger.info("lambda_o = %.6g, P0(c_o <= lambda_o) = %.6g", lambda_o, p0_cost_only)

    base = dict(alpha=alpha, beta=beta, beta_np=beta_np, gamma_np=gamma_np,
                lambda_o=lambda_o, provenance=provenance)
    if p0_cost_only <= alpha:
        return ThresholdSet(regime=Regime.COST_THRESHOLD_ONLY, lam=lambda_o,
                            gamma=-np.inf, **base)

    k1 = order_statistic_index(1.0 - beta, n1)

    def log_gamma_of(lam):
        stat = coupled_statistic(h1_llr, h1_c, lam)
        # k1-th largest value: P1(stat >= gamma) >= 1 - beta
        return float(-np.partition(-stat, k1 - 1)[k1 - 1])

    def false_alarm(lam):
        log_gamma = log_gamma_of(lam)
        if not np.isfinite(log_gamma):
            return float(np.mean(h0_c <= lam)), log_gamma
        return float(np.mean(coupled_statistic(h0_llr, h0_c, lam) >= log_gamma)), log_gamma

    tolerance = binomial_standard_error(alpha, n0)
    lo = lambda_o
    offset = 1.0
    hi = lambda_o + offset
    p_hi, _ = false_alarm(hi)
    doublings = 0
    while p_hi - alpha > 0:
        if doublings >= MAX_DOUBLINGS:
            raise CalibrationError(
                f"No sign change of the false alarm equation after {MAX_DOUBLINGS} doublings",
                {"lambda_o": lambda_o, "lambda_max": hi, "false_alarm": p_hi,
                 "alpha": alpha, "beta": beta, "beta_np": beta_np})
        lo = hi
        offset *= 2.0
        hi = lambda_o + offset
        p_hi, _ = false_alarm(hi)
        doublings += 1

    lam = hi
    steps = 0
    for steps in range(1, MAX_BISECTIONS + 1):
        mid = 0.5 * (lo + hi)
        p_mid, _ = false_alarm(mid)
        if abs(p_mid - alpha) <= tolerance:
            lam = mid
            break
        if p_mid > alpha:
            lo = mid
        else:
            hi = mid
            lam = hi
    log_gamma = log_gamma_of(lam)
    provenance.update({"doublings": doublings, "bisections": steps})
    logger.info("Coupled regime: lambda = %.6g, log gamma = %.6g", lam, log_gamma)

    if not np.isfinite(log_gamma):
        # gamma = 0 coincides with the cost-only comparison
        return ThresholdSet(regime=Regime.COST_THRESHOLD_ONLY, lam=lambda_o,
                            gamma=-np.inf, **base)
    return ThresholdSet(regime=Regime.COUPLED, lam=lam, gamma=log_gamma, **base)


def calibrate_reliability_lambda(h1_detected_c_o, target_fraction):
    """Empirical target_fraction quantile of the costs of NP detections.

    A fraction of 1 returns +inf (every detection reliable).
    """
    if not 0 < target_fraction <= 1:
        raise PreconditionError(f"target fraction must lie in (0, 1], got {target_fraction}")
    if target_fraction >= 1:
        return math.inf
    sample = np.asarray(h1_detected_c_o, dtype=float).ravel()
    if sample.size == 0:
        raise CalibrationError("No NP detections to calibrate the reliability threshold",
                               {"target_fraction": target_fraction})
    return empirical_quantile(sample, target_fraction)


def conditional_cost(trials, selector, scheme="two_step"):
    """Mean per-trial cost over trials whose `scheme` verdict equals selector.

    Trials need `verdicts` (mapping scheme -> Verdict) and `error`.
    """
    errors = [t.error for t in trials
              if t.verdicts.get(scheme) is selector and t.error is not None]
    if not errors:
        return ConditionalCost(value=None, count=0)
    return ConditionalCost(value=float(np.mean(errors)), count=len(errors))


##############################################################################
# ORACLES
##############################################################################


def _cost_matrix(model, grid):
    """C[x, u] = sum_l C(u, theta_l) f1(x|theta_l) pi_l."""
    points = model.parameter_points
    grid = np.asarray(grid, dtype=float).reshape(len(grid), -1)
    if model.cost_kind is CostKind.MSE:
        c = np.sum((grid[:, None, :] - points[None, :, :]) ** 2, axis=2)
    else:
        c = 1.0 - np.all(grid[:, None, :] == points[None, :, :], axis=2).astype(float)
    joint = model.f1 * model.prior[:, None]
    return joint.T @ c.T


def lemma1_bruteforce(model, weighting, candidate_grid=None):
    """Enumerate all grid-valued estimators of a finite model.

    Returns the minimum of the weighted conditional cost ratio over every
    function x -> grid, the value reached by the per-observation Bayes
    estimator, and (MSE only) the value of the posterior mean.
    """
    weighting = np.asarray(weighting, dtype=float)
    if candidate_grid is None:
        candidate_grid = model.parameter_points
    grid = np.asarray(candidate_grid, dtype=float).reshape(len(candidate_grid), -1)
    cost = _cost_matrix(model, grid)
    denominator = weighting @ model.marginal_h1()
    if denominator <= 0:
        raise PreconditionError("Weighting puts no mass on the H1 marginal")

    n_obs = model.n_observations
    functions = np.array(list(product(range(len(grid)), repeat=n_obs)))
    values = (cost[np.arange(n_obs), functions] @ weighting) / denominator
    best = float(values.min())

    bayes_choice = []
    for x in range(n_obs):
        point, _ = brute_force_bayes(model, x, grid)
        bayes_choice.append(int(np.flatnonzero(np.all(grid == point, axis=1))[0]))
    bayes = float(cost[np.arange(n_obs), bayes_choice] @ weighting / denominator)

    report = {"best": best, "bayes": bayes, "n_functions": len(functions)}
    if model.cost_kind is CostKind.MSE:
        joint = model.f1 * model.prior[:, None]
        mean_cost = 0.0
        for x in range(n_obs):
            theta_hat = posterior_summary(model, x).theta_hat
            sq = np.sum((model.parameter_points - theta_hat) ** 2, axis=1)
            mean_cost += weighting[x] * (sq @ joint[:, x])
        report["posterior_mean"] = float(mean_cost / denominator)
    report["ok"] = bayes <= best + 1e-12 and \
        report.get("posterior_mean", -np.inf) <= best + 1e-12
    return report


def average_conditional_cost(model, delta1):
    """Average posterior cost over the decision H1 for a randomized rule."""
    delta1 = np.asarray(delta1, dtype=float)
    f1 = model.marginal_h1()
    c_o = np.array([posterior_summary(model, x).c_o for x in range(model.n_observations)])
    return float((delta1 * c_o) @ f1 / (delta1 @ f1))


def rescaling_oracle(model, delta1, beta):
    """Rescale a rule with slack in the miss constraint onto equality.

    Returns (J of the original rule, J of the rescaled rule).
    """
    delta1 = np.asarray(delta1, dtype=float)
    detection = float(delta1 @ model.marginal_h1())
    if detection <= 1.0 - beta:
        raise PreconditionError(
            f"Rule detection probability {detection:.6g} does not exceed 1 - beta")
    rescaled = (1.0 - beta) / detection * delta1
    return average_conditional_cost(model, delta1), average_conditional_cost(model, rescaled)


##############################################################################
# TESTS
##############################################################################


def _point_model(llrs, prior, points, cost_kind=CostKind.MSE):
    """Model with fixed conditional log-LRs, for hand-computed examples."""

    class _Fixed(JointModel):
        @property
        def parameter_points(self):
            p = np.asarray(points, dtype=float)
            return p if p.ndim == 2 else p.reshape(-1, 1)

        @property
        def prior(self):
            return np.asarray(prior, dtype=float)

        def cond_llrs(self, x):
            return np.asarray(llrs, dtype=float)

        def sample_h0(self, rng):
            return None

        def sample_h1(self, rng):
            return None, None

    model = _Fixed()
    model.cost_kind = cost_kind
    return model


def test_posterior_single_point_domain():
    model = _point_model([0.7], [1.0], [3.0])
    s = posterior_summary(model, None)
    assert s.theta_hat[0] == 3.0
    assert s.c_o == 0.0
    assert s.log_lr == pytest.approx(0.7, abs=1e-15)


def test_posterior_symmetric_two_points():
    model = _point_model([0.2, 0.2], [0.5, 0.5], [-1.0, 1.0])
    s = posterior_summary(model, None)
    assert s.theta_hat[0] == pytest.approx(0.0, abs=1e-15)
    assert s.c_o == pytest.approx(1.0)
    assert s.log_lr == pytest.approx(0.2)


def test_posterior_three_points_hand_computed():
    model = _point_model([0.0, math.log(2), math.log(4)], [0.5, 0.25, 0.25], [0.0, 1.0, 2.0])
    s = posterior_summary(model, None)
    np.testing.assert_allclose(s.posterior_weights, [0.25, 0.25, 0.5], atol=1e-12)
    assert s.theta_hat[0] == pytest.approx(1.25)
    assert s.c_o == pytest.approx(0.6875)
    assert s.log_lr == pytest.approx(math.log(0.5 + 0.5 + 1.0))


def test_posterior_large_exponents_are_stable():
    model = _point_model([900.0, 901.0, 950.0], [1 / 3, 1 / 3, 1 / 3], [[0, 0], [1, 1], [5, 5]])
    s = posterior_summary(model, None)
    assert np.isfinite(s.log_lr)
    assert abs(s.posterior_weights.sum() - 1.0) < WEIGHT_SUM_TOLERANCE
    np.testing.assert_allclose(s.theta_hat, [5.0, 5.0], atol=1e-12)
    assert s.c_o >= 0.0


def test_posterior_zero_one_is_map():
    rng = np.random.default_rng(3)
    for _ in range(50):
        llrs = rng.normal(size=6)
        prior = rng.dirichlet(np.ones(6))
        s = posterior_summary(_point_model(llrs, prior, np.arange(6), CostKind.ZERO_ONE), None)
        best = int(np.argmax(prior * np.exp(llrs)))
        assert s.theta_hat[0] == best
        assert 0 <= s.c_o < 1
        assert s.c_o == pytest.approx(1 - s.posterior_weights[best])


def test_posterior_errors():
    with pytest.raises(ModelDomainError):
        posterior_summary(_point_model([], [], np.zeros((0, 1))), None)
    with pytest.raises(ModelDomainError):
        posterior_summary(_point_model([np.inf, 0.0], [0.5, 0.5], [0.0, 1.0]), None)


def test_posterior_reuses_given_llrs():
    model = _point_model([0.0, math.log(2), math.log(4)], [0.5, 0.25, 0.25], [0.0, 1.0, 2.0])
    calls = []
    model.cond_llrs = lambda x: calls.append(x) or np.array([0.0, 0.0, 0.0])
    s = posterior_summary(model, "x", llrs=[0.0, math.log(2), math.log(4)])
    assert calls == []
    assert s.theta_hat[0] == pytest.approx(1.25)
    assert s.c_o == pytest.approx(0.6875)


def test_glrt_stat_examples():
    model = _point_model([0.3, 1.5, 1.5, -2.0], [0.25] * 4, [[0, 0], [1, 0], [2, 0], [3, 0]])
    value, point = model.glrt_stat(None)
    assert value == 1.5
    np.testing.assert_array_equal(point, [1.0, 0.0])
    value, point = model.glrt_stat(None, llrs=np.array([0.0, -1.0, 4.0, 2.0]))
    assert value == 4.0
    np.testing.assert_array_equal(point, [2.0, 0.0])


def test_summary_record_uses_17_digits():
    s = posterior_summary(_point_model([0.0, 0.0, 0.0], [1 / 3] * 3, [0.0, 1.0, 2.0]), None)
    record = s.to_record()
    assert parse_real(record["c_o"]) == s.c_o
    assert set(record) == {"log_lr", "theta_hat", "c_o", "posterior_weights"}


def _summary(log_lr, c_o=0.0, theta=0.0):
    return PosteriorSummary(log_lr=log_lr, theta_hat=np.array([theta]), c_o=c_o)


def test_np_decide_examples():
    assert np_decide(_summary(5.0), 3.0) is Verdict.H1
    assert np_decide(_summary(3.0), 3.0) is Verdict.H0


def test_np_decide_calibrated_median():
    rng = np.random.default_rng(11)
    sample = rng.normal(size=100000)
    gamma = calibrate_gamma_np(sample, 0.5)
    fresh = rng.normal(size=100000)
    rate = np.mean([np_decide(_summary(v), gamma) is Verdict.H1 for v in fresh[:20000]])
    assert rate == pytest.approx(0.5, abs=0.02)


def test_two_step_examples():
    assert two_step_decide(_summary(0.0), 1.0, 5.0) == Decision(Verdict.H0)
    d = two_step_decide(_summary(2.0, c_o=0.0, theta=4.0), 1.0, 0.0)
    assert d.verdict is Verdict.H1_RELIABLE
    assert d.estimate[0] == 4.0
    d = two_step_decide(_summary(2.0, c_o=0.3), 1.0, 0.2)
    assert d.verdict is Verdict.H1_UNRELIABLE and d.estimate is not None
    d = two_step_decide(_summary(2.0, c_o=1e300), 1.0, math.inf)
    assert d.verdict is Verdict.H1_RELIABLE
    with pytest.raises(PreconditionError):
        two_step_decide(_summary(2.0), 1.0, -1.0)


def test_two_step_monotone_in_lambda():
    rng = np.random.default_rng(5)
    summaries = [_summary(v, c) for v, c in zip(rng.normal(size=500), rng.exponential(size=500))]
    lambdas = [0.1, 0.5, 1.0, 2.0]
    for s in summaries:
        verdicts = [two_step_decide(s, 0.0, lam).verdict for lam in lambdas]
        for low, high in zip(verdicts, verdicts[1:]):
            assert not (low is Verdict.H1_RELIABLE and high is Verdict.H1_UNRELIABLE)


def test_single_step_examples():
    t = ThresholdSet(alpha=0.1, gamma_np=0.0, lambda_o=0.5, regime=Regime.COST_THRESHOLD_ONLY)
    assert single_step_decide(_summary(-50.0, c_o=0.1), t).verdict is Verdict.H1_RELIABLE
    assert single_step_decide(_summary(50.0, c_o=0.6), t).verdict is Verdict.H0

    t = ThresholdSet(alpha=0.1, gamma_np=0.0, lambda_o=0.5, regime=Regime.COUPLED,
                     lam=1.0, gamma=math.log(2.0))
    assert single_step_decide(_summary(500.0, c_o=1.5), t).verdict is Verdict.H0
    assert single_step_decide(_summary(math.log(5.0), c_o=0.5), t).verdict is Verdict.H1_RELIABLE
    assert single_step_decide(_summary(math.log(3.0), c_o=0.5), t).verdict is Verdict.H0

    t.gamma = -math.inf
    with pytest.raises(CalibrationError):
        single_step_decide(_summary(1.0), t)


def test_single_step_monotone_in_gamma():
    rng = np.random.default_rng(8)
    llr, c = rng.normal(size=2000), rng.uniform(size=2000)
    previous = None
    for log_gamma in [-2.0, -1.0, 0.0, 1.0]:
        t = ThresholdSet(alpha=0.1, gamma_np=0.0, lambda_o=0.2, regime=Regime.COUPLED,
                         lam=1.5, gamma=log_gamma)
        detected = np.array([single_step_decide(_summary(v, q), t).verdict.detected
                             for v, q in zip(llr, c)])
        if previous is not None:
            assert not np.any(detected & ~previous)
        previous = detected


def test_single_step_np_limit():
    rng = np.random.default_rng(21)
    llr = rng.normal(size=100000)
    c = rng.uniform(0, 1, size=100000)
    lambda_o, log_gamma_bar = 0.4, 0.7
    lam = 1e6 * lambda_o + 1
    t = ThresholdSet(alpha=0.1, gamma_np=0.0, lambda_o=lambda_o, regime=Regime.COUPLED,
                     lam=lam, gamma=log_gamma_bar + math.log(lam))
    single = coupled_statistic(llr, c, lam) >= t.gamma
    classical = llr > log_gamma_bar
    assert np.mean(single == classical) >= 0.999
    for i in range(200):
        s = _summary(llr[i], c[i])
        assert single_step_decide(s, t).verdict.detected == bool(single[i])


def test_calibrate_gamma_np_examples():
    assert calibrate_gamma_np(np.arange(1, 101), 0.05) == 95.0
    sample = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
    assert calibrate_gamma_np(sample, 0.5) == 0.0
    rng = np.random.default_rng(2)
    gamma = calibrate_gamma_np(rng.normal(size=100000), 1e-2)
    assert gamma == pytest.approx(norm.ppf(0.99), abs=0.05)


def test_calibrate_gamma_np_false_alarm_bound():
    rng = np.random.default_rng(4)
    for n in [7, 50, 999]:
        sample = rng.normal(size=n)
        gamma = calibrate_gamma_np(sample, 0.1)
        assert np.mean(sample > gamma) <= 0.1


def test_calibrate_gamma_np_warning_and_errors():
    provenance = {}
    calibrate_gamma_np(np.arange(100), 0.05, provenance)
    assert len(provenance["warnings"]) == 1
    with pytest.raises(PreconditionError):
        calibrate_gamma_np([], 0.1)
    with pytest.raises(PreconditionError):
        calibrate_gamma_np([1.0], 1.0)


def test_solve_lambda_o_examples():
    assert solve_lambda_o(np.zeros(50), 0.3) == 0.0
    sample = 0.01 * np.arange(1, 101)
    assert solve_lambda_o(sample, 0.2) == pytest.approx(0.80)


def _synthetic_pairs(rng, n, h1):
    """(log_lr, c_o) pairs: detection power and cost are negatively related."""
    shift = 1.5 if h1 else 0.0
    llr = rng.normal(loc=shift, size=n)
    c_o = rng.gamma(2.0, 1.0, size=n) * np.exp(-0.5 * llr)
    return np.column_stack([llr, c_o])


def test_calibrate_single_step_constraints_on_fresh_samples():
    rng = np.random.default_rng(31)
    alpha, n = 0.05, 40000
    h0, h1 = _synthetic_pairs(rng, n, False), _synthetic_pairs(rng, n, True)
    gamma_np = calibrate_gamma_np(h0[:, 0], alpha)
    beta = empirical_miss_rate(h1[:, 0], gamma_np) + 0.1
    t = calibrate_single_step(h0, h1, alpha, beta)
    assert t.beta_np == pytest.approx(beta - 0.1)

    f0, f1 = _synthetic_pairs(rng, n, False), _synthetic_pairs(rng, n, True)
    decide = np.vectorize(lambda v, c: single_step_decide(_summary(v, c), t).verdict.detected)
    false_alarm = decide(f0[:, 0], f0[:, 1]).mean()
    detection = decide(f1[:, 0], f1[:, 1]).mean()
    se_alpha = math.sqrt(alpha * (1 - alpha) / n)
    se_beta = math.sqrt(beta * (1 - beta) / n)
    assert abs(false_alarm - alpha) <= 5 * se_alpha
    assert abs(detection - (1 - beta)) <= 4 * se_beta + 1.0 / n
    if t.regime is Regime.COUPLED:
        assert t.lam >= t.lambda_o


def test_calibrate_single_step_zero_cost_is_np_test():
    rng = np.random.default_rng(13)
    n, alpha = 20000, 0.05
    h0 = np.column_stack([rng.normal(size=n), np.zeros(n)])
    h1 = np.column_stack([rng.normal(loc=2.0, size=n), np.zeros(n)])
    gamma_np = calibrate_gamma_np(h0[:, 0], alpha)
    beta = empirical_miss_rate(h1[:, 0], gamma_np) + 0.05
    t = calibrate_single_step(h0, h1, alpha, beta)
    assert t.regime is Regime.COUPLED
    assert t.lambda_o == 0.0
    gamma_bar = empirical_quantile(h1[:, 0], beta)
    x = rng.normal(loc=1.0, scale=2.0, size=5000)
    single = coupled_statistic(x, 0.0, t.lam) >= t.gamma
    assert np.mean(single == (x >= gamma_bar)) > 0.999


def test_calibrate_single_step_cost_only_regime():
    rng = np.random.default_rng(17)
    n = 5000
    h0 = np.column_stack([rng.normal(size=n), rng.uniform(5.0, 6.0, size=n)])
    h1 = np.column_stack([rng.normal(loc=1.0, size=n), rng.uniform(0.0, 1.0, size=n)])
    t = calibrate_single_step(h0, h1, 0.05, 0.9)
    assert t.regime is Regime.COST_THRESHOLD_ONLY
    assert t.lambda_o == pytest.approx(0.1, abs=0.03)


def test_calibrate_single_step_rejects_small_beta():
    rng = np.random.default_rng(19)
    h0, h1 = _synthetic_pairs(rng, 4000, False), _synthetic_pairs(rng, 4000, True)
    beta_np = empirical_miss_rate(h1[:, 0], calibrate_gamma_np(h0[:, 0], 0.05))
    with pytest.raises(PreconditionError):
        calibrate_single_step(h0, h1, 0.05, beta_np / 2)


def test_calibrate_reliability_lambda_examples():
    assert calibrate_reliability_lambda([1.0, 2.0], 1.0) == math.inf
    assert calibrate_reliability_lambda([1.0, 2.0, 3.0, 4.0], 0.5) == 2.0
    with pytest.raises(CalibrationError):
        calibrate_reliability_lambda([], 0.5)
    with pytest.raises(PreconditionError):
        calibrate_reliability_lambda([1.0], 0.0)


class _Trial:

    def __init__(self, error, verdict):
        self.error = error
        self.verdicts = {"two_step": verdict}


def test_conditional_cost_examples():
    exact = [_Trial(0.0, Verdict.H1_RELIABLE) for _ in range(3)]
    assert conditional_cost(exact, Verdict.H1_RELIABLE) == ConditionalCost(0.0, 3)
    pair = [_Trial(1.0, Verdict.H1_RELIABLE), _Trial(3.0, Verdict.H1_RELIABLE),
            _Trial(9.0, Verdict.H1_UNRELIABLE)]
    assert conditional_cost(pair, Verdict.H1_RELIABLE) == ConditionalCost(2.0, 2)
    assert conditional_cost(pair, Verdict.H0) == ConditionalCost(None, 0)


def test_brute_force_bayes_examples():
    model = random_finite_model(np.random.default_rng(1), 4, 5, CostKind.ZERO_ONE)
    for x in range(5):
        point, _ = brute_force_bayes(model, x, model.parameter_points)
        assert point[0] == posterior_summary(model, x).theta_hat[0]

    sym = _point_model([0.0, 0.0], [0.5, 0.5], [-1.0, 1.0])
    point, cost = brute_force_bayes(sym, None, [-1.0, 0.0, 1.0])
    assert point[0] == 0.0 and cost == pytest.approx(1.0)


def test_brute_force_bayes_dense_grid_finds_posterior_mean():
    rng = np.random.default_rng(6)
    for _ in range(20):
        model = random_finite_model(rng, 4, 3)
        mean = posterior_summary(model, 1).theta_hat[0]
        grid = np.linspace(-4, 4, 8001)
        point, cost = brute_force_bayes(model, 1, grid)
        assert abs(point[0] - mean) <= grid[1] - grid[0]
        assert cost >= posterior_summary(model, 1).c_o - 1e-12


@pytest.mark.parametrize("cost_kind", [CostKind.MSE, CostKind.ZERO_ONE])
def test_lemma1_bayes_estimator_is_optimal(cost_kind):
    rng = np.random.default_rng(100 if cost_kind is CostKind.MSE else 200)
    for _ in range(50):
        n_params, n_obs = int(rng.integers(2, 6)), int(rng.integers(2, 7))
        model = random_finite_model(rng, n_params, n_obs, cost_kind)
        weighting = rng.uniform(size=n_obs) * (rng.uniform(size=n_obs) > 0.2)
        if weighting.sum() == 0:
            weighting[0] = 1.0
        report = lemma1_bruteforce(model, weighting)
        assert report["ok"], report
        assert report["bayes"] == pytest.approx(report["best"], abs=1e-12)


def test_rescaling_keeps_estimation_performance():
    rng = np.random.default_rng(9)
    for _ in range(30):
        model = random_finite_model(rng, 4, 6)
        delta1 = rng.uniform(0.5, 1.0, size=6)
        detection = delta1 @ model.marginal_h1()
        beta = 1.0 - 0.8 * detection
        j, j_bar = rescaling_oracle(model, delta1, beta)
        assert j_bar == pytest.approx(j, rel=1e-12)
    with pytest.raises(PreconditionError):
        rescaling_oracle(model, np.zeros(6), 0.5)


def test_threshold_set_record_round_trip():
    t = ThresholdSet(alpha=0.01, gamma_np=3.25, beta=0.3, beta_np=0.2, lambda_o=0.1,
                     regime=Regime.COUPLED, lam=0.7, gamma=-1.0 / 3.0,
                     reliability_lambdas={0.5: 0.25, 1.0: math.inf},
                     glrt_threshold=2.0, provenance={"n_h0": 10})
    assert ThresholdSet.from_record(t.to_record()) == t
