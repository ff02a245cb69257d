# changepoint_model.py
# Retrospective single-changepoint model: N samples, the first tau drawn from
# the nominal density f, the remaining N - tau from the alternative h.
# tau = 0 means every sample is under the alternative regime.

from dataclasses import dataclass
from typing import Optional
import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from joint_detection import JointModel, CostKind, ModelDomainError, Regime, \
    ThresholdSet, posterior_summary, single_step_decide, calibrate_gamma_np
from utils import get_logger, format_real, CHANGEPOINT_SAMPLES, CHANGEPOINT_MU


logger = get_logger(__name__)


@dataclass(frozen=True)
class DataSeries:
    values: np.ndarray
    truth: Optional[int] = None  # None under H0


class ChangepointModel(JointModel):
    """Changepoint location tau in {0, ..., N-1} under 0-1 cost.

    nominal and alternative are frozen scipy distributions. With iid=False a
    conditional_log_ratio(values, tau) callable supplies
    log h(x_{tau+1..N} | past) - log f(x_{tau+1..N} | past) directly.
    """

    cost_kind = CostKind.ZERO_ONE

    def __init__(self, n_samples=CHANGEPOINT_SAMPLES, mu=CHANGEPOINT_MU, prior=None,
                 nominal=None, alternative=None, iid=True, conditional_log_ratio=None):
        if n_samples < 1:
            raise ModelDomainError(f"n_samples must be >= 1, got {n_samples}")
        if not math.isfinite(mu):
            raise ModelDomainError(f"mu must be finite, got {mu}")
        if not iid and conditional_log_ratio is None:
            raise ModelDomainError("A non-iid model needs conditional_log_ratio")
        self.n_samples = int(n_samples)
        self.mu = float(mu)
        self._gaussian = nominal is None and alternative is None
        self.nominal = norm(loc=0.0, scale=1.0) if nominal is None else nominal
        self.alternative = norm(loc=self.mu, scale=1.0) if alternative is None else alternative
        self.iid = iid
        self.conditional_log_ratio = conditional_log_ratio
        if prior is None:
            prior = np.full(self.n_samples, 1.0 / self.n_samples)
        self._prior = np.asarray(prior, dtype=float)
        self._points = np.arange(self.n_samples, dtype=float).reshape(-1, 1)
        self.validate()

    @property
    def parameter_points(self):
        return self._points

    @property
    def prior(self):
        return self._prior

    def _values(self, x):
        values = np.asarray(x.values if isinstance(x, DataSeries) else x, dtype=float)
        if values.shape != (self.n_samples,):
            raise ModelDomainError(
                f"Series has shape {values.shape}, expected ({self.n_samples},)")
        return values

    def sample_log_ratios(self, values):
        """Per-sample log h(x_k) / f(x_k) for the iid model."""
        if self._gaussian:
            return self.mu * values - 0.5 * self.mu ** 2
        return self.alternative.logpdf(values) - self.nominal.logpdf(values)

    def cond_llrs(self, x):
        values = self._values(x)
        if not self.iid:
            return np.array([self.conditional_log_ratio(values, tau)
                             for tau in range(self.n_samples)], dtype=float)
        # entry tau sums the samples tau+1..N (1-based)
        return np.cumsum(self.sample_log_ratios(values)[::-1])[::-1]

    def sample_h0(self, rng):
        return sample_series(self, None, rng)

    def sample_h1(self, rng):
        tau = int(rng.choice(self.n_samples, p=self._prior))
        return sample_series(self, tau, rng), np.array([float(tau)])


def build_changepoint_model(n_samples=CHANGEPOINT_SAMPLES, mu=CHANGEPOINT_MU, prior=None):
    return ChangepointModel(n_samples=n_samples, mu=mu, prior=prior)


def as_joint_model(model):
    model.validate()
    assert model.cost_kind is CostKind.ZERO_ONE
    return model


def sample_series(model, truth, rng):
    n = model.n_samples
    if truth is None:
        return DataSeries(values=model.nominal.rvs(size=n, random_state=rng), truth=None)
    if isinstance(truth, bool) or int(truth) != truth or not 0 <= truth < n:
        raise ModelDomainError(f"Changepoint {truth} outside 0..{n - 1}")
    tau = int(truth)
    head = model.nominal.rvs(size=tau, random_state=rng)
    tail = model.alternative.rvs(size=n - tau, random_state=rng)
    return DataSeries(values=np.concatenate([head, tail]), truth=tau)


def cond_llr(model, x, tau):
    if not 0 <= tau < model.n_samples:
        raise ModelDomainError(f"Changepoint {tau} outside 0..{model.n_samples - 1}")
    return model.cond_llr(x, tau)


def glrt_stat(model, x):
    """Maximum conditional log-LR and its argmax (smallest index on ties)."""
    llrs = model.cond_llrs(x)
    tau_hat = int(np.argmax(llrs))
    return float(llrs[tau_hat]), tau_hat


def closed_form_statistics(model, x, lambda_o, lam, log_gamma, lambda_r):
    """Changepoint test statistics written through M = max_U pi_U L(X|U).

    MAP estimate argmax_U pi_U L(X|U); posterior cost 1 - M / L(X);
    cost-only test M / L(X) >= 1 - lambda_o; coupled test
    (lam - 1) L(X) + M >= gamma; reliability M / L(X) >= 1 - lambda_r.
    """
    weighted = np.log(model.prior) + model.cond_llrs(x)
    tau_map = int(np.argmax(weighted))
    log_max = float(weighted[tau_map])
    log_lr = float(logsumexp(weighted))
    max_ratio = math.exp(log_max - log_lr)
    # (lam - 1) L + M in the log domain, with its sign
    log_coupled, sign = logsumexp([log_lr, log_max], b=[lam - 1.0, 1.0], return_sign=True)
    return {
        "tau_map": tau_map,
        "c_o": 1.0 - max_ratio,
        "cost_only": max_ratio >= 1.0 - lambda_o,
        "coupled": bool(sign > 0 and log_coupled >= log_gamma),
        "reliable": max_ratio >= 1.0 - lambda_r,
    }


def identity_check(model, n_series, rng, lambda_o=0.5, lam=1.2, log_gamma=0.0,
                   lambda_r=0.6):
    """Compare the generic decision rules with the closed forms on random series.

    Half of the series are drawn under H0, half under H1. Returns mismatch
    counts per statistic (all zero when the forms agree).
    """
    cost_only = ThresholdSet(alpha=0.5, gamma_np=0.0, lambda_o=lambda_o,
                             regime=Regime.COST_THRESHOLD_ONLY, lam=lambda_o, gamma=-np.inf)
    coupled = ThresholdSet(alpha=0.5, gamma_np=0.0, lambda_o=lambda_o,
                           regime=Regime.COUPLED, lam=lam, gamma=log_gamma)
    with np.errstate(divide="ignore"):
        log_prior = np.log(model.prior)
    mismatches = {"map": 0, "c_o": 0, "cost_only": 0, "coupled": 0, "reliable": 0, "glrt": 0}
    for i in range(n_series):
        if i % 2 == 0:
            series = model.sample_h0(rng)
        else:
            series, _ = model.sample_h1(rng)
        summary = posterior_summary(model, series, keep_weights=False)
        closed = closed_form_statistics(model, series, lambda_o, lam, log_gamma, lambda_r)

        llrs = model.cond_llrs(series)
        weighted = log_prior + llrs
        scan_map, scan_glrt = 0, 0
        for u in range(model.n_samples):
            if weighted[u] > weighted[scan_map]:
                scan_map = u
            if llrs[u] > llrs[scan_glrt]:
                scan_glrt = u

        tau_hat = int(summary.theta_hat[0])
        mismatches["map"] += tau_hat != closed["tau_map"] or tau_hat != scan_map
        mismatches["c_o"] += abs(summary.c_o - closed["c_o"]) > 1e-12
        mismatches["cost_only"] += \
            single_step_decide(summary, cost_only).verdict.detected != closed["cost_only"]
        mismatches["coupled"] += \
            single_step_decide(summary, coupled).verdict.detected != closed["coupled"]
        mismatches["reliable"] += (summary.c_o <= lambda_r) != closed["reliable"]
        mismatches["glrt"] += glrt_stat(model, series)[1] != scan_glrt
    logger.info("Changepoint identity check on %d series: %s", n_series, mismatches)
    return {key: int(value) for key, value in mismatches.items()}


def series_rows(series):
    truth = "H0" if series.truth is None else str(series.truth)
    return [{"k": k + 1, "x": format_real(v), "truth": truth}
            for k, v in enumerate(series.values)]


##############################################################################
# TESTS
##############################################################################


@pytest.mark.parametrize("tau, n_alternative", [(0, 16), (15, 1), (7, 9), (None, 0)])
def test_sample_series_regimes(tau, n_alternative):
    model = ChangepointModel(n_samples=16, mu=100.0)
    series = sample_series(model, tau, np.random.default_rng(0))
    assert series.truth == tau
    assert int(np.sum(series.values > 50.0)) == n_alternative
    if tau is not None:
        assert np.all(series.values[tau:] > 50.0)


def test_sample_series_out_of_range():
    model = ChangepointModel(n_samples=4)
    with pytest.raises(ModelDomainError):
        sample_series(model, 4, np.random.default_rng(0))
    with pytest.raises(ModelDomainError):
        sample_series(model, -1, np.random.default_rng(0))


def test_cond_llr_examples():
    model = ChangepointModel(n_samples=16, mu=1.0)
    flat = np.full(16, 0.5)
    np.testing.assert_allclose(model.cond_llrs(flat), np.zeros(16), atol=1e-15)
    x = np.random.default_rng(1).normal(size=16)
    assert cond_llr(model, x, 15) == pytest.approx(x[-1] - 0.5, abs=1e-15)
    with pytest.raises(ModelDomainError):
        cond_llr(model, x, 16)


def test_cond_llr_matches_density_ratio():
    rng = np.random.default_rng(2)
    model = ChangepointModel(n_samples=16, mu=1.0)
    f, h = norm(0.0, 1.0), norm(1.0, 1.0)
    for _ in range(100):
        x = rng.normal(size=16) + rng.uniform(0, 1)
        for tau in range(16):
            direct = np.sum(h.logpdf(x[tau:])) - np.sum(f.logpdf(x[tau:]))
            assert abs(cond_llr(model, x, tau) - direct) <= 1e-12


def test_non_iid_plug_in_matches_iid():
    iid = ChangepointModel(n_samples=8, mu=0.7)

    def ratio(values, tau):
        return float(np.sum(0.7 * values[tau:] - 0.245))

    plugged = ChangepointModel(n_samples=8, mu=0.7, iid=False, conditional_log_ratio=ratio)
    x = np.random.default_rng(3).normal(size=8)
    np.testing.assert_allclose(plugged.cond_llrs(x), iid.cond_llrs(x), atol=1e-12)


def test_single_sample_always_reliable():
    model = as_joint_model(ChangepointModel(n_samples=1))
    rng = np.random.default_rng(4)
    for _ in range(20):
        series, _ = model.sample_h1(rng)
        s = posterior_summary(model, series)
        assert s.theta_hat[0] == 0.0
        assert s.c_o == 0.0


def test_dominating_changepoint_has_small_cost():
    model = ChangepointModel(n_samples=16, mu=8.0)
    series = sample_series(model, 8, np.random.default_rng(5))
    s = posterior_summary(model, series)
    assert s.theta_hat[0] == 8.0
    assert s.c_o < 1e-3


def test_posterior_cost_direct_summation():
    rng = np.random.default_rng(6)
    model = ChangepointModel(n_samples=4, mu=1.0)
    for _ in range(50):
        series, _ = model.sample_h1(rng)
        x = series.values
        terms = [0.25 * math.exp(sum(x[k] - 0.5 for k in range(tau, 4))) for tau in range(4)]
        expected = 1.0 - max(terms) / sum(terms)
        assert abs(posterior_summary(model, series).c_o - expected) <= 1e-12


def test_glrt_stat_examples():
    x1 = np.array([0.3])
    assert glrt_stat(ChangepointModel(n_samples=1), x1) == \
        (pytest.approx(0.3 - 0.5), 0)
    flat = ChangepointModel(n_samples=5, mu=0.0)
    assert glrt_stat(flat, np.random.default_rng(7).normal(size=5))[1] == 0

    model = ChangepointModel(n_samples=16)
    rng = np.random.default_rng(8)
    for _ in range(200):
        x = rng.normal(size=16)
        value, tau = glrt_stat(model, x)
        scan = [sum(x[k] - 0.5 for k in range(u, 16)) for u in range(16)]
        assert tau == int(np.argmax(scan))
        assert value == pytest.approx(max(scan), abs=1e-12)


def test_zero_mu_gives_unit_likelihood_ratio():
    model = ChangepointModel(n_samples=16, mu=0.0)
    rng = np.random.default_rng(9)
    for _ in range(20):
        assert posterior_summary(model, model.sample_h0(rng)).log_lr == \
            pytest.approx(0.0, abs=1e-12)


def test_closed_forms_agree_with_generic_rules():
    model = ChangepointModel(n_samples=16, mu=1.0)
    mismatches = identity_check(model, 10 ** 4, np.random.default_rng(10))
    assert all(count == 0 for count in mismatches.values()), mismatches


def test_closed_forms_handle_large_log_likelihoods():
    model = ChangepointModel(n_samples=16, mu=60.0)
    rng = np.random.default_rng(12)
    series, _ = model.sample_h1(rng)
    summary = posterior_summary(model, series)
    assert summary.log_lr > 1000
    for lam in [0.2, 1.2]:
        closed = closed_form_statistics(model, series, 0.5, lam, 0.0, 0.6)
        assert closed["tau_map"] == int(summary.theta_hat[0])
        assert closed["coupled"] and closed["cost_only"] and closed["reliable"]
    closed = closed_form_statistics(model, model.sample_h0(rng), 0.5, 1.2, 0.0, 0.6)
    assert not closed["coupled"]
    mismatches = identity_check(model, 200, rng)
    assert all(count == 0 for count in mismatches.values()), mismatches


def test_detection_power_grows_with_mu():
    rng = np.random.default_rng(11)
    alpha, n = 0.05, 10 ** 4
    powers = []
    for mu in [0.5, 1.0, 2.0]:
        model = ChangepointModel(n_samples=16, mu=mu)
        h0 = [posterior_summary(model, model.sample_h0(rng), False).log_lr for _ in range(n)]
        gamma = calibrate_gamma_np(h0, alpha)
        h1 = [posterior_summary(model, model.sample_h1(rng)[0], False).log_lr for _ in range(n)]
        powers.append(np.mean(np.array(h1) > gamma))
    for low, high in zip(powers, powers[1:]):
        assert high >= low - 3 * math.sqrt(0.25 / n)


def test_series_rows():
    rows = series_rows(DataSeries(values=np.array([0.5, -1.0]), truth=1))
    assert rows == [{"k": 1, "x": "0.5", "truth": "1"}, {"k": 2, "x": "-1", "truth": "1"}]
