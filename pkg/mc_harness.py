# mc_harness.py
# Monte-Carlo experiments: per-trial random streams, H0/H1 trial batches on a
# joblib pool, threshold calibration, the paired fraction sweep with GLRT and
# separate-treatment baselines, fresh-sample validation and CSV output.

from dataclasses import dataclass, field
from typing import Optional
import logging
import math
import os

import numpy as np
import pandas as pd
import pytest
import yaml
from joblib import Parallel, delayed
from tqdm import tqdm

from joint_detection import ThresholdSet, Verdict, PosteriorSummary, \
    calibrate_gamma_np, empirical_miss_rate, calibrate_reliability_lambda, \
    calibrate_single_step, conditional_cost, posterior_summary, np_decide, \
    two_step_decide, single_step_decide, FiniteModel, random_finite_model
from utils import get_logger, get_thread_count, format_real, binomial_standard_error, \
    MODELS, PROFILES, FRACTIONS, CELL_SIZE, DISC_RADIUS, TIME_SAMPLES, \
    CHANGEPOINT_SAMPLES, CHANGEPOINT_MU


logger = get_logger(__name__)

CSV_COLUMNS = ["fraction_target", "lambda", "realized_fraction", "K", "mse",
               "mse_normalized", "p_detect", "scheme"]

WORD_MASK = 0xFFFFFFFF


##############################################################################
# CONFIGURATION
##############################################################################


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = "radar"
    m: int = 2
    n: int = 2
    n_samples: int = CHANGEPOINT_SAMPLES
    mu: float = CHANGEPOINT_MU
    snr_db: list = field(default_factory=lambda: [0.0])
    snr_reference: str = "integration"
    alpha: float = PROFILES["desk"]["alpha"]
    beta: Optional[float] = None
    fractions: list = field(default_factory=lambda: list(FRACTIONS))
    trials_calibration: int = PROFILES["desk"]["trials_calibration"]
    trials_evaluation: int = PROFILES["desk"]["trials_evaluation"]
    seed: int = 0
    region: str = "disc"
    cell_size: float = CELL_SIZE
    disc_radius: float = DISC_RADIUS
    l_t: int = TIME_SAMPLES
    path_loss_eta: float = 0.0
    profile: str = "desk"
    output: Optional[str] = None

    @property
    def model_key(self):
        if self.model == "radar":
            return f"radar_{self.m}x{self.n}"
        return self.model

    @property
    def snr_values(self):
        return list(self.snr_db) if self.model == "radar" else [None]


def _as_int(key, value):
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if not number.is_integer():
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return int(number)


def _as_float(key, value):
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {value!r}")


def _as_float_list(key, value):
    if not isinstance(value, (list, tuple)):
        value = [value]
    return [_as_float(key, v) for v in value]


def _as_str(key, value):
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


COERCE = {
    "model": _as_str, "m": _as_int, "n": _as_int, "n_samples": _as_int, "mu": _as_float,
    "snr_db": _as_float_list, "snr_reference": _as_str, "alpha": _as_float,
    "beta": _as_float, "fractions": _as_float_list, "trials_calibration": _as_int,
    "trials_evaluation": _as_int, "seed": _as_int, "region": _as_str,
    "cell_size": _as_float, "disc_radius": _as_float, "l_t": _as_int,
    "path_loss_eta": _as_float, "profile": _as_str, "output": _as_str,
}


def _check_config(config):
    if config.model not in ("radar", "changepoint"):
        raise ConfigError(f"model: expected radar or changepoint, got '{config.model}'")
    if config.model_key not in MODELS:
        raise ConfigError(f"Unsupported antenna configuration {config.m}x{config.n} "
                          f"(registered: {', '.join(sorted(MODELS))})")
    if not 0 < config.alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {config.alpha}")
    if config.beta is not None and not 0 < config.beta < 1:
        raise ConfigError(f"beta must lie in (0, 1), got {config.beta}")
    if not config.fractions or any(not 0 < f <= 1 for f in config.fractions):
        raise ConfigError(f"fractions must lie in (0, 1], got {config.fractions}")
    config.fractions = sorted(set(config.fractions))
    if config.trials_calibration < 1 or config.trials_evaluation < 1:
        raise ConfigError("trial counts must be >= 1")
    if not 0 <= config.seed < 2 ** 64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {config.seed}")
    if config.region not in ("ellipse", "disc"):
        raise ConfigError(f"region: expected ellipse or disc, got '{config.region}'")
    if config.snr_reference not in ("integration", "matched"):
        raise ConfigError(f"snr_reference: expected integration or matched, "
                          f"got '{config.snr_reference}'")
    if config.profile not in PROFILES:
        raise ConfigError(f"profile: expected one of {sorted(PROFILES)}, got '{config.profile}'")
    if config.model == "radar" and not config.snr_db:
        raise ConfigError("snr_db must list at least one value")
    if config.n_samples < 1 or config.l_t < 2 or config.cell_size <= 0:
        raise ConfigError("n_samples >= 1, l_t >= 2 and cell_size > 0 are required")


def config_from_mapping(raw, overrides=None):
    """Merge built-in defaults < profile < raw mapping < overrides."""
    raw = dict(raw or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = sorted(set(raw) - set(COERCE)) + sorted(set(overrides) - set(COERCE))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")

    profile = overrides.get("profile", raw.get("profile", "desk"))
    if profile not in PROFILES:
        raise ConfigError(f"profile: expected one of {sorted(PROFILES)}, got '{profile}'")
    values = dict(PROFILES[profile])
    values.update(raw)
    values.update(overrides)
    values["profile"] = profile

    kwargs = {}
    for key, value in values.items():
        if value is None:
            kwargs[key] = None
            continue
        kwargs[key] = COERCE[key](key, value)
    config = ExperimentConfig(**kwargs)
    _check_config(config)
    return config


def load_config(path, overrides=None):
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not a valid config file ({e})")
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected key: value lines")
    return config_from_mapping(raw, overrides)


def build_model(config, snr_db=None):
    entry = MODELS[config.model_key]
    if entry["kind"] == "radar":
        return entry["factory"](snr_db=snr_db, snr_reference=config.snr_reference,
                                region=config.region, cell_size=config.cell_size,
                                disc_radius=config.disc_radius, l_t=config.l_t,
                                path_loss_eta=config.path_loss_eta)
    return entry["factory"](n_samples=config.n_samples, mu=config.mu)


def normalization(config):
    return MODELS[config.model_key]["normalization"]


##############################################################################
# TRIALS
##############################################################################


def stream_entropy(seed, trial_index, purpose):
    """Seed and trial index as two 32-bit words each, then the tag length and
    its UTF-8 bytes. Distinct keys always give distinct entropy lists.
    """
    seed, trial_index = int(seed), int(trial_index)
    tag = purpose.encode("utf-8")
    return [seed & WORD_MASK, seed >> 32, trial_index & WORD_MASK, trial_index >> 32,
            len(tag), *tag]


def derive_stream(seed, trial_index, purpose):
    """Independent Philox stream keyed by (seed, trial index, purpose)."""
    key = np.random.SeedSequence(stream_entropy(seed, trial_index, purpose))
    return np.random.Generator(np.random.Philox(key))


@dataclass
class TrialRecord:
    index: int
    hypothesis: int
    truth: Optional[np.ndarray]
    log_lr: float
    theta_hat: np.ndarray
    c_o: float
    error: Optional[float]
    glrt_stat: float
    glrt_estimate: np.ndarray
    glrt_error: Optional[float]
    verdicts: dict = field(default_factory=dict)

    @property
    def summary(self):
        return PosteriorSummary(log_lr=self.log_lr, theta_hat=self.theta_hat, c_o=self.c_o)


def simulate_trial(model, hypothesis, index, seed, purpose):
    rng = derive_stream(seed, index, f"{purpose}/h{hypothesis}")
    if hypothesis == 0:
        x, truth = model.sample_h0(rng), None
    else:
        x, truth = model.sample_h1(rng)
    llrs = model.cond_llrs(x)
    summary = posterior_summary(model, x, keep_weights=False, llrs=llrs)
    glrt_value, glrt_estimate = model.glrt_stat(x, llrs)
    error = glrt_error = None
    if truth is not None:
        error = model.cost(summary.theta_hat, truth)
        glrt_error = model.cost(glrt_estimate, truth)
    return TrialRecord(index=index, hypothesis=hypothesis, truth=truth, log_lr=summary.log_lr,
                       theta_hat=summary.theta_hat, c_o=summary.c_o, error=error,
                       glrt_stat=glrt_value, glrt_estimate=glrt_estimate,
                       glrt_error=glrt_error)


def _simulate_chunk(model, hypothesis, indices, seed, purpose):
    return [simulate_trial(model, hypothesis, i, seed, purpose) for i in indices]


def simulate_batch(model, hypothesis, indices, seed, purpose):
    """Trial records for the given indices, ordered by index.

    Each trial draws from its own stream, so the result does not depend on
    the number of workers (JODE_THREADS).
    """
    indices = list(indices)
    n_jobs = get_thread_count()
    show = logger.isEnabledFor(logging.INFO)
    desc = f"{purpose} H{hypothesis}"
    if n_jobs == 1:
        return [simulate_trial(model, hypothesis, i, seed, purpose)
                for i in tqdm(indices, desc=desc, disable=not show)]
    chunks = [c.tolist() for c in np.array_split(np.asarray(indices), n_jobs * 4) if len(c)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_simulate_chunk)(model, hypothesis, chunk, seed, purpose)
        for chunk in tqdm(chunks, desc=desc, disable=not show))
    records = [r for chunk in results for r in chunk]
    records.sort(key=lambda r: r.index)
    return records


def _pairs(records):
    return np.array([[r.log_lr, r.c_o] for r in records])


##############################################################################
# CALIBRATION
##############################################################################


def purpose_tag(stage, snr_db):
    return stage if snr_db is None else f"{stage}@{snr_db:g}dB"


def run_calibration(config, model, snr_db=None):
    """Thresholds for every scheme from one H0 and one H1 calibration batch."""
    n = config.trials_calibration
    purpose = purpose_tag("calibration", snr_db)
    h0 = simulate_batch(model, 0, range(n), config.seed, purpose)
    h1 = simulate_batch(model, 1, range(n), config.seed, purpose)

    provenance = {"model": config.model_key, "seed": config.seed, "trials": n,
                  "snr_db": None if snr_db is None else format_real(snr_db)}
    h0_llr = np.array([r.log_lr for r in h0])
    gamma_np = calibrate_gamma_np(h0_llr, config.alpha, provenance)
    beta_np = empirical_miss_rate([r.log_lr for r in h1], gamma_np)
    detected = [r.c_o for r in h1 if r.log_lr > gamma_np]
    reliability = {f: calibrate_reliability_lambda(detected, f) for f in config.fractions}
    glrt_threshold = calibrate_gamma_np([r.glrt_stat for r in h0], config.alpha)

    thresholds = ThresholdSet(alpha=config.alpha, gamma_np=gamma_np, beta=config.beta,
                              beta_np=beta_np, reliability_lambdas=reliability,
                              glrt_threshold=glrt_threshold, provenance=provenance)
    if config.beta is not None:
        single = calibrate_single_step(_pairs(h0), _pairs(h1), config.alpha, config.beta)
        thresholds.lambda_o = single.lambda_o
        thresholds.regime = single.regime
        thresholds.lam = single.lam
        thresholds.gamma = single.gamma
        provenance.update({k: v for k, v in single.provenance.items() if k != "warnings"})
        if "warnings" in single.provenance:
            provenance.setdefault("warnings", []).extend(single.provenance["warnings"])
    logger.info("Calibrated %s: gamma_np=%.6g beta_np=%.4g", purpose, gamma_np, beta_np)
    return thresholds


##############################################################################
# EVALUATION
##############################################################################


def assign_verdicts(records, thresholds):
    """Decisions of every scheme on the same trials (paired evaluation)."""
    for r in records:
        s = r.summary
        r.verdicts["np"] = np_decide(s, thresholds.gamma_np)
        r.verdicts["separate"] = two_step_decide(s, thresholds.gamma_np, math.inf).verdict
        for f, lam in thresholds.reliability_lambdas.items():
            r.verdicts[f"two_step@{f:g}"] = two_step_decide(s, thresholds.gamma_np, lam).verdict
        if thresholds.glrt_threshold is not None:
            r.verdicts["glrt"] = Verdict.H1 if r.glrt_stat > thresholds.glrt_threshold \
                else Verdict.H0
        if thresholds.regime is not None:
            r.verdicts["single_step"] = single_step_decide(s, thresholds).verdict
    return records


@dataclass
class SweepRow:
    scheme: str
    fraction_target: Optional[float]
    lam: Optional[float]
    realized_fraction: Optional[float]
    k: int
    mse: Optional[float]
    mse_normalized: Optional[float]
    p_detect: float

    def as_csv_dict(self):
        return {"fraction_target": self.fraction_target, "lambda": self.lam,
                "realized_fraction": self.realized_fraction, "K": self.k, "mse": self.mse,
                "mse_normalized": self.mse_normalized, "p_detect": self.p_detect,
                "scheme": self.scheme}


@dataclass
class SweepResult:
    rows: list
    normalization: float
    snr_db: Optional[float] = None

    def row(self, scheme, fraction=None):
        for r in self.rows:
            if r.scheme == scheme and (fraction is None or r.fraction_target == fraction):
                return r
        raise KeyError((scheme, fraction))

    def to_frame(self):
        return pd.DataFrame([r.as_csv_dict() for r in self.rows], columns=CSV_COLUMNS)


def _row(scheme, records, key, norm, fraction=None, lam=None, glrt=False):
    n = len(records)
    detected = [r for r in records if r.verdicts[key].detected]
    if glrt:
        selected = detected
        errors = [r.glrt_error for r in selected]
    else:
        selected = [r for r in detected if r.verdicts[key] is not Verdict.H1_UNRELIABLE]
        errors = [r.error for r in selected]
    k = len(selected)
    mse = float(np.mean(errors)) if k else None
    if not k:
        logger.warning("No reliable detections for scheme %s (fraction %s)", scheme, fraction)
    realized = len(selected) / len(detected) if detected else None
    return SweepRow(scheme=scheme, fraction_target=fraction, lam=lam, realized_fraction=realized,
                    k=k, mse=mse, mse_normalized=None if mse is None else mse / norm,
                    p_detect=len(detected) / n if n else 0.0)


def sweep_rows(records, thresholds, norm):
    rows = []
    for f in sorted(thresholds.reliability_lambdas):
        lam = thresholds.reliability_lambdas[f]
        key = f"two_step@{f:g}"
        row = _row("two_step", records, key, norm, fraction=f, lam=lam)
        cost = conditional_cost(records, Verdict.H1_RELIABLE, key)
        assert cost.count == row.k
        rows.append(row)
    rows.append(_row("separate", records, "separate", norm, lam=math.inf))
    if thresholds.glrt_threshold is not None:
        rows.append(_row("glrt", records, "glrt", norm, glrt=True))
    if thresholds.regime is not None:
        rows.append(_row("single_step", records, "single_step", norm, lam=thresholds.lam))
    return rows


def run_sweep(config, model, thresholds, snr_db=None):
    """Evaluate every scheme on one shared batch of fresh H1 trials."""
    records = simulate_batch(model, 1, range(config.trials_evaluation), config.seed,
                             purpose_tag("evaluation", snr_db))
    assign_verdicts(records, thresholds)
    result = SweepResult(rows=sweep_rows(records, thresholds, normalization(config)),
                         normalization=normalization(config), snr_db=snr_db)
    return result, records


def validate_calibration(config, model, thresholds, snr_db=None, n_se=3.0):
    """Realized error rates on fresh H0/H1 trials against their targets."""
    n = config.trials_evaluation
    purpose = purpose_tag("validation", snr_db)
    h0 = assign_verdicts(simulate_batch(model, 0, range(n), config.seed, purpose), thresholds)
    h1 = assign_verdicts(simulate_batch(model, 1, range(n), config.seed, purpose), thresholds)

    checks = {}

    def check(name, realized, target, count):
        se = binomial_standard_error(target, count) if count else math.inf
        checks[name] = {"realized": realized, "target": target, "se": se,
                        "ok": abs(realized - target) <= n_se * se + 1.0 / max(count, 1)}

    check("false_alarm", np.mean([r.verdicts["np"].detected for r in h0]), config.alpha, n)
    check("detection", np.mean([r.verdicts["np"].detected for r in h1]),
          1.0 - thresholds.beta_np, n)
    detected = [r for r in h1 if r.verdicts["np"].detected]
    for f in sorted(thresholds.reliability_lambdas):
        if f >= 1:
            continue
        reliable = [r.verdicts[f"two_step@{f:g}"] is Verdict.H1_RELIABLE for r in detected]
        check(f"reliable_fraction@{f:g}", float(np.mean(reliable)) if reliable else 0.0,
              f, len(detected))
    if thresholds.regime is not None:
        check("cost_quantile", np.mean([r.c_o <= thresholds.lambda_o for r in h1]),
              1.0 - config.beta, n)
        check("single_step_false_alarm",
              np.mean([r.verdicts["single_step"].detected for r in h0]), config.alpha, n)
        check("single_step_detection",
              np.mean([r.verdicts["single_step"].detected for r in h1]), 1.0 - config.beta, n)
    for name, c in checks.items():
        logger.info("%s: realized %.5g target %.5g (se %.3g) %s", name, c["realized"],
                    c["target"], c["se"], "ok" if c["ok"] else "FAIL")
    return checks


##############################################################################
# OUTPUT
##############################################################################


def write_csv(result, path):
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    result.to_frame().to_csv(path, index=False, float_format="%.17g", na_rep="",
                             lineterminator="\n", encoding="utf-8")


def write_trials_csv(records, path):
    frame = pd.DataFrame([{
        "index": r.index,
        "hypothesis": r.hypothesis,
        "truth": "" if r.truth is None else " ".join(format_real(v) for v in np.ravel(r.truth)),
        "log_lr": format_real(r.log_lr),
        "theta_hat": " ".join(format_real(v) for v in np.ravel(r.theta_hat)),
        "c_o": format_real(r.c_o),
        "error": "" if r.error is None else format_real(r.error),
        "glrt_stat": format_real(r.glrt_stat),
        "glrt_error": "" if r.glrt_error is None else format_real(r.glrt_error),
    } for r in records])
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def output_path(base, snr_db, n_values):
    """One file per SNR value when a sweep covers several."""
    if n_values == 1 or snr_db is None:
        return base
    stem, ext = os.path.splitext(base)
    return f"{stem}_snr{snr_db:g}dB{ext or '.csv'}"


##############################################################################
# TESTS
##############################################################################


def _changepoint_config(**kwargs):
    values = {"model": "changepoint", "alpha": 0.05, "trials_calibration": 4000,
              "trials_evaluation": 4000, "seed": 5}
    values.update(kwargs)
    return config_from_mapping(values)


def test_derive_stream_examples():
    a = derive_stream(42, 0, "noise").standard_normal(100)
    b = derive_stream(42, 0, "noise").standard_normal(100)
    np.testing.assert_array_equal(a, b)
    c = derive_stream(42, 0, "target").standard_normal(100)
    assert not np.array_equal(a, c)
    x = derive_stream(42, 7, "noise").standard_normal(10 ** 5)
    y = derive_stream(42, 8, "noise").standard_normal(10 ** 5)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.01


@pytest.mark.parametrize("first, second", [
    ((0, 1, "a"), (0, 1, "a\x00")),
    ((2 ** 32, 0, "noise"), (0, 1, "noise")),
    ((0, 2 ** 32, "noise"), (0, 0, "noise")),
    ((7, 3, "ab"), (7, 3, "ba")),
    ((7, 3, "calibration/h1"), (7, 3, "calibration/h0")),
])
def test_stream_keys_are_distinct(first, second):
    assert stream_entropy(*first) != stream_entropy(*second)
    a = derive_stream(*first).standard_normal(8)
    b = derive_stream(*second).standard_normal(8)
    assert not np.array_equal(a, b)


def test_stream_entropy_layout():
    assert stream_entropy(2 ** 32 + 5, 9, "h1") == [5, 1, 9, 0, 2, ord("h"), ord("1")]
    assert stream_entropy(0, 0, "") == [0, 0, 0, 0, 0]


def test_trial_computes_conditional_llrs_once():
    calls = []

    class CountingModel(FiniteModel):
        def cond_llrs(self, x):
            calls.append(x)
            return super().cond_llrs(x)

    base = random_finite_model(np.random.default_rng(4), 5, 6)
    model = CountingModel(base.f0, base.f1, base.prior, base.parameter_points)
    record = simulate_trial(model, 1, 0, 3, "check")
    assert len(calls) == 1

    x, _ = base.sample_h1(derive_stream(3, 0, "check/h1"))
    llrs = base.cond_llrs(x)
    assert record.glrt_stat == np.max(llrs)
    np.testing.assert_array_equal(record.glrt_estimate,
                                  base.parameter_points[int(np.argmax(llrs))])
    assert record.log_lr == posterior_summary(base, x).log_lr


def test_config_precedence_and_coercion(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("model: radar\nm: 2\nn: 2\nalpha: 1e-3\nsnr_db: [-20, 0]\n"
                    "trials_evaluation: 2e4\nprofile: full\n")
    config = load_config(str(path))
    assert config.alpha == 1e-3
    assert config.trials_calibration == PROFILES["full"]["trials_calibration"]
    assert config.trials_evaluation == 20000
    assert config.snr_db == [-20.0, 0.0]
    config = load_config(str(path), {"alpha": 0.05, "seed": 7, "snr_db": None})
    assert config.alpha == 0.05 and config.seed == 7 and config.snr_db == [-20.0, 0.0]


@pytest.mark.parametrize("text", [
    "model: radar\nfoo: 1\n",
    "model: sonar\n",
    "model: radar\nm: 4\nn: 4\n",
    "model: radar\nalpha: 1.5\n",
    "model: radar\nfractions: [0.5, 0.0]\n",
    "model: radar\ntrials_calibration: 2.5\n",
    "- just\n- a list\n",
])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_calibration_median_and_infinite_lambda():
    config = _changepoint_config(alpha=0.5, fractions=[1.0])
    model = build_model(config)
    thresholds = run_calibration(config, model)
    h0 = simulate_batch(model, 0, range(config.trials_calibration), config.seed, "calibration")
    assert thresholds.gamma_np == pytest.approx(np.median([r.log_lr for r in h0]), abs=0.05)
    assert thresholds.reliability_lambdas == {1.0: math.inf}


def test_batches_do_not_depend_on_worker_count(monkeypatch):
    model = build_model(_changepoint_config())
    monkeypatch.setenv("JODE_THREADS", "1")
    serial = simulate_batch(model, 1, range(40), 3, "check")
    monkeypatch.setenv("JODE_THREADS", "2")
    pooled = simulate_batch(model, 1, range(40), 3, "check")
    assert [r.index for r in pooled] == list(range(40))
    assert [r.log_lr for r in serial] == [r.log_lr for r in pooled]
    assert [r.error for r in serial] == [r.error for r in pooled]


def test_sweep_invariants():
    config = _changepoint_config(fractions=[0.25, 0.5, 1.0], beta=0.8)
    model = build_model(config)
    thresholds = run_calibration(config, model)
    result, records = run_sweep(config, model, thresholds)

    full, separate = result.row("two_step", 1.0), result.row("separate")
    assert full.mse == separate.mse and full.k == separate.k
    assert len({r.p_detect for r in result.rows if r.scheme in ("two_step", "separate")}) == 1

    reliable = {}
    for f in [0.25, 0.5, 1.0]:
        reliable[f] = {r.index for r in records
                       if r.verdicts[f"two_step@{f:g}"] is Verdict.H1_RELIABLE}
    assert reliable[0.25] <= reliable[0.5] <= reliable[1.0]
    for f in [0.25, 0.5]:
        row = result.row("two_step", f)
        se = binomial_standard_error(f, separate.k)
        assert abs(row.realized_fraction - f) <= 3 * se + 2.0 / separate.k
    assert result.row("two_step", 0.25).mse <= result.row("two_step", 1.0).mse
    assert [r.scheme for r in result.rows][-2:] == ["glrt", "single_step"]


def test_validate_calibration_on_changepoint():
    config = _changepoint_config(trials_calibration=20000, trials_evaluation=20000,
                                 alpha=0.05, beta=0.7, fractions=[0.5, 0.9, 1.0])
    model = build_model(config)
    thresholds = run_calibration(config, model)
    checks = validate_calibration(config, model, thresholds, n_se=4.0)
    assert all(c["ok"] for c in checks.values()), checks


def test_radar_fraction_trend():
    config = config_from_mapping({
        "model": "radar", "m": 2, "n": 2, "snr_db": [10], "snr_reference": "matched",
        "alpha": 0.05, "fractions": [0.5, 1.0], "trials_calibration": 1500,
        "trials_evaluation": 1500, "l_t": 100, "cell_size": 20.0, "seed": 11})
    model = build_model(config, 10.0)
    thresholds = run_calibration(config, model, 10.0)
    result, _ = run_sweep(config, model, thresholds, 10.0)
    assert result.row("two_step", 0.5).mse_normalized < result.row("two_step", 1.0).mse_normalized


def test_radar_reliable_half_at_0db():
    # desk grid and timing; near-collocated antennas resolve range only
    config = config_from_mapping({
        "model": "radar", "m": 2, "n": 2, "snr_db": [0], "snr_reference": "matched",
        "alpha": 0.01, "fractions": [0.5, 1.0], "trials_calibration": 4000,
        "trials_evaluation": 4000, "seed": 21})
    model = build_model(config, 0.0)
    thresholds = run_calibration(config, model, 0.0)
    result, _ = run_sweep(config, model, thresholds, 0.0)
    half, full = result.row("two_step", 0.5), result.row("two_step", 1.0)
    assert full.k >= 300
    assert half.mse_normalized < 0.8 * full.mse_normalized
    assert full.mse == result.row("separate").mse


def test_validate_calibration_on_radar():
    config = config_from_mapping({
        "model": "radar", "m": 2, "n": 2, "snr_db": [0], "snr_reference": "matched",
        "alpha": 0.05, "beta": 0.9, "fractions": [0.5, 1.0], "trials_calibration": 20000,
        "trials_evaluation": 2000, "l_t": 100, "cell_size": 20.0, "seed": 13})
    model = build_model(config, 0.0)
    thresholds = run_calibration(config, model, 0.0)
    checks = validate_calibration(config, model, thresholds, 0.0, n_se=3.0)
    assert {"false_alarm", "detection", "reliable_fraction@0.5", "cost_quantile",
            "single_step_false_alarm", "single_step_detection"} <= set(checks)
    assert all(c["ok"] for c in checks.values()), checks


def test_write_csv_format(tmp_path):
    empty = tmp_path / "empty.csv"
    write_csv(SweepResult(rows=[], normalization=1.0), str(empty))
    assert empty.read_bytes() == (",".join(CSV_COLUMNS) + "\n").encode("utf-8")

    rows = [SweepRow("two_step", 0.5, 1.0 / 3.0, 0.49, 10, 0.1, 0.1 / 5625.0, 0.8),
            SweepRow("separate", None, math.inf, 1.0, 20, None, None, 0.8)]
    path = tmp_path / "sweep.csv"
    write_csv(SweepResult(rows=rows, normalization=5625.0), str(path))
    text = path.read_text(encoding="utf-8")
    assert "\r" not in text
    assert text.splitlines()[2].startswith(",inf,1,20,,,")
    frame = pd.read_csv(path, float_precision="round_trip")
    assert frame["lambda"][0] == 1.0 / 3.0
    assert frame["mse_normalized"][0] == 0.1 / 5625.0


def test_sweep_output_is_deterministic(tmp_path):
    config = _changepoint_config(trials_calibration=1000, trials_evaluation=1000)
    paths = []
    for name in ["a.csv", "b.csv"]:
        model = build_model(config)
        result, _ = run_sweep(config, model, run_calibration(config, model))
        paths.append(tmp_path / name)
        write_csv(result, str(paths[-1]))
    assert paths[0].read_bytes() == paths[1].read_bytes()


GOLDEN_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden")


def test_write_csv_matches_golden_rows(tmp_path):
    rows = [SweepRow("two_step", 0.5, 1.0 / 3.0, 0.5, 10, 0.125, 0.0625, 0.75),
            SweepRow("separate", None, math.inf, 1.0, 20, None, None, 0.75)]
    path = tmp_path / "sweep.csv"
    write_csv(SweepResult(rows=rows, normalization=2.0), str(path))
    with open(os.path.join(GOLDEN_DIR, "sweep_rows.csv"), "rb") as f:
        assert path.read_bytes() == f.read()


def test_sweep_csv_matches_frozen_seed_run(tmp_path):
    config = _changepoint_config(trials_calibration=2000, trials_evaluation=2000, beta=0.8,
                                 fractions=[0.25, 0.5, 1.0])
    model = build_model(config)
    result, _ = run_sweep(config, model, run_calibration(config, model))
    path = tmp_path / "sweep.csv"
    write_csv(result, str(path))
    golden = os.path.join(GOLDEN_DIR, "changepoint_seed5.csv")
    if not os.path.exists(golden):
        with open(golden, "wb") as f:
            f.write(path.read_bytes())
        pytest.skip(f"froze {golden}; later runs compare against it")
    with open(golden, "rb") as f:
        assert path.read_bytes() == f.read()


def test_output_path_per_snr():
    assert output_path("out/sweep.csv", 0.0, 1) == "out/sweep.csv"
    assert output_path("out/sweep.csv", -10.0, 4) == "out/sweep_snr-10dB.csv"
