# utils.py
# Shared constants, registry and helpers for the joint detection/estimation
# experiments.

from functools import partial
import logging
import math
import os

import numpy as np


##############################################################################
# CONSTANTS
##############################################################################


SEEDS = [21, 57, 84]
SNR_VALUES_DB = [-20, -10, 0, 10]
FRACTIONS = [0.25, 0.5, 0.75, 0.9, 1.0]

# Radar scene defaults (Km, seconds)
SPEED_OF_LIGHT = 3e5
SIGNAL_DURATION = 1e-4
INTEGRATION_TIME = 5e-4
TIME_SAMPLES = 500
CELL_SIZE = 10.0
DISC_RADIUS = 75.0
REFERENCE_GRID_POINTS = 179

# MSE normalization, the (approximate) squared radius of the surveillance disc
RADAR_MSE_NORMALIZATION = DISC_RADIUS ** 2

# Changepoint defaults
CHANGEPOINT_SAMPLES = 16
CHANGEPOINT_MU = 1.0

# Calibration limits
MIN_TAIL_COUNT = 10
MAX_DOUBLINGS = 40
MAX_BISECTIONS = 60

PROFILES = {
    "desk": {
        "alpha": 1e-2,
        "trials_calibration": 20000,
        "trials_evaluation": 20000,
    },
    "full": {
        "alpha": 1e-3,
        "trials_calibration": 1000000,
        "trials_evaluation": 200000,
    },
}

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


##############################################################################
# HELPER FUNCTIONS
##############################################################################


def _package_logger():
    root = logging.getLogger("jode")
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        root.setLevel(logging.WARNING)
    return root


def get_logger(name):
    return _package_logger().getChild(name)


def set_verbosity(verbose):
    """Map a -v count onto the package log level (0 WARNING, 1 INFO, 2+ DEBUG)."""
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG
    _package_logger().setLevel(level)
    return level


def format_real(x):
    """Decimal string with 17 significant digits; infinities spelled out."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def parse_real(s):
    return float(s)


def write_file(directory, filename, lines):
    if not os.path.exists(directory):
        os.makedirs(directory)
    f = open(os.path.join(directory, filename), "w", encoding="utf-8", newline="\n")
    f.writelines(lines)
    f.close()


def get_thread_count():
    """Worker cap from JODE_THREADS (default 1, sequential)."""
    value = os.environ.get("JODE_THREADS", "1")
    try:
        threads = int(value)
    except ValueError:
        raise ValueError(f"JODE_THREADS must be an integer, got '{value}'")
    return max(1, threads)


def order_statistic_index(q, n):
    """1-based index ceil(q*n), clamped to [1, n].

    The product is rounded to 9 decimals first so that e.g. 0.95*100 lands on
    95 and not on 96 through binary representation error.
    """
    k = int(math.ceil(round(q * n, 9)))
    return min(max(k, 1), n)


def empirical_quantile(sample, q):
    """Order statistic x_(ceil(q*n)) of the sample (1-based convention)."""
    sample = np.asarray(sample, dtype=float).ravel()
    k = order_statistic_index(q, sample.size)
    return float(np.partition(sample, k - 1)[k - 1])


def binomial_standard_error(p, n):
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


##############################################################################
# MODELS
##############################################################################


# Imported late: the model modules import helpers from this file.
def _radar_factory(m, n, **kwargs):
    from mimo_radar_model import build_radar_model
    return build_radar_model(m=m, n=n, **kwargs)


def _changepoint_factory(**kwargs):
    from changepoint_model import build_changepoint_model
    return build_changepoint_model(**kwargs)


MODELS = {
    "radar_2x2": {
        "factory": partial(_radar_factory, m=2, n=2),
        "kind": "radar",
        "normalization": RADAR_MSE_NORMALIZATION,
    },
    "radar_3x3": {
        "factory": partial(_radar_factory, m=3, n=3),
        "kind": "radar",
        "normalization": RADAR_MSE_NORMALIZATION,
    },
    "changepoint": {
        "factory": _changepoint_factory,
        "kind": "changepoint",
        "normalization": 1.0,
    },
}


##############################################################################
# TESTS
##############################################################################


def test_order_statistic_index_exact_products():
    assert order_statistic_index(0.95, 100) == 95
    assert order_statistic_index(0.8, 100) == 80
    assert order_statistic_index(0.5, 4) == 2
    assert order_statistic_index(1.0, 7) == 7
    assert order_statistic_index(1e-9, 7) == 1


def test_empirical_quantile_direct():
    assert empirical_quantile(np.arange(1, 101), 0.95) == 95.0
    assert empirical_quantile([4.0, 1.0, 3.0, 2.0], 0.5) == 2.0


def test_format_real_round_trip():
    for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.123456789, float("inf")]:
        assert parse_real(format_real(x)) == x
    assert format_real(float("inf")) == "inf"


def test_thread_count_from_env(monkeypatch):
    monkeypatch.setenv("JODE_THREADS", "3")
    assert get_thread_count() == 3
    monkeypatch.setenv("JODE_THREADS", "0")
    assert get_thread_count() == 1
    monkeypatch.delenv("JODE_THREADS")
    assert get_thread_count() == 1


def test_write_file_creates_directory(tmp_path):
    directory = tmp_path / "nested" / "out"
    write_file(str(directory), "lines.txt", ["a\n", "b\n"])
    assert (directory / "lines.txt").read_bytes() == b"a\nb\n"
