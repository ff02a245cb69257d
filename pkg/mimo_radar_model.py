# mimo_radar_model.py
# Widely separated MIMO radar: M transmitters emitting orthogonal complex
# exponentials, N receivers, Swerling I reflectivities, target location on a
# grid over the surveillance region. Matched statistics Q_n(theta), R_n(theta)
# are Riemann sums over L_t time samples of the integration window.

from dataclasses import dataclass, replace
from enum import Enum
import math

import numpy as np
import pytest

from joint_detection import JointModel, CostKind, ModelDomainError, NumericalError, \
    PreconditionError, posterior_summary
from utils import get_logger, format_real, SPEED_OF_LIGHT, SIGNAL_DURATION, \
    INTEGRATION_TIME, TIME_SAMPLES, CELL_SIZE, DISC_RADIUS, REFERENCE_GRID_POINTS


logger = get_logger(__name__)

HERMITIAN_TOLERANCE = 1e-10
PSD_TOLERANCE = 1e-8
QUADRATIC_IMAG_TOLERANCE = 1e-9

SNR_INTEGRATION = "integration"
SNR_MATCHED = "matched"


##############################################################################
# SCENE AND REGION
##############################################################################


@dataclass(frozen=True, eq=False)
class RadarScene:
    tx_positions: np.ndarray
    rx_positions: np.ndarray
    signal_duration: float = SIGNAL_DURATION
    integration_time: float = INTEGRATION_TIME
    energy: float = 1.0
    path_loss_eta: float = 0.0
    speed_of_light: float = SPEED_OF_LIGHT
    l_t: int = TIME_SAMPLES

    def __post_init__(self):
        object.__setattr__(self, "tx_positions",
                           np.asarray(self.tx_positions, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "rx_positions",
                           np.asarray(self.rx_positions, dtype=float).reshape(-1, 2))
        if self.m < 1 or self.n < 1:
            raise ModelDomainError("A scene needs at least one transmitter and one receiver")
        if self.integration_time < self.signal_duration:
            raise ModelDomainError("Integration time is shorter than the signal duration")
        if not self.energy > 0:
            raise ModelDomainError(f"Energy must be positive, got {self.energy}")
        if self.l_t < 2:
            raise ModelDomainError(f"l_t must be >= 2, got {self.l_t}")
        if self.path_loss_eta < 0:
            raise ModelDomainError("path_loss_eta must be nonnegative")

    @property
    def m(self):
        return self.tx_positions.shape[0]

    @property
    def n(self):
        return self.rx_positions.shape[0]

    @property
    def time_step(self):
        return self.integration_time / self.l_t

    @property
    def times(self):
        # left Riemann points t_k = (k-1) T / L_t
        return self.integration_time * np.arange(self.l_t) / self.l_t

    @property
    def max_range(self):
        return self.speed_of_light * self.integration_time

    def with_energy(self, energy):
        return replace(self, energy=energy)


def default_scene(m, n, **kwargs):
    """Transmitters at [m, 0]', receivers at [0, n]' (Km), indices from 1."""
    tx = [[k, 0.0] for k in range(1, m + 1)]
    rx = [[0.0, k] for k in range(1, n + 1)]
    return RadarScene(tx_positions=tx, rx_positions=rx, **kwargs)


class RegionMode(Enum):
    ELLIPSE_UNION = "ellipse"
    DISC = "disc"


@dataclass(frozen=True, eq=False)
class SurveillanceRegion:
    mode: RegionMode
    max_range: float
    disc_radius: float
    cell_size: float
    grid: np.ndarray

    @property
    def n_points(self):
        return self.grid.shape[0]

    def contains(self, points, tx_positions, rx_positions):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.mode is RegionMode.DISC:
            return np.linalg.norm(points, axis=1) <= self.disc_radius
        to_tx = np.linalg.norm(points[:, None, :] - tx_positions[None, :, :], axis=2)
        to_rx = np.linalg.norm(points[:, None, :] - rx_positions[None, :, :], axis=2)
        path = to_tx.min(axis=1) + to_rx.min(axis=1)
        return path <= self.max_range


def build_region_grid(scene, mode=RegionMode.DISC, cell_size=CELL_SIZE,
                      disc_radius=DISC_RADIUS):
    """Origin-anchored square lattice restricted to the surveillance region.

    Disc mode keeps |theta| <= disc_radius. EllipseUnion keeps points whose
    shortest transmitter-target-receiver path does not exceed c T.
    """
    if not cell_size > 0:
        raise ModelDomainError(f"cell_size must be positive, got {cell_size}")
    mode = RegionMode(mode)
    if mode is RegionMode.DISC:
        extent = disc_radius
    else:
        antennas = np.vstack([scene.tx_positions, scene.rx_positions])
        extent = scene.max_range + np.abs(antennas).max()
    k = int(math.floor(extent / cell_size))
    axis = cell_size * np.arange(-k, k + 1)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    lattice = np.column_stack([xx.ravel(), yy.ravel()])

    region = SurveillanceRegion(mode=mode, max_range=scene.max_range, disc_radius=disc_radius,
                                cell_size=cell_size, grid=np.empty((0, 2)))
    inside = region.contains(lattice, scene.tx_positions, scene.rx_positions)
    if not inside.any():
        raise ModelDomainError("Surveillance grid is empty")
    region = replace(region, grid=lattice[inside])
    logger.info("%s region: %d grid points (cell %g Km)", mode.value, region.n_points, cell_size)
    return region


@dataclass(frozen=True, eq=False)
class TargetDraw:
    theta_o: np.ndarray
    g: np.ndarray  # (N, M) reflectivities


def complex_normal(rng, size, variance=1.0):
    """N_C(0, variance): independent real and imaginary parts of variance/2."""
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def draw_target(scene, region, rng):
    cell = int(rng.integers(region.n_points))
    offset = rng.uniform(-0.5, 0.5, size=2) * region.cell_size
    theta_o = region.grid[cell] + offset
    return TargetDraw(theta_o=theta_o, g=complex_normal(rng, (scene.n, scene.m)))


##############################################################################
# GEOMETRY AND WAVEFORMS
##############################################################################


def _distances(scene, points):
    """d_mn for every point, shape (P, N, M)."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    to_tx = np.sum((points[:, None, :] - scene.tx_positions[None, :, :]) ** 2, axis=2)
    to_rx = np.sum((points[:, None, :] - scene.rx_positions[None, :, :]) ** 2, axis=2)
    return np.sqrt(to_rx[:, :, None] + to_tx[:, None, :])


def aggregate_distance(scene, theta, m, n):
    theta = np.asarray(theta, dtype=float)
    return float(math.sqrt(np.sum((theta - scene.tx_positions[m]) ** 2)
                           + np.sum((theta - scene.rx_positions[n]) ** 2)))


def delay(scene, theta, m, n):
    return aggregate_distance(scene, theta, m, n) / scene.speed_of_light


def waveform(m, t, signal_duration=SIGNAL_DURATION):
    """s_m(t) = exp(j 2 pi m t / T_s) / sqrt(T_s) on [0, T_s), zero elsewhere."""
    t = np.asarray(t, dtype=float)
    inside = (t >= 0) & (t < signal_duration)
    value = np.exp(2j * np.pi * m * t / signal_duration) / math.sqrt(signal_duration)
    return np.where(inside, value, 0.0)


def steering_tensor(scene, points):
    """sqrt(E) s_m(t_k - tau_mn(theta)) / d_mn(theta)^eta, shape (P, N, L_t, M).

    Transmitter m (0-based) emits the waveform with frequency index m + 1.
    """
    d = _distances(scene, points)
    tau = d / scene.speed_of_light
    shifted = scene.times[None, None, :, None] - tau[:, :, None, :]
    freq = np.arange(1, scene.m + 1)
    s = waveform(freq[None, None, None, :], shifted, scene.signal_duration)
    gain = math.sqrt(scene.energy)
    if scene.path_loss_eta > 0:
        gain = gain / d[:, :, None, :] ** scene.path_loss_eta
    return gain * s


def steering_row(scene, n, t, theta):
    """Row S_n(t, theta) of the steering matrix for receiver n."""
    d = _distances(scene, theta)[0, n]
    tau = d / scene.speed_of_light
    freq = np.arange(1, scene.m + 1)
    row = math.sqrt(scene.energy) * waveform(freq, t - tau, scene.signal_duration)
    if scene.path_loss_eta > 0:
        row = row / d ** scene.path_loss_eta
    return row


##############################################################################
# MATCHED STATISTICS
##############################################################################


def _check_gram(q, points):
    herm = np.abs(q - np.conj(np.swapaxes(q, -1, -2))).max(axis=(-1, -2))
    scale = np.maximum(np.abs(q).max(axis=(-1, -2)), 1.0)
    if np.any(herm > HERMITIAN_TOLERANCE * scale):
        p = int(np.argwhere(herm > HERMITIAN_TOLERANCE * scale)[0][0])
        raise NumericalError(f"Q is not Hermitian at grid point {points[p].tolist()}")
    eig = np.linalg.eigvalsh(q).min(axis=-1)
    norms = np.linalg.norm(q, ord=2, axis=(-2, -1))
    if np.any(eig < -PSD_TOLERANCE * norms):
        p = int(np.argwhere(eig < -PSD_TOLERANCE * norms)[0][0])
        raise NumericalError(f"Q is not positive semidefinite at grid point {points[p].tolist()}")


def gram_from_steering(scene, steering):
    """(T / L_t) sum_k S(t_k) S(t_k)^H for every point and receiver."""
    return scene.time_step * np.einsum("pnki,pnkj->pnij", steering, np.conj(steering))


def compute_q(scene, theta_l):
    points = np.asarray(theta_l, dtype=float).reshape(-1, 2)
    q = gram_from_steering(scene, steering_tensor(scene, points))
    _check_gram(q, points)
    return q[0]


def compute_q_grid(scene, points):
    q = gram_from_steering(scene, steering_tensor(scene, points))
    _check_gram(q, np.asarray(points).reshape(-1, 2))
    return q


def synthesize_r(scene, steering, truth, rng, noise=True):
    """Correlator outputs R_n(theta_l) for every grid point, shape (P, N, M).

    One noise increment sequence per receiver is shared by all grid points.
    Under H1 the received increments carry the drift G_n^H S_n(t_k, theta_o) dt.
    """
    dt = scene.time_step
    increments = np.zeros((scene.n, scene.l_t), dtype=complex)
    if truth is not None:
        target = steering_tensor(scene, truth.theta_o)[0]
        increments += np.einsum("nm,nkm->nk", np.conj(truth.g), target) * dt
    if noise:
        increments += complex_normal(rng, (scene.n, scene.l_t), variance=dt)
    return np.einsum("pnkm,nk->pnm", steering, np.conj(increments))


def _log_clr_terms(q_plus_i, logdets, r, points=None):
    try:
        sol = np.linalg.solve(q_plus_i, r[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        where = "" if points is None else f" near grid point {np.asarray(points)[0].tolist()}"
        raise NumericalError(f"Linear solve failed{where}: {e}")
    quad = np.sum(np.conj(r) * sol, axis=-1)
    residual = np.abs(quad.imag)
    if np.any(residual > QUADRATIC_IMAG_TOLERANCE * np.maximum(1.0, np.abs(quad))):
        raise NumericalError(f"Quadratic form is not real (imaginary part {residual.max():.3g})")
    return np.sum(quad.real - logdets, axis=-1)


def log_clr_radar(q, r, theta=None):
    """sum_n [R_n^H (Q_n + I)^-1 R_n - ln|Q_n + I|].

    q has shape (..., N, M, M) and r (..., N, M); the receiver axis is summed.
    """
    q = np.asarray(q, dtype=complex)
    r = np.asarray(r, dtype=complex)
    a = q + np.eye(q.shape[-1])
    sign, logdets = np.linalg.slogdet(a)
    if np.any(sign.real <= 0):
        raise NumericalError(f"Q + I is not positive definite at {theta}")
    out = _log_clr_terms(a, logdets, r, None if theta is None else [theta])
    return float(out) if np.ndim(out) == 0 else out


##############################################################################
# ENERGY CALIBRATION
##############################################################################


def calibrate_energy(scene, snr_db, grid=None, reference=SNR_INTEGRATION):
    """Energy E giving the requested SNR.

    The integration reference averages received energy over the window T:
    SNR = E sum_n sum_m d_mn^-2eta / (N T) averaged over the grid, i.e.
    E = SNR T / M without path loss. The matched reference drops the window
    normalization (E = SNR without path loss).
    """
    snr = 10.0 ** (snr_db / 10.0)
    if scene.path_loss_eta == 0:
        gain = scene.n * scene.m
    else:
        if grid is None:
            grid = build_region_grid(scene).grid
        gain = float(np.mean(np.sum(_distances(scene, grid) ** (-2.0 * scene.path_loss_eta),
                                    axis=(1, 2))))
    if reference == SNR_INTEGRATION:
        return snr * scene.n * scene.integration_time / gain
    if reference == SNR_MATCHED:
        return snr * scene.n * scene.m / gain
    raise PreconditionError(f"Unknown SNR reference '{reference}'")


##############################################################################
# JOINT MODEL
##############################################################################


class RadarJointModel(JointModel):
    """Target presence and location on the region grid, MSE cost, uniform prior.

    Observations are the (L_s, N, M) arrays of correlator outputs.
    """

    cost_kind = CostKind.MSE

    def __init__(self, scene, region):
        self.scene = scene
        self.region = region
        points = region.grid
        self._prior = np.full(len(points), 1.0 / len(points))
        self.steering = steering_tensor(scene, points)
        self.q = gram_from_steering(scene, self.steering)
        _check_gram(self.q, points)
        self.q_plus_i = self.q + np.eye(scene.m)
        sign, self.logdets = np.linalg.slogdet(self.q_plus_i)
        if np.any(sign.real <= 0):
            raise NumericalError("Q + I is not positive definite on the grid")
        self.validate()
        logger.info("Radar model: M=%d N=%d L_s=%d E=%.6g", scene.m, scene.n,
                    len(points), scene.energy)

    @property
    def parameter_points(self):
        return self.region.grid

    @property
    def prior(self):
        return self._prior

    @property
    def energy(self):
        return self.scene.energy

    def cond_llrs(self, x):
        try:
            return _log_clr_terms(self.q_plus_i, self.logdets, x)
        except NumericalError:
            for p in range(len(self.region.grid)):
                log_clr_radar(self.q[p], x[p], theta=self.region.grid[p].tolist())
            raise

    def sample_h0(self, rng):
        return synthesize_r(self.scene, self.steering, None, rng)

    def sample_h1(self, rng):
        target = draw_target(self.scene, self.region, rng)
        return synthesize_r(self.scene, self.steering, target, rng), target.theta_o


def build_radar_model(m, n, snr_db=0.0, snr_reference=SNR_INTEGRATION, region="disc",
                      cell_size=CELL_SIZE, disc_radius=DISC_RADIUS, l_t=TIME_SAMPLES,
                      path_loss_eta=0.0):
    scene = default_scene(m, n, l_t=l_t, path_loss_eta=path_loss_eta)
    grid = build_region_grid(scene, RegionMode(region), cell_size, disc_radius)
    energy = calibrate_energy(scene, snr_db, grid.grid, snr_reference)
    return RadarJointModel(scene.with_energy(energy), grid)


def dump_q_rows(model):
    rows = []
    for p, point in enumerate(model.region.grid):
        for n in range(model.scene.n):
            for i in range(model.scene.m):
                for j in range(model.scene.m):
                    value = model.q[p, n, i, j]
                    rows.append({"grid_index": p, "x": format_real(point[0]),
                                 "y": format_real(point[1]), "receiver": n,
                                 "row": i, "col": j, "re": format_real(value.real),
                                 "im": format_real(value.imag)})
    return rows


##############################################################################
# ORACLES
##############################################################################


def girsanov_average(q, r, n_draws, rng, chunk=100000):
    """Monte-Carlo mean of exp(-G^H Q G + 2 Re(R^H G)) over G ~ N_C(0, I).

    Returns (mean, standard error); the mean estimates the likelihood ratio
    of a single receiver.
    """
    q = np.asarray(q, dtype=complex)
    r = np.asarray(r, dtype=complex)
    total, total_sq, done = 0.0, 0.0, 0
    while done < n_draws:
        size = min(chunk, n_draws - done)
        g = complex_normal(rng, (size, q.shape[0]))
        exponent = -np.einsum("bi,ij,bj->b", np.conj(g), q, g).real \
            + 2.0 * (g @ np.conj(r)).real
        values = np.exp(exponent)
        total += values.sum()
        total_sq += (values ** 2).sum()
        done += size
    mean = total / n_draws
    variance = max(total_sq / n_draws - mean ** 2, 0.0)
    return float(mean), float(math.sqrt(variance / n_draws))


def _real_block(q):
    return np.block([[q.real, -q.imag], [q.imag, q.real]])


def det_identity_check(q):
    """(ln|Q + I_M|, half of ln|Qbar + I_2M|) for Qbar the real block form."""
    q = np.asarray(q, dtype=complex)
    m = q.shape[0]
    _, complex_logdet = np.linalg.slogdet(q + np.eye(m))
    _, real_logdet = np.linalg.slogdet(_real_block(q) + np.eye(2 * m))
    return float(complex_logdet.real), 0.5 * float(real_logdet)


def quadratic_form_identity(q, r):
    """(R^H (Q + I)^-1 R, Rbar' (Qbar + I)^-1 Rbar) with Rbar = [Re R; Im R]."""
    q = np.asarray(q, dtype=complex)
    r = np.asarray(r, dtype=complex)
    m = q.shape[0]
    complex_form = np.vdot(r, np.linalg.solve(q + np.eye(m), r))
    r_bar = np.concatenate([r.real, r.imag])
    real_form = r_bar @ np.linalg.solve(_real_block(q) + np.eye(2 * m), r_bar)
    return complex(complex_form), float(real_form)


def random_psd(rng, m, scale=1.0):
    a = complex_normal(rng, (m, m))
    return scale * (a @ np.conj(a.T)) / m


##############################################################################
# TESTS
##############################################################################


def test_aggregate_distance_examples():
    scene = default_scene(2, 2)
    assert aggregate_distance(scene, scene.tx_positions[1], 1, 0) == \
        pytest.approx(np.linalg.norm(scene.tx_positions[1] - scene.rx_positions[0]))
    assert aggregate_distance(scene, [0.0, 0.0], 0, 0) == pytest.approx(math.sqrt(2))
    rng = np.random.default_rng(0)
    theta = rng.uniform(-50, 50, size=2)
    expected = math.hypot(np.linalg.norm(theta - scene.tx_positions[1]),
                          np.linalg.norm(theta - scene.rx_positions[1]))
    assert abs(aggregate_distance(scene, theta, 1, 1) - expected) <= 1e-12
    assert _distances(scene, theta)[0, 1, 1] == pytest.approx(expected, abs=1e-12)


def test_delay_examples():
    scene = RadarScene(tx_positions=[[0.0, 0.0]], rx_positions=[[0.0, 0.0]])
    assert delay(scene, [150.0 / math.sqrt(2), 0.0], 0, 0) == pytest.approx(5e-4)
    assert delay(scene, [0.0, 0.0], 0, 0) == 0.0
    assert delay(scene, [75.0 / math.sqrt(2), 0.0], 0, 0) == pytest.approx(2.5e-4)


def test_waveform_examples():
    ts = SIGNAL_DURATION
    assert waveform(1, 0.0, ts) == pytest.approx(1 / math.sqrt(ts))
    assert waveform(1, ts / 2, ts) == pytest.approx(-1 / math.sqrt(ts))
    assert waveform(2, ts, ts) == 0.0
    assert waveform(2, -1e-9, ts) == 0.0
    scene = default_scene(1, 1)
    energy = np.sum(np.abs(waveform(1, scene.times, ts)) ** 2) * scene.time_step
    assert energy == pytest.approx(1.0, abs=2e-3)


def test_steering_row_examples():
    scene = default_scene(3, 2, energy=4.0)
    theta = np.array([20.0, -10.0])
    t = scene.times[150]
    row = steering_row(scene, 1, t, theta)
    expected = [2.0 * waveform(m + 1, t - delay(scene, theta, m, 1)) for m in range(3)]
    np.testing.assert_allclose(row, expected, rtol=1e-12)
    assert np.abs(row).min() > 0
    early = steering_row(scene, 0, 0.0, theta)
    assert np.all(early == 0)

    lossy = default_scene(3, 2, path_loss_eta=1.0)
    row = steering_row(lossy, 0, 1.5e-4, theta)
    expected = [waveform(m + 1, 1.5e-4 - delay(lossy, theta, m, 0))
                / aggregate_distance(lossy, theta, m, 0) for m in range(3)]
    np.testing.assert_allclose(row, expected, rtol=1e-12)


def test_compute_q_orthogonal_waveforms():
    scene = RadarScene(tx_positions=[[0.0, 0.0]] * 3, rx_positions=[[0.0, 0.0]], energy=2.0)
    q = compute_q(scene, [0.0, 0.0])[0]
    np.testing.assert_allclose(np.diag(q).real, 2.0 * np.ones(3), atol=2e-3 * 2.0)
    off = q - np.diag(np.diag(q))
    assert np.abs(off).max() <= 2e-2 * 2.0


def test_compute_q_far_point_and_refinement():
    scene = default_scene(2, 2)
    np.testing.assert_array_equal(compute_q(scene, [1000.0, 0.0]), 0.0)
    fine = default_scene(2, 2, l_t=2 * TIME_SAMPLES)
    theta = np.array([30.0, 20.0])
    diff = np.abs(compute_q(scene, theta) - compute_q(fine, theta)).max()
    assert diff < 2e-2 * scene.energy


def test_region_grid_counts():
    scene = default_scene(2, 2)
    disc = build_region_grid(scene, RegionMode.DISC, 10.0, 75.0)
    assert disc.n_points == 177
    assert np.all(disc.contains(disc.grid, scene.tx_positions, scene.rx_positions))
    assert build_region_grid(scene, RegionMode.DISC, 150.0, 75.0).n_points < 10
    ellipse = build_region_grid(scene, RegionMode.ELLIPSE_UNION, 10.0)
    assert abs(ellipse.n_points - REFERENCE_GRID_POINTS) <= 0.1 * REFERENCE_GRID_POINTS
    assert np.all(ellipse.contains(ellipse.grid, scene.tx_positions, scene.rx_positions))
    with pytest.raises(ModelDomainError):
        build_region_grid(scene, RegionMode.DISC, 0.0)


def test_target_draw_stays_in_cells():
    scene = default_scene(2, 2)
    region = build_region_grid(scene)
    rng = np.random.default_rng(1)
    for _ in range(100):
        target = draw_target(scene, region, rng)
        nearest = np.abs(region.grid - target.theta_o).max(axis=1).min()
        assert nearest <= region.cell_size / 2
        assert target.g.shape == (2, 2)


def _small_model(m=2, n=1, energy=1.0, l_t=50, cell_size=30.0):
    scene = default_scene(m, n, l_t=l_t, energy=energy)
    return RadarJointModel(scene, build_region_grid(scene, RegionMode.DISC, cell_size))


def test_synthesize_r_noise_free_drift():
    model = _small_model(m=2, n=2)
    theta_o = model.region.grid[3]
    target = TargetDraw(theta_o=theta_o, g=complex_normal(np.random.default_rng(2), (2, 2)))
    r = synthesize_r(model.scene, model.steering, target, None, noise=False)
    expected = np.einsum("nij,nj->ni", model.q[3], target.g)
    np.testing.assert_allclose(r[3], expected, atol=1e-12)


def test_synthesize_r_h0_covariance_and_determinism():
    model = _small_model(m=2, n=1)
    rng = np.random.default_rng(3)
    draws = np.array([synthesize_r(model.scene, model.steering, None, rng)[0, 0]
                      for _ in range(10 ** 4)])
    q_diag = np.diag(model.q[0, 0]).real
    power = np.mean(np.abs(draws) ** 2, axis=0)
    assert np.all(np.abs(power - q_diag) <= 4 * q_diag / 100)
    assert np.all(np.abs(draws.mean(axis=0)) <= 4 * np.sqrt(q_diag / 10 ** 4))

    first = synthesize_r(model.scene, model.steering, None, np.random.default_rng(9))
    second = synthesize_r(model.scene, model.steering, None, np.random.default_rng(9))
    np.testing.assert_array_equal(first, second)


def test_log_clr_radar_examples():
    assert log_clr_radar(np.zeros((1, 2, 2)), np.zeros((1, 2))) == 0.0
    q, r = 0.7, 0.4 - 0.3j
    expected = abs(r) ** 2 / (1 + q) - math.log(1 + q)
    assert log_clr_radar([[[q]]], [[r]]) == pytest.approx(expected, abs=1e-14)


def test_log_clr_radar_matches_girsanov_average():
    rng = np.random.default_rng(4)
    q = random_psd(rng, 2, scale=0.5)
    r = complex_normal(rng, 2, variance=0.5)
    mean, se = girsanov_average(q, r, 200000, rng)
    exact = math.exp(log_clr_radar(q[None], r[None]))
    assert abs(mean - exact) <= 3 * se


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5, 6])
def test_determinant_and_quadratic_identities(m):
    rng = np.random.default_rng(10 + m)
    for _ in range(100):
        q = random_psd(rng, m)
        complex_logdet, real_logdet = det_identity_check(q)
        assert abs(complex_logdet - real_logdet) <= 1e-9 * max(1.0, abs(complex_logdet))
        complex_form, real_form = quadratic_form_identity(q, complex_normal(rng, m))
        assert abs(complex_form.imag) <= 1e-9 * max(1.0, abs(complex_form))
        assert abs(complex_form.real - real_form) <= 1e-9 * max(1.0, abs(real_form))


def test_determinant_identity_examples():
    assert det_identity_check(np.zeros((3, 3))) == (0.0, 0.0)
    complex_logdet, real_logdet = det_identity_check(np.eye(4))
    assert complex_logdet == pytest.approx(4 * math.log(2))
    assert real_logdet == pytest.approx(4 * math.log(2))


def test_calibrate_energy_examples():
    assert calibrate_energy(default_scene(2, 2), 0.0) == pytest.approx(2.5e-4)
    assert calibrate_energy(default_scene(3, 3), 10.0) == pytest.approx(10 * 5e-4 / 3)
    assert calibrate_energy(default_scene(2, 2), 0.0, reference=SNR_MATCHED) == 1.0
    scene = default_scene(2, 2)
    tiny = default_scene(2, 2, path_loss_eta=1e-6)
    grid = build_region_grid(scene).grid
    assert calibrate_energy(tiny, 0.0, grid) == \
        pytest.approx(calibrate_energy(scene, 0.0), rel=1e-2)


def test_h0_mean_log_lr_is_not_positive():
    model = _small_model(m=2, n=2)
    rng = np.random.default_rng(5)
    log_lrs = np.array([posterior_summary(model, model.sample_h0(rng), False).log_lr
                        for _ in range(10 ** 4)])
    se = log_lrs.std() / math.sqrt(log_lrs.size)
    assert log_lrs.mean() <= 3 * se


def test_high_snr_recovers_target_range():
    # antennas are nearly collocated, so only the range ring is resolvable
    scene = default_scene(2, 2, l_t=100, energy=1e3)
    model = RadarJointModel(scene, build_region_grid(scene, RegionMode.DISC, 10.0))
    rng = np.random.default_rng(6)
    range_errors, h1_log_lrs, h0_log_lrs = [], [], []
    for _ in range(50):
        x, theta_o = model.sample_h1(rng)
        s = posterior_summary(model, x)
        theta_map = model.region.grid[int(np.argmax(s.posterior_weights))]
        range_errors.append(abs(np.linalg.norm(theta_map) - np.linalg.norm(theta_o)))
        h1_log_lrs.append(s.log_lr)
        h0_log_lrs.append(posterior_summary(model, model.sample_h0(rng), False).log_lr)
    assert np.mean(range_errors) < model.region.cell_size
    assert np.mean(h1_log_lrs) > np.mean(h0_log_lrs) + 5.0


def test_dump_q_rows_shape():
    model = _small_model(m=2, n=1, cell_size=50.0)
    rows = dump_q_rows(model)
    assert len(rows) == model.region.n_points * 1 * 2 * 2
    assert set(rows[0]) == {"grid_index", "x", "y", "receiver", "row", "col", "re", "im"}
