"""Eight-state GNSS Kalman filter with a road-network measurement update.

State layout: east, north, up [m], v_east, v_north, v_up [m/s],
clock bias [m], clock drift [m/s].
"""

from dataclasses import dataclass

import numpy as np

from roadkf.geo import rotation_to_road

N_STATE = 8
POS = slice(0, 3)
VEL = slice(3, 6)
BIAS = 6
DRIFT = 7

# Stand-in for an infinite road variance; keeps the 2x2 solve finite.
INF_VARIANCE = 1e12
# Road aiding starts once the horizontal position std falls below this (m).
AIDING_STD = 5.0

_I8 = np.eye(N_STATE)


class SingularInnovation(np.linalg.LinAlgError):
    """The road innovation covariance H P H^T + V cannot be inverted."""


class NoConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class KfEstimate:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def position(self):
        return self.mean[POS]

    @property
    def velocity(self):
        return self.mean[VEL]


@dataclass(frozen=True)
class GnssEpoch:
    """Corrected pseudoranges for one epoch.

    Pseudorange rates are already compensated for satellite motion, so the
    predicted rate is ``-u . v_user + drift``.
    """

    time: float
    sat_pos: np.ndarray
    pseudorange: np.ndarray
    pseudorange_rate: np.ndarray
    range_sigma: np.ndarray
    rate_sigma: np.ndarray

    @property
    def n_sats(self):
        return self.sat_pos.shape[0]


@dataclass(frozen=True)
class ProcessNoise:
    """White-acceleration and two-state clock spectral densities."""

    accel_h: float = 1.0  # m^2/s^3
    accel_v: float = 0.1  # m^2/s^3
    clock_bias: float = 1e-2  # m^2/s
    clock_drift: float = 1e-4  # m^2/s^3


@dataclass(frozen=True)
class RoadObservation:
    z: np.ndarray  # (2,) parallel, perpendicular [m]
    H: np.ndarray  # (2, 8)
    V: np.ndarray  # (2, 2)


def symmetrize(p):
    return 0.5 * (p + np.swapaxes(p, -1, -2))


def least_squares_fix(epoch, x0=None, tol=1e-4, max_iter=20):
    """Iterated weighted least squares on pseudoranges.

    Returns ``(position, clock_bias)``.
    """
    n = epoch.n_sats
    if n < 4:
        raise ValueError(f"need at least 4 satellites for a fix, got {n}")
    x = np.zeros(4) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    w = 1.0 / np.asarray(epoch.range_sigma, dtype=np.float64)
    for _ in range(max_iter):
        los = epoch.sat_pos - x[:3]
        rng = np.linalg.norm(los, axis=1)
        u = los / rng[:, None]
        g = np.hstack([-u, np.ones((n, 1))])
        resid = epoch.pseudorange - (rng + x[3])
        dx, *_ = np.linalg.lstsq(g * w[:, None], resid * w, rcond=None)
        x = x + dx
        if np.linalg.norm(dx[:3]) < tol:
            return x[:3].copy(), float(x[3])
    raise NoConvergence(f"least squares did not converge in {max_iter} iterations")


def ls_covariance(epoch, position):
    """Covariance of the weighted least-squares fix (position, bias)."""
    los = epoch.sat_pos - position
    u = los / np.linalg.norm(los, axis=1)[:, None]
    g = np.hstack([-u, np.ones((epoch.n_sats, 1))])
    w = 1.0 / np.asarray(epoch.range_sigma) ** 2
    return np.linalg.inv(g.T @ (g * w[:, None]))


def ls_velocity(epoch, position):
    """Velocity and clock drift from pseudorange rates at a known position."""
    los = epoch.sat_pos - position
    u = los / np.linalg.norm(los, axis=1)[:, None]
    g = np.hstack([-u, np.ones((epoch.n_sats, 1))])
    w = 1.0 / np.asarray(epoch.rate_sigma)
    sol, *_ = np.linalg.lstsq(g * w[:, None], epoch.pseudorange_rate * w, rcond=None)
    return sol[:3], float(sol[3])


def initialize(epoch, vel_sigma=None):
    """Filter state from single-epoch least squares."""
    pos, bias = least_squares_fix(epoch)
    vel, drift = ls_velocity(epoch, pos)
    mean = np.concatenate([pos, vel, [bias, drift]])
    cov = np.zeros((N_STATE, N_STATE))
    pc = ls_covariance(epoch, pos)
    idx = [0, 1, 2, BIAS]
    cov[np.ix_(idx, idx)] = pc
    los = epoch.sat_pos - pos
    u = los / np.linalg.norm(los, axis=1)[:, None]
    g = np.hstack([-u, np.ones((epoch.n_sats, 1))])
    wv = 1.0 / np.asarray(epoch.rate_sigma) ** 2
    vc = np.linalg.inv(g.T @ (g * wv[:, None]))
    if vel_sigma is not None:
        vc = vc + np.diag([vel_sigma**2] * 3 + [0.0])
    vidx = [3, 4, 5, DRIFT]
    cov[np.ix_(vidx, vidx)] = vc
    return KfEstimate(mean, symmetrize(cov))


def transition(dt, q=ProcessNoise()):
    f = np.eye(N_STATE)
    f[0, 3] = f[1, 4] = f[2, 5] = dt
    f[BIAS, DRIFT] = dt
    qm = np.zeros((N_STATE, N_STATE))
    for axis, s in ((0, q.accel_h), (1, q.accel_h), (2, q.accel_v)):
        qm[axis, axis] = s * dt**3 / 3.0
        qm[axis, axis + 3] = qm[axis + 3, axis] = s * dt**2 / 2.0
        qm[axis + 3, axis + 3] = s * dt
    qm[BIAS, BIAS] = q.clock_bias * dt + q.clock_drift * dt**3 / 3.0
    qm[BIAS, DRIFT] = qm[DRIFT, BIAS] = q.clock_drift * dt**2 / 2.0
    qm[DRIFT, DRIFT] = q.clock_drift * dt
    return f, qm


def predict(est, dt, q=ProcessNoise()):
    """Nearly-constant-velocity prediction."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    f, qm = transition(dt, q)
    return KfEstimate(f @ est.mean, symmetrize(f @ est.cov @ f.T + qm))


def gnss_model(mean, epoch):
    """Predicted measurements and Jacobian for ranges stacked over rates."""
    n = epoch.n_sats
    los = epoch.sat_pos - mean[POS]
    rng = np.linalg.norm(los, axis=1)
    u = los / rng[:, None]
    h = np.zeros((2 * n, N_STATE))
    h[:n, POS] = -u
    h[:n, BIAS] = 1.0
    h[n:, VEL] = -u
    h[n:, DRIFT] = 1.0
    pred = np.concatenate([rng + mean[BIAS], -(u @ mean[VEL]) + mean[DRIFT]])
    meas = np.concatenate([epoch.pseudorange, epoch.pseudorange_rate])
    r = np.concatenate([np.asarray(epoch.range_sigma) ** 2, np.asarray(epoch.rate_sigma) ** 2])
    return meas - pred, h, r


def gnss_update(est, epoch):
    """Linearized pseudorange and pseudorange-rate update (Joseph form)."""
    y, h, r = gnss_model(est.mean, epoch)
    p = est.cov
    s = h @ p @ h.T + np.diag(r)
    k = np.linalg.solve(s, h @ p).T
    mean = est.mean + k @ y
    ikh = _I8 - k @ h
    cov = ikh @ p @ ikh.T + (k * r) @ k.T
    return KfEstimate(mean, symmetrize(cov))


def road_frame(heading):
    """Observation matrix H = H_rot H_select for a road with this heading."""
    h = np.zeros((2, N_STATE))
    h[:, :2] = rotation_to_road(heading)
    return h


def soft_threshold(value, half_length):
    return np.sign(value) * np.maximum(np.abs(value) - half_length, 0.0)


def road_residual(pos, midpoint, heading, length):
    """Road-frame offset from the user to the closest point on the segment.

    Parallel offset to the road center is soft-thresholded by half the
    segment length; the perpendicular offset is kept as is.
    """
    rot = rotation_to_road(heading)
    rel = rot @ (np.asarray(midpoint)[:2] - np.asarray(pos)[:2])
    return np.array([soft_threshold(rel[0], 0.5 * length), rel[1]])


def road_residuals(pos, midpoint, heading, length):
    """Vectorized ``road_residual``: positions (..., 2) against segments (..., )."""
    pos = np.asarray(pos)[..., :2]
    d = np.asarray(midpoint)[..., :2] - pos
    c, s = np.cos(heading), np.sin(heading)
    par = c * d[..., 0] + s * d[..., 1]
    perp = -s * d[..., 0] + c * d[..., 1]
    return np.stack([soft_threshold(par, 0.5 * np.asarray(length)), perp], axis=-1)


def build_road_observation(est, segment, sigma_par2, sigma_perp2):
    """Gaussian road observation around the selected segment.

    ``segment`` may be a ``geo.Segment`` or ``roadnet.RoadSegment``.
    """
    if sigma_par2 < 0 or sigma_perp2 < 0:
        raise ValueError("road variances must be non-negative")
    geom = getattr(segment, "geometry", segment)
    h = road_frame(geom.heading)
    resid = road_residual(est.mean[POS], geom.midpoint, geom.heading, geom.length)
    z = h @ est.mean + resid
    return RoadObservation(z=z, H=h, V=np.diag([float(sigma_par2), float(sigma_perp2)]))


def _check_innovation(s):
    det = s[..., 0, 0] * s[..., 1, 1] - s[..., 0, 1] * s[..., 1, 0]
    scale = np.maximum(np.abs(s[..., 0, 0]) * np.abs(s[..., 1, 1]), 1e-300)
    if np.any(~(np.abs(det) > 1e-14 * scale)) or np.any(~np.isfinite(det)):
        raise SingularInnovation("road innovation covariance is singular")


def road_update(est, obs):
    """Road-network measurement update.

    K = P H^T (H P H^T + V)^-1, x+ = x + K (z - H x), P+ = P - K H P.
    The covariance is computed in Joseph form, which equals P - K H P in
    exact arithmetic and stays symmetric in floating point.
    """
    p = est.cov
    h = obs.H
    s = h @ p @ h.T + obs.V
    _check_innovation(s)
    k = np.linalg.solve(s, h @ p).T
    mean = est.mean + k @ (obs.z - h @ est.mean)
    ikh = _I8 - k @ h
    cov = ikh @ p @ ikh.T + k @ obs.V @ k.T
    return KfEstimate(mean, symmetrize(cov))


# Batched variants: leading axis indexes independent filters.


def predict_batch(mean, cov, dt, q=ProcessNoise()):
    f, qm = transition(dt, q)
    return mean @ f.T, symmetrize(f @ cov @ f.T + qm)


def gnss_update_batch(mean, cov, epoch):
    n = epoch.n_sats
    c = mean.shape[0]
    los = epoch.sat_pos[None, :, :] - mean[:, None, POS]
    rng = np.sqrt(np.sum(los * los, axis=2))
    u = los / rng[:, :, None]
    h = np.zeros((c, 2 * n, N_STATE))
    h[:, :n, POS] = -u
    h[:, :n, BIAS] = 1.0
    h[:, n:, VEL] = -u
    h[:, n:, DRIFT] = 1.0
    pred = np.concatenate(
        [rng + mean[:, BIAS, None], -np.einsum("cij,cj->ci", u, mean[:, VEL]) + mean[:, DRIFT, None]],
        axis=1,
    )
    meas = np.concatenate([epoch.pseudorange, epoch.pseudorange_rate])
    r = np.concatenate([np.asarray(epoch.range_sigma) ** 2, np.asarray(epoch.rate_sigma) ** 2])
    y = meas[None, :] - pred
    hp = h @ cov
    s = hp @ np.swapaxes(h, 1, 2) + np.diag(r)[None]
    k = np.swapaxes(np.linalg.solve(s, hp), 1, 2)
    mean = mean + np.einsum("cij,cj->ci", k, y)
    ikh = _I8[None] - k @ h
    cov = ikh @ cov @ np.swapaxes(ikh, 1, 2) + (k * r[None, None, :]) @ np.swapaxes(k, 1, 2)
    return mean, symmetrize(cov)


def road_update_batch(mean, cov, h, resid, v):
    """Batched road update; ``resid`` is z - H x, ``v`` is (C, 2) variances."""
    hp = h @ cov
    s = hp @ np.swapaxes(h, 1, 2)
    s[:, 0, 0] += v[:, 0]
    s[:, 1, 1] += v[:, 1]
    _check_innovation(s)
    k = np.swapaxes(np.linalg.solve(s, hp), 1, 2)
    mean = mean + np.einsum("cij,cj->ci", k, resid)
    ikh = _I8[None] - k @ h
    kv = k * v[:, None, :]
    cov = ikh @ cov @ np.swapaxes(ikh, 1, 2) + kv @ np.swapaxes(k, 1, 2)
    return mean, symmetrize(cov)


def converged(cov, max_std=AIDING_STD):
    """True when the horizontal position std sqrt(P_ee + P_nn) is at most ``max_std``."""
    cov = np.asarray(cov)
    return bool(np.sqrt(cov[0, 0] + cov[1, 1]) <= max_std)


def horizontal_error(mean, truth):
    d = np.asarray(mean)[..., :2] - np.asarray(truth)[..., :2]
    return np.hypot(d[..., 0], d[..., 1])


def rts_smooth(filtered, predicted, transitions):
    """Rauch-Tung-Striebel smoother.

    ``filtered[t]`` and ``predicted[t]`` are KfEstimates after and before the
    measurement update of epoch t; ``transitions[t]`` is the matrix F that
    propagated epoch t-1 to t (ignored for t = 0).  Returns smoothed
    KfEstimates.
    """
    n = len(filtered)
    out = [None] * n
    out[-1] = filtered[-1]
    for t in range(n - 2, -1, -1):
        f, nxt = filtered[t], predicted[t + 1]
        gain = np.linalg.solve(nxt.cov, transitions[t + 1] @ f.cov).T
        mean = f.mean + gain @ (out[t + 1].mean - nxt.mean)
        cov = f.cov + gain @ (out[t + 1].cov - nxt.cov) @ gain.T
        out[t] = KfEstimate(mean, symmetrize(cov))
    return out
