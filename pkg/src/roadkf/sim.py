"""Synthetic scenarios: road networks, drives along them and GNSS measurements.

Everything lives in one local East-North-Up frame.  Vehicles drive exact
center-lines, so the ground-truth segment of every epoch is known.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from roadkf.kalman import GnssEpoch
from roadkf.roadnet import RawRoad, build_graph, is_strongly_connected

NETWORK_KINDS = ("grid", "radial", "parallel")


@dataclass(frozen=True)
class ScenarioConfig:
    # network
    network: str = "grid"
    grid_blocks: int = 3  # blocks per side
    block: float = 100.0  # m
    jitter: float = 6.0  # m, intersection displacement
    arterial_every: int = 3  # every n-th grid line is an arterial
    oneway_fraction: float = 0.3  # share of residential streets made oneway
    frontage_fraction: float = 0.0  # share of arterial blocks with a service road
    frontage_offset: float = 12.0  # m
    radial_spokes: int = 8
    radial_rings: int = 3
    parallel_count: int = 2
    parallel_separation: float = 10.0  # m
    parallel_length: float = 500.0  # m
    # drive
    rate: float = 1.0  # Hz
    duration: float = 600.0  # s
    max_accel: float = 2.0  # m/s^2
    # satellites and measurements
    n_sats: int = 8
    elev_min: float = 15.0  # deg
    elev_max: float = 80.0  # deg
    sat_range: float = 2.2e7  # m
    sat_rotation: float = 2.0 * math.pi / 43082.0  # rad/s azimuth drift
    range_sigma: float = 5.0  # m
    rate_sigma: float = 0.1  # m/s
    p_mp: float = 0.3
    mp_bias_low: float = 5.0  # m
    mp_bias_high: float = 60.0  # m
    mp_dwell: float = 12.0  # s, mean length of a multipath episode
    canyon_fraction: float = 0.0  # share of time in dense-canyon stretches
    canyon_dwell: float = 30.0  # s, mean length of a canyon stretch
    canyon_mp: float = 0.8  # multipath probability inside a canyon
    canyon_mask: float = 0.0  # deg; satellites below this elevation are blocked in a canyon
    min_visible: int = 5  # blocking never leaves fewer satellites than this
    clock_bias0: float = 30.0  # m
    clock_drift0: float = 0.2  # m/s
    clock_bias_noise: float = 0.1  # m/sqrt(s)
    clock_drift_noise: float = 0.01  # m/s/sqrt(s)
    seed: int = 0

    def __post_init__(self):
        if self.network not in NETWORK_KINDS:
            raise ValueError(f"unknown network kind {self.network!r}")
        for name in ("block", "rate", "duration", "max_accel", "sat_range", "range_sigma", "rate_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("oneway_fraction", "frontage_fraction", "p_mp", "canyon_fraction", "canyon_mp"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_sats < 4 or self.min_visible < 4:
            raise ValueError("at least 4 satellites are needed")
        if self.canyon_fraction > 0 and self.canyon_outside_mp() < 0:
            raise ValueError("canyon_fraction * canyon_mp exceeds p_mp")
        if not self.mp_bias_low <= self.mp_bias_high:
            raise ValueError("mp_bias_low exceeds mp_bias_high")

    def canyon_outside_mp(self):
        """Multipath probability outside canyons that keeps the overall rate at p_mp."""
        f = self.canyon_fraction
        if f >= 1.0:
            return self.p_mp
        return (self.p_mp - f * self.canyon_mp) / (1.0 - f)

    def to_dict(self):
        return asdict(self)


def urban(**overrides):
    return ScenarioConfig(**{"range_sigma": 5.0, "p_mp": 0.3, **overrides})


def open_sky(**overrides):
    return ScenarioConfig(**{"range_sigma": 1.5, "p_mp": 0.0, **overrides})


PRESETS = {"urban": urban, "open-sky": open_sky}

# Attributes per road class: (road_type, lanes, max_speed m/s)
_ARTERIAL = ("primary", 2, 16.7)
_RESIDENTIAL = ("residential", 1, 11.1)
_SERVICE = ("service", 1, 6.9)


# networks ----------------------------------------------------------------


def _grid_roads(cfg, rng):
    n = cfg.grid_blocks
    pts = np.zeros((n + 1, n + 1, 2))
    for i in range(n + 1):
        for j in range(n + 1):
            pts[i, j] = (i * cfg.block, j * cfg.block)
    if cfg.jitter > 0:
        pts[1:-1, 1:-1] += rng.uniform(-cfg.jitter, cfg.jitter, (n - 1, n - 1, 2)) if n > 1 else 0.0

    roads = []
    lines = []
    for horizontal in (True, False):
        for line in range(n + 1):
            arterial = cfg.arterial_every > 0 and line % cfg.arterial_every == 0
            oneway = (not arterial) and rng.random() < cfg.oneway_fraction
            lines.append((horizontal, line, arterial, oneway))
    # alternate oneway directions among neighbouring streets
    flip = {True: False, False: False}
    for horizontal, line, arterial, oneway in lines:
        kind = _ARTERIAL if arterial else _RESIDENTIAL
        reverse = False
        if oneway:
            reverse = flip[horizontal]
            flip[horizontal] = not flip[horizontal]
        for k in range(n):
            if horizontal:
                a, b = pts[k, line], pts[k + 1, line]
            else:
                a, b = pts[line, k], pts[line, k + 1]
            if reverse:
                a, b = b, a
            roads.extend(_road_with_frontage(a, b, kind, oneway, arterial, cfg, rng))
    return roads


def _road_with_frontage(a, b, kind, oneway, arterial, cfg, rng):
    road_type, lanes, vmax = kind
    base = dict(road_type=road_type, lanes=lanes, max_speed=vmax, oneway=oneway)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    length = float(np.hypot(*(b - a)))
    if not (arterial and cfg.frontage_fraction > 0 and rng.random() < cfg.frontage_fraction):
        return [RawRoad(tuple(a), tuple(b), **base)]
    d = (b - a) / length
    nrm = np.array([-d[1], d[0]]) * (1.0 if rng.random() < 0.5 else -1.0)
    ramp_in, ramp_out = 0.1 * length, 0.25 * length
    q1, q2 = a + ramp_in * d, b - ramp_in * d
    p1 = a + ramp_out * d + cfg.frontage_offset * nrm
    p2 = b - ramp_out * d + cfg.frontage_offset * nrm
    st, sl, sv = _SERVICE
    service = dict(road_type=st, lanes=sl, max_speed=sv, oneway=False)
    return [
        RawRoad(tuple(a), tuple(q1), **base),
        RawRoad(tuple(q1), tuple(q2), **base),
        RawRoad(tuple(q2), tuple(b), **base),
        RawRoad(tuple(q1), tuple(p1), **service),
        RawRoad(tuple(p1), tuple(p2), **service),
        RawRoad(tuple(p2), tuple(q2), **service),
    ]


def _radial_roads(cfg, rng):
    roads = []
    spokes = cfg.radial_spokes
    angles = 2 * math.pi * np.arange(spokes) / spokes
    rings = [cfg.block * (k + 1) for k in range(cfg.radial_rings)]
    node = {}
    for s, ang in enumerate(angles):
        prev = (0.0, 0.0)
        for k, r in enumerate(rings):
            jit = rng.uniform(-cfg.jitter, cfg.jitter, 2) if cfg.jitter > 0 else np.zeros(2)
            p = (r * math.cos(ang) + jit[0], r * math.sin(ang) + jit[1])
            node[s, k] = p
            kind = _ARTERIAL if s % 2 == 0 else _RESIDENTIAL
            roads.append(RawRoad(prev, p, road_type=kind[0], lanes=kind[1], max_speed=kind[2]))
            prev = p
    for k in range(len(rings)):
        oneway = rng.random() < cfg.oneway_fraction
        for s in range(spokes):
            a, b = node[s, k], node[(s + 1) % spokes, k]
            roads.append(
                RawRoad(a, b, road_type="tertiary", lanes=1, max_speed=None, oneway=oneway)
            )
    return roads


def _parallel_roads(cfg, rng):
    roads = []
    for c in range(cfg.parallel_count):
        y = c * cfg.parallel_separation
        roads.append(
            RawRoad((0.0, y), (cfg.parallel_length, y), road_type="primary", lanes=2, max_speed=13.9)
        )
    return roads


def generate_roads(cfg):
    """Primal road list for ``cfg`` (deterministic in ``cfg.seed``)."""
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.network == "grid":
        for _ in range(100):
            roads = _grid_roads(cfg, rng)
            if is_strongly_connected(build_graph(roads)):
                return roads
        raise RuntimeError("could not draw a strongly connected grid")
    if cfg.network == "radial":
        for _ in range(100):
            roads = _radial_roads(cfg, rng)
            if is_strongly_connected(build_graph(roads)):
                return roads
        raise RuntimeError("could not draw a strongly connected radial network")
    return _parallel_roads(cfg, rng)


def generate_network(cfg):
    """Road network for ``cfg``, split into pieces of at most 25 m and in dual form."""
    return build_graph(generate_roads(cfg))


# trajectories ------------------------------------------------------------


def _key(p):
    return (round(float(p[0]), 6), round(float(p[1]), 6))


def _incidence(graph):
    inc = {}
    for i in range(graph.n):
        inc.setdefault(_key(graph.a[i]), []).append((i, 0))
        inc.setdefault(_key(graph.b[i]), []).append((i, 1))
    return inc


def _route(graph, length_needed, rng):
    """Random walk over legal moves; returns [(segment, forward)]."""
    inc = _incidence(graph)
    starts = [i for i in range(graph.n) if graph.successors[i].size > 0]
    seg = int(rng.choice(starts))
    forward = bool(graph.oneway[seg]) or rng.random() < 0.5
    route = [(seg, forward)]
    total = graph.length[seg]
    while total < length_needed:
        seg, forward = route[-1]
        exit_pt = graph.b[seg] if forward else graph.a[seg]
        options = []
        for j, end in inc.get(_key(exit_pt), []):
            if j == seg:
                continue
            if graph.oneway[j] and end != 0:
                continue
            options.append((j, end == 0))
        if not options:
            if graph.oneway[seg]:
                break  # dead end on a oneway: drive ends here
            options = [(seg, not forward)]  # U-turn
        j, fwd = options[int(rng.integers(len(options)))]
        route.append((j, fwd))
        total += graph.length[j]
    return route


def _turn_speed(delta):
    return 2.0 + 8.0 * math.cos(0.5 * delta) ** 2


@dataclass
class Trajectory:
    times: np.ndarray  # (T,)
    position: np.ndarray  # (T, 3)
    velocity: np.ndarray  # (T, 3)
    segment: np.ndarray  # (T,) int


def generate_trajectory(graph, cfg, seed):
    """Ground-truth drive along a random legal route, starting from rest."""
    rng = np.random.default_rng([cfg.seed, seed, 2])
    vmax_all = float(graph.max_speed.max())
    route = _route(graph, vmax_all * cfg.duration * 1.05 + 100.0, rng)
    ids = np.array([s for s, _ in route])
    fwd = np.array([f for _, f in route])
    p0 = np.where(fwd[:, None], graph.a[ids], graph.b[ids])
    p1 = np.where(fwd[:, None], graph.b[ids], graph.a[ids])
    lens = graph.length[ids]
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    dirs = (p1 - p0) / lens[:, None]

    # speed limits on a fine arclength grid, then forward/backward passes
    ds = 0.5
    s_grid = np.arange(0.0, cum[-1], ds)
    s_grid = np.append(s_grid, cum[-1])
    piece = np.clip(np.searchsorted(cum, s_grid, side="right") - 1, 0, len(ids) - 1)
    limit = graph.max_speed[ids][piece].copy()
    for k in range(1, len(ids)):
        cosang = float(np.clip(dirs[k - 1] @ dirs[k], -1.0, 1.0))
        delta = math.acos(cosang)
        if delta > math.radians(5):
            near = np.abs(s_grid - cum[k]) <= ds
            limit[near] = np.minimum(limit[near], _turn_speed(delta))
    v = limit.copy()
    v[0] = 0.0
    two_a_ds = 2.0 * cfg.max_accel * np.diff(s_grid)
    for i in range(len(v) - 1):
        v[i + 1] = min(v[i + 1], math.sqrt(v[i] ** 2 + two_a_ds[i]))
    v[-1] = 0.0
    for i in range(len(v) - 2, -1, -1):
        v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + two_a_ds[i]))
    dt = 2.0 * np.diff(s_grid) / np.maximum(v[:-1] + v[1:], 1e-9)
    t_grid = np.concatenate([[0.0], np.cumsum(dt)])

    step = 1.0 / cfg.rate
    n_epochs = min(int(round(cfg.duration * cfg.rate)), int(t_grid[-1] / step) + 1)
    times = np.arange(n_epochs) * step
    s = np.interp(times, t_grid, s_grid)
    speed = np.interp(times, t_grid, v)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(ids) - 1)
    frac = (s - cum[k]) / lens[k]
    pos2 = p0[k] + frac[:, None] * (p1[k] - p0[k])
    vel2 = speed[:, None] * dirs[k]
    position = np.column_stack([pos2, np.zeros(n_epochs)])
    velocity = np.column_stack([vel2, np.zeros(n_epochs)])
    return Trajectory(times, position, velocity, ids[k].astype(np.int64))


# measurements ------------------------------------------------------------


@dataclass
class InjectedErrors:
    noise: np.ndarray  # (T, S) Gaussian range noise
    multipath: np.ndarray  # (T, S) multipath bias
    rate_noise: np.ndarray  # (T, S)
    visible: np.ndarray  # (T, S) satellites present in each epoch


def _satellites(cfg, rng):
    elev = np.radians(rng.uniform(cfg.elev_min, cfg.elev_max, cfg.n_sats))
    az = rng.uniform(0.0, 2 * math.pi, cfg.n_sats)
    return elev, az


def satellite_positions(elev, az, t, cfg):
    """ENU satellite positions; azimuth (from North) advances slowly with time."""
    a = az + cfg.sat_rotation * t
    ce = np.cos(elev)
    return cfg.sat_range * np.column_stack([ce * np.sin(a), ce * np.cos(a), np.sin(elev)])


def _markov_rates(p, dwell, step):
    """Per-step (enter, leave) probabilities of an on/off chain with stationary p."""
    leave = min(1.0, step / dwell)
    if p >= 1.0:
        return 1.0, 0.0
    return min(1.0, p * leave / (1.0 - p)), leave


def _multipath(cfg, n_epochs, rng):
    """Per-satellite multipath bias: an on/off Markov chain per satellite.

    Returns the (T, S) bias and the per-epoch canyon flag.

    Each episode draws one bias and holds it.  With canyons enabled a shared
    environment chain switches the satellites between a high and a low
    multipath rate so that the overall rate stays p_mp.
    """
    s = cfg.n_sats
    out = np.zeros((n_epochs, s))
    in_canyon = np.zeros(n_epochs, dtype=bool)
    if cfg.p_mp <= 0.0:
        return out, in_canyon
    step = 1.0 / cfg.rate
    if cfg.canyon_fraction > 0:
        levels = (cfg.canyon_outside_mp(), cfg.canyon_mp)
        c_enter, c_leave = _markov_rates(cfg.canyon_fraction, cfg.canyon_dwell, step)
        canyon = rng.random() < cfg.canyon_fraction
    else:
        levels = (cfg.p_mp, cfg.p_mp)
        canyon = False
    rates = [_markov_rates(p, cfg.mp_dwell, step) for p in levels]
    on = rng.random(s) < levels[int(canyon)]
    bias = np.where(on, rng.uniform(cfg.mp_bias_low, cfg.mp_bias_high, s), 0.0)
    for t in range(n_epochs):
        if t > 0:
            if cfg.canyon_fraction > 0:
                u = rng.random()
                canyon = (u >= c_leave) if canyon else (u < c_enter)
            enter, leave = rates[int(canyon)]
            u = rng.random(s)
            start = ~on & (u < enter)
            stop = on & (u < leave)
            draw = rng.uniform(cfg.mp_bias_low, cfg.mp_bias_high, s)
            bias = np.where(start, draw, bias)
            on = (on & ~stop) | start
        out[t] = np.where(on, bias, 0.0)
        in_canyon[t] = canyon
    return out, in_canyon


def _visibility(cfg, elev, in_canyon):
    """Satellites in view per epoch; canyons block low satellites."""
    n = in_canyon.size
    vis = np.ones((n, cfg.n_sats), dtype=bool)
    if cfg.canyon_mask <= 0:
        return vis
    blocked = np.degrees(elev) < cfg.canyon_mask
    keep = np.argsort(-elev)[: cfg.min_visible]
    blocked[keep] = False
    vis[in_canyon] = ~blocked
    return vis


def generate_measurements(truth, cfg, seed):
    """Pseudoranges and rates along ``truth``.

    Returns ``(epochs, clock, errors)`` where clock is (T, 2) bias/drift.
    """
    rng = np.random.default_rng([cfg.seed, seed, 3])
    n = truth.times.size
    elev, az = _satellites(cfg, rng)
    step = 1.0 / cfg.rate
    clock = np.zeros((n, 2))
    b, d = cfg.clock_bias0, cfg.clock_drift0
    for t in range(n):
        if t > 0:
            b = b + d * step + cfg.clock_bias_noise * math.sqrt(step) * rng.standard_normal()
            d = d + cfg.clock_drift_noise * math.sqrt(step) * rng.standard_normal()
        clock[t] = b, d
    noise = cfg.range_sigma * rng.standard_normal((n, cfg.n_sats))
    rate_noise = cfg.rate_sigma * rng.standard_normal((n, cfg.n_sats))
    mp, in_canyon = _multipath(cfg, n, rng)
    vis = _visibility(cfg, elev, in_canyon)
    epochs = []
    for t in range(n):
        v = vis[t]
        sats = satellite_positions(elev, az, truth.times[t], cfg)[v]
        los = sats - truth.position[t]
        rng_t = np.linalg.norm(los, axis=1)
        u = los / rng_t[:, None]
        pr = rng_t + clock[t, 0] + noise[t, v] + mp[t, v]
        rr = -(u @ truth.velocity[t]) + clock[t, 1] + rate_noise[t, v]
        k = int(v.sum())
        epochs.append(
            GnssEpoch(
                time=float(truth.times[t]),
                sat_pos=sats,
                pseudorange=pr,
                pseudorange_rate=rr,
                range_sigma=np.full(k, cfg.range_sigma),
                rate_sigma=np.full(k, cfg.rate_sigma),
            )
        )
    return epochs, clock, InjectedErrors(noise, mp, rate_noise, vis)


@dataclass
class DriveRecord:
    """One simulated drive."""

    config: ScenarioConfig
    seed: int
    network: str  # reference to the network this drive uses
    times: np.ndarray  # (T,)
    truth: np.ndarray  # (T, 8) position, velocity, clock bias, clock drift
    segment: np.ndarray  # (T,) ground-truth segment ids
    epochs: list  # GnssEpoch per epoch
    errors: InjectedErrors = field(default=None, repr=False)

    def __len__(self):
        return self.times.size


def generate_drive(graph, cfg, seed, network="network"):
    traj = generate_trajectory(graph, cfg, seed)
    epochs, clock, errors = generate_measurements(traj, cfg, seed)
    truth = np.column_stack([traj.position, traj.velocity, clock])
    return DriveRecord(cfg, seed, network, traj.times, truth, traj.segment, epochs, errors)


def generate_drives(graph, cfg, count, seed, network="network"):
    return [generate_drive(graph, cfg, seed * 1000 + i, network) for i in range(count)]


def region_config(region, preset="urban", **overrides):
    """Scenario config for one benchmark region (a distinct jittered city grid)."""
    base = dict(
        network="grid",
        grid_blocks=6,
        block=110.0,
        jitter=8.0,
        arterial_every=3,
        oneway_fraction=0.4,
        frontage_fraction=0.6,
        canyon_fraction=0.3 if preset == "urban" else 0.0,
        canyon_mask=40.0 if preset == "urban" else 0.0,
        seed=100 + region,
    )
    base.update(overrides)
    return PRESETS[preset](**base)


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)
