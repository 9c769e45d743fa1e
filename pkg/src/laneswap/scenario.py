"""Interchange lane-swap world: spawning, perception, episode loop,
variants, and the Monte Carlo driver.

Two parallel lanes enter a fixed-length swap zone. Vehicles spawn
upstream at highway density, most intending to change lanes inside the
zone; each runs its own safety filter over broadcast state only. Variant
configs differ from a common base only in their tuning: the two
instability-driven tunings differ solely in cost-sensitivity
coefficients, and the guard-rail variant additionally swaps in arctan
rail boundaries for lane-changing egos.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baseline import DrivingIntent, pure_pursuit
from .dynamics import AgentState, ControlInput, VehicleParams, step
from .geometry import (CbfGains, CONTROL_ELLIPSE, EllipseSpec, Rail, pair_rows,
                       reporting_ellipse)
from .log import EpisodeLog, ordered_pair_indices
from .metrics import RunMetrics, compute_metrics
from .safety_filter import BsmMessage, FilterConfig, FilterState, filter_step
from . import stability

VARIANTS = ("ida-fast", "ida-slow", "vgr")


@dataclass(frozen=True)
class ScenarioConfig:
    n_vehicles: int = 16
    speed_min: float = 20.0
    speed_max: float = 25.0
    straight_fraction: float = 0.15
    zone_start: float = 0.0
    zone_length: float = 120.0
    lane_width: float = 3.5
    v2v_range: float = math.inf
    ctrl_period: float = 0.1
    bsm_period: float = 0.1
    variant: str = "ida-fast"
    nra_enabled: bool = False
    seed: int = 1
    margin: float = 50.0                 # settle distance past the finish line
    headway_mean: float = 3600.0 / 3500.0  # [s], lane flow 3500 veh/h
    headway_jitter: float = 0.25
    lead_gap: float = 10.0               # lead spawn distance before the zone
    t_max: float = 90.0
    kappa: float = 0.7
    tau: float = 0.1
    rail_steepness: float = 0.05         # arctan rail d3 [1/m]
    rail_center: float = 60.0            # rail midpoint, relative to zone start
    slack_weight_agent: float = 20000.0
    slack_weight_road: float = 1000.0
    soft: bool = True
    vehicle_params: VehicleParams = VehicleParams()
    gains: CbfGains = CbfGains()
    # Scenario barrier ellipse: semi-minor 1.9 m (tight lateral swaps), with
    # the major axis stretched so the steady car-following equilibrium
    # (center gap = semi-major) clears the 4.7 m body with margin; the
    # 2.2-ratio reading puts that equilibrium at 4.18 m, inside the body.
    control_ellipse: EllipseSpec = EllipseSpec(r=1.9, alpha=3.2)
    # Reporting ellipse for the h0 safety metric: the smaller nested
    # ellipse, so clean boundary-riding passes read small positive values.
    reporting_ellipse: EllipseSpec = EllipseSpec(r=1.9, alpha=2.2)
    # Fraction of the nominal eigenvalue targets realized by the variant
    # tunings; tempers the acceleration channel (see decisions ledger).
    instability_scale: float = 0.7
    # Upper bound on the random inter-column stagger, in mean-gap units.
    lane_stagger_max: float = 1.0
    # Each changer begins its maneuver within this many meters past the
    # zone entry (uniform draw), de-synchronizing the crossing wave.
    start_jitter: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def right_center(self) -> float:
        return 0.0

    @property
    def left_center(self) -> float:
        return self.lane_width

    @property
    def lane_centers(self) -> dict:
        return {"right": self.right_center, "left": self.left_center}

    @property
    def road_low(self) -> float:
        return self.right_center - self.lane_width / 2.0

    @property
    def road_high(self) -> float:
        return self.left_center + self.lane_width / 2.0

    @property
    def edge_inset(self) -> float:
        # rails bound the body center; inset them so corners stay on the road
        return self.vehicle_params.body_width / 2.0

    @property
    def rail_low(self) -> float:
        return self.road_low + self.edge_inset

    @property
    def rail_high(self) -> float:
        return self.road_high - self.edge_inset

    @property
    def finish_line(self) -> float:
        return self.zone_start + self.zone_length

    def as_dict(self) -> dict:
        return {
            "n_vehicles": self.n_vehicles, "speed_min": self.speed_min,
            "speed_max": self.speed_max, "straight_fraction": self.straight_fraction,
            "zone_start": self.zone_start, "zone_length": self.zone_length,
            "lane_width": self.lane_width,
            "v2v_range": self.v2v_range if math.isfinite(self.v2v_range) else "inf",
            "ctrl_period": self.ctrl_period, "bsm_period": self.bsm_period,
            "variant": self.variant, "nra_enabled": self.nra_enabled,
            "seed": self.seed, "margin": self.margin,
            "headway_mean": self.headway_mean, "headway_jitter": self.headway_jitter,
            "lead_gap": self.lead_gap, "t_max": self.t_max, "kappa": self.kappa,
            "tau": self.tau, "rail_steepness": self.rail_steepness,
            "rail_center": self.rail_center,
            "slack_weight_agent": self.slack_weight_agent,
            "slack_weight_road": self.slack_weight_road, "soft": self.soft,
            "wheelbase": self.vehicle_params.wheelbase,
            "body_length": self.vehicle_params.body_length,
            "body_width": self.vehicle_params.body_width,
            "mass": self.vehicle_params.mass,
            "lambda1": self.gains.lambda1, "lambda2": self.gains.lambda2,
            "ellipse_r": self.control_ellipse.r, "ellipse_alpha": self.control_ellipse.alpha,
            "reporting_r": self.reporting_ellipse.r,
            "reporting_alpha": self.reporting_ellipse.alpha,
            "instability_scale": self.instability_scale,
        }


def variant_targets(variant: str, scale: float) -> stability.InstabilityTargets:
    base = stability.FAST_TARGETS if variant != "ida-slow" else stability.SLOW_TARGETS
    return stability.InstabilityTargets(
        tuple((v, lam * scale) for v, lam in base.points), base.delta0)


def variant_coefficients(variant: str, cfg: ScenarioConfig) -> tuple:
    """Sensitivity coefficients for a variant, from eigenvalue targets.

    Calibrated against the implemented-loop eigenvalue relation so the
    running filter realizes the variant's divergence rates (times the
    configured instability_scale; the slow tuning is half the fast one,
    the rail tuning uses its own single much-milder target).
    """
    lw = cfg.vehicle_params.wheelbase
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", stability.CalibrationWarning)
        fast = stability.calibrate_sensitivity(
            variant_targets("ida-fast", cfg.instability_scale), cfg.kappa, lw,
            cfg.control_ellipse, relation="loop")
        if variant == "ida-fast":
            return fast
        if variant == "ida-slow":
            return stability.calibrate_sensitivity(
                variant_targets("ida-slow", cfg.instability_scale), cfg.kappa, lw,
                cfg.control_ellipse, relation="loop")
    v_rail, lam_rail = stability.RAIL_TARGET
    return stability.calibrate_rail_sensitivity(
        (v_rail, lam_rail * cfg.instability_scale), c0=fast[0], kappa=cfg.kappa,
        wheelbase=lw, spec=cfg.control_ellipse, relation="loop")


def filter_config(cfg: ScenarioConfig) -> FilterConfig:
    """Per-agent filter config; variants share everything but tuning."""
    return FilterConfig(
        gains=cfg.gains, ellipse=cfg.control_ellipse,
        sa_coeffs=variant_coefficients(cfg.variant, cfg),
        tau=max(cfg.tau, cfg.ctrl_period),
        slack_weight_agent=cfg.slack_weight_agent,
        slack_weight_road=cfg.slack_weight_road, soft=cfg.soft,
        wheelbase=cfg.vehicle_params.wheelbase,
        rail_left=Rail(d0=cfg.rail_high), rail_right=Rail(d0=cfg.rail_low))


def guard_rails(cfg: ScenarioConfig, spawn_lane: str) -> tuple[Rail, Rail]:
    """Arctan rails funneling a lane-changer into the opposite lane.

    Asymptotes: the source lane's outer edge upstream, the lane divider
    downstream (so the body must finish in the target lane). The
    unchanged side keeps the outer road edge.
    """
    d3 = cfg.rail_steepness
    d4 = cfg.zone_start + cfg.rail_center
    amp = cfg.lane_width / math.pi
    if spawn_lane == "right":      # forcing right -> left: raise the right rail
        rail_right = Rail(d0=cfg.road_low + cfg.lane_width / 2.0, d1=amp, d3=d3, d4=d4)
        return Rail(d0=cfg.road_high), rail_right
    rail_left = Rail(d0=cfg.road_high - cfg.lane_width / 2.0, d1=-amp, d3=d3, d4=d4)
    return rail_left, Rail(d0=cfg.road_low)


@dataclass
class Vehicle:
    vid: int
    state: AgentState
    intent: DrivingIntent
    spawn_lane: str
    nra: bool = False
    rails: tuple | None = None
    start_x: float = 0.0          # x past which the lane change begins
    fstate: FilterState = field(default_factory=FilterState)
    applied: ControlInput = ControlInput(0.0, 0.0)


@dataclass
class World:
    config: ScenarioConfig
    vehicles: list
    t: float = 0.0
    inbox: dict = field(default_factory=dict)     # ego id -> {sender: BsmMessage}

    def by_id(self, vid: int) -> Vehicle:
        return next(v for v in self.vehicles if v.vid == vid)


def spawn_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> World:
    """Place vehicles upstream of the zone at the configured flow density.

    Per lane, successive gaps are headway_mean x mean speed with uniform
    jitter; draws are re-jittered until every pairwise barrier value is
    positive and everyone sits inside the road. Desired speed equals the
    initial speed; each vehicle is independently marked straight-through.
    """
    n = cfg.n_vehicles
    n_right = (n + 1) // 2
    mean_speed = 0.5 * (cfg.speed_min + cfg.speed_max)
    gains = cfg.gains
    lanes = ["right"] * n_right + ["left"] * (n - n_right)
    lane_y = [cfg.lane_centers[ln] for ln in lanes]

    for _ in range(1000):
        speeds = rng.uniform(cfg.speed_min, cfg.speed_max, n)
        jit = rng.uniform(1.0 - cfg.headway_jitter, 1.0 + cfg.headway_jitter, n)
        straight = rng.random(n) < cfg.straight_fraction
        # independent random lead offsets keep the two columns staggered
        lead_off = rng.uniform(0.0, cfg.lane_stagger_max * cfg.headway_mean * mean_speed, 2)
        xs = np.empty(n)
        k = 0
        for lane_i, n_lane in enumerate((n_right, n - n_right)):
            x_here = cfg.zone_start - cfg.lead_gap - lead_off[lane_i]
            for i in range(n_lane):
                if i > 0:
                    x_here -= cfg.headway_mean * mean_speed * jit[k]
                xs[k] = x_here
                k += 1
        ys = np.array(lane_y)
        ths = np.zeros(n)
        src, dst = ordered_pair_indices(n)
        h, _, _, _, _ = pair_rows(xs, ys, ths, speeds, src, dst,
                                  cfg.control_ellipse, gains,
                                  cfg.vehicle_params.wheelbase)
        if np.all(h > 0) and np.all(ys > cfg.road_low) and np.all(ys < cfg.road_high):
            break
    else:
        raise RuntimeError("no feasible spawn found in 1000 attempts")

    starts = cfg.zone_start + rng.uniform(0.0, 1.0, n) * cfg.start_jitter
    vehicles = []
    for k in range(n):
        lane = lanes[k]
        target = lane if straight[k] else ("left" if lane == "right" else "right")
        intent = DrivingIntent(target_lane=target, change_lane=not straight[k],
                               desired_speed=float(speeds[k]))
        rails = None
        if cfg.variant == "vgr" and not straight[k]:
            rails = guard_rails(cfg, lane)
        vehicles.append(Vehicle(
            vid=k, state=AgentState(float(xs[k]), float(ys[k]), 0.0, float(speeds[k])),
            intent=intent, spawn_lane=lane, rails=rails, start_x=float(starts[k])))
    world = World(config=cfg, vehicles=vehicles,
                  inbox={v.vid: {} for v in vehicles})
    if cfg.nra_enabled:
        make_nra(world, rng)
    return world


def make_nra(world: World, rng: np.random.Generator) -> World:
    """Flag one uniformly random vehicle as non-responding: it keeps its
    own maneuver and road constraints but ignores every other agent
    (while still broadcasting)."""
    pick = int(rng.integers(0, len(world.vehicles)))
    world.vehicles[pick].nra = True
    return world


def broadcast(world: World):
    """Deliver fresh messages to every ego within range at broadcast time."""
    cfg = world.config
    t = world.t
    msgs = {}
    for v in world.vehicles:
        s = v.state
        msgs[v.vid] = BsmMessage(
            sender=v.vid, x=s.x, y=s.y, v=s.v, theta=s.theta,
            delta=v.applied.delta, a_c=v.applied.a_c,
            length=cfg.vehicle_params.body_length,
            width=cfg.vehicle_params.body_width, timestamp=t)
    for ego in world.vehicles:
        box = world.inbox[ego.vid]
        for other in world.vehicles:
            if other.vid == ego.vid:
                continue
            d = math.hypot(other.state.x - ego.state.x, other.state.y - ego.state.y)
            if d <= cfg.v2v_range:
                box[other.vid] = msgs[other.vid]
            else:
                box.pop(other.vid, None)


def perceive(world: World, ego_id: int) -> list:
    """Snapshot of the latest in-range messages (empty for a non-responder)."""
    ego = world.by_id(ego_id)
    if ego.nra:
        return []
    return [world.inbox[ego_id][k] for k in sorted(world.inbox[ego_id])]


def effective_intent(v: Vehicle, cfg: ScenarioConfig) -> DrivingIntent:
    # lane changes are mandatory inside the zone but start only at its entry
    if v.intent.change_lane and v.state.x < max(cfg.zone_start, v.start_x):
        return replace(v.intent, target_lane=v.spawn_lane)
    return v.intent


def run_episode(cfg: ScenarioConfig, rng=None, fcfg: FilterConfig | None = None):
    """Simulate one seeded episode; returns (EpisodeLog, RunMetrics)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if fcfg is None:
        fcfg = filter_config(cfg)
    world = spawn_scenario(cfg, rng)
    n = len(world.vehicles)
    params = cfg.vehicle_params
    dt = cfg.ctrl_period
    end_x = cfg.finish_line + cfg.margin
    src, dst = ordered_pair_indices(n)
    spec0 = cfg.reporting_ellipse

    times, states_l, controls_l, h_l, h0_l, bsm_l, loop_l = [], [], [], [], [], [], []
    events = []
    n_steps = int(round(cfg.bsm_period / dt)) if cfg.bsm_period >= dt else 1

    tick = 0
    timeout = False
    while True:
        if all(v.state.x > end_x for v in world.vehicles):
            break
        if world.t > cfg.t_max:
            timeout = True
            break
        if tick % max(1, n_steps) == 0 or (cfg.bsm_period < dt):
            broadcast(world)

        xs = np.array([v.state.x for v in world.vehicles])
        ys = np.array([v.state.y for v in world.vehicles])
        ths = np.array([v.state.theta for v in world.vehicles])
        vs = np.array([v.state.v for v in world.vehicles])
        h, _, _, _, _ = pair_rows(xs, ys, ths, vs, src, dst, cfg.control_ellipse,
                                  cfg.gains, params.wheelbase)
        h0, _, _, _, _ = pair_rows(xs, ys, ths, vs, src, dst, spec0,
                                   cfg.gains, params.wheelbase)

        new_controls = []
        loop_row = np.zeros(n)
        bsm_row = np.zeros(n, dtype=int)
        for k, veh in enumerate(world.vehicles):
            snapshot = perceive(world, veh.vid)
            bsm_row[k] = len(snapshot)
            u0 = pure_pursuit(veh.state, effective_intent(veh, cfg), params,
                              cfg.lane_centers, cfg.kappa)
            t0 = time.perf_counter()
            applied, veh.fstate, info = filter_step(
                veh.vid, veh.state, snapshot, u0, veh.fstate, fcfg, dt,
                now=world.t, ego_rails=veh.rails)
            loop_row[k] = (time.perf_counter() - t0) * 1e3
            if info["fallback"]:
                events.append((world.t, veh.vid, "fallback"))
            new_controls.append(applied)

        times.append(world.t)
        states_l.append([[v.state.x, v.state.y, v.state.theta, v.state.v]
                         for v in world.vehicles])
        controls_l.append([[u.delta, u.a_c] for u in new_controls])
        h_l.append(h)
        h0_l.append(h0)
        bsm_l.append(bsm_row)
        loop_l.append(loop_row)

        for veh, u in zip(world.vehicles, new_controls):
            veh.applied = u
            veh.state = step(veh.state, u, params, dt)
        world.t = round(world.t + dt, 9)
        tick += 1

    log = EpisodeLog(
        ids=np.array([v.vid for v in world.vehicles]),
        times=np.array(times), states=np.array(states_l),
        controls=np.array(controls_l), pair_src=src, pair_dst=dst,
        pair_h=np.array(h_l), pair_h0=np.array(h0_l),
        changer=np.array([v.intent.change_lane for v in world.vehicles]),
        nra=np.array([v.nra for v in world.vehicles]),
        target_y=np.array([cfg.lane_centers[v.intent.target_lane]
                           for v in world.vehicles]),
        desired_speed=np.array([v.intent.desired_speed for v in world.vehicles]),
        bsm_count=np.array(bsm_l), loop_ms=np.array(loop_l),
        events=events, timeout=timeout, config=cfg.as_dict())
    return log, compute_metrics(log, cfg)


def _mc_worker(args):
    cfg_dict_seed = args
    cfg, seed = cfg_dict_seed
    cfg = replace(cfg, seed=seed)
    _, metrics = run_episode(cfg)
    return metrics


def run_monte_carlo(cfg: ScenarioConfig, n_runs: int = 100, base_seed: int = 1,
                    jobs: int | None = None) -> list[RunMetrics]:
    """Seeded batch of episodes: seeds base_seed .. base_seed + n - 1.

    Identical seeds reproduce identical worlds across variants; results
    are returned in seed order regardless of scheduling.
    """
    seeds = [base_seed + i for i in range(n_runs)]
    tasks = [(cfg, s) for s in seeds]
    if jobs is not None and jobs > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_mc_worker, tasks, chunksize=2))
    else:
        results = [_mc_worker(t) for t in tasks]
    return results
