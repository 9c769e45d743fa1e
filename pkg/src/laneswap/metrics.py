"""Safety, agility, and efficiency metrics over episode logs.

All quantities are recomputed from logged states and applied controls,
so metrics are a pure function of the log (and can be re-derived from a
CSV replay). Collision counting uses exact oriented rectangles and never
consults barrier values.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import VehicleParams
from .geometry import EllipseSpec, pair_rows, rectangles_overlap_any, CbfGains
from .log import EpisodeLog

MS_TO_MPH = 1.0 / 0.44704
J_PER_M_TO_WH_PER_KM = 1000.0 / 3600.0


@dataclass
class RunMetrics:
    seed: int
    avg_speed_ms: float
    avg_speed_mph: float
    brake_loss_wh_km: float
    min_h0: float
    min_h: float
    oob_max: float
    incomplete_ls: int
    n_changers: int
    max_delta_ac: float
    count_delta_ac_gt2: int
    collision_count: int
    mean_loop_ms: float
    max_loop_ms: float
    fallback_count: int
    timeout: bool

    def as_dict(self) -> dict:
        return asdict(self)


def pair_values(states: np.ndarray, src, dst, spec: EllipseSpec,
                wheelbase: float = 2.9) -> np.ndarray:
    """(T, P) barrier values for ordered pairs from logged states."""
    T = states.shape[0]
    out = np.empty((T, len(src)))
    gains = CbfGains()
    for ti in range(T):
        h, _, _, _, _ = pair_rows(states[ti, :, 0], states[ti, :, 1],
                                  states[ti, :, 2], states[ti, :, 3],
                                  src, dst, spec, gains, wheelbase)
        out[ti] = h
    return out


def count_collisions(states: np.ndarray, src, dst, params: VehicleParams) -> int:
    """Number of unordered pairs with any-tick body overlap."""
    half = src < dst
    s, d = src[half], dst[half]
    radius = math.hypot(params.body_length, params.body_width)  # conservative
    hit = set()
    for ti in range(states.shape[0]):
        x, y, th = states[ti, :, 0], states[ti, :, 1], states[ti, :, 2]
        close = (np.abs(x[s] - x[d]) < radius) & (np.abs(y[s] - y[d]) < radius)
        if not np.any(close):
            continue
        cs, cd = s[close], d[close]
        flags = rectangles_overlap_any(x, y, th, cs, cd, params)
        for i in np.flatnonzero(flags):
            hit.add((int(cs[i]), int(cd[i])))
    return len(hit)


def _corner_excursion(states: np.ndarray, params: VehicleParams,
                      y_low: float, y_high: float) -> float:
    hl, hw = params.body_length / 2.0, params.body_width / 2.0
    y = states[..., 1]
    th = states[..., 2]
    # max |corner lateral offset| over the four corners
    span = hl * np.abs(np.sin(th)) + hw * np.abs(np.cos(th))
    over = np.maximum(y + span - y_high, y_low - (y - span))
    return float(max(np.max(over), 0.0))


def compute_metrics(log: EpisodeLog, config) -> RunMetrics:
    """Evaluate one episode; config supplies geometry and reporting specs."""
    states = log.states
    controls = log.controls
    dt = float(np.median(np.diff(log.times))) if log.n_ticks > 1 else 0.1
    params = config.vehicle_params
    zone0, zone1 = config.zone_start, config.zone_start + config.zone_length
    finish = zone1

    x = states[:, :, 0]
    v = states[:, :, 3]
    in_zone = (x >= zone0) & (x <= zone1)
    avg_speed = float(np.mean(v[in_zone])) if np.any(in_zone) else float(np.mean(v))

    a = controls[:, :, 1]
    braking = np.maximum(0.0, -a) * v * in_zone
    energy = params.mass * float(np.sum(braking)) * dt     # J
    distance = float(np.sum(v * in_zone)) * dt             # m
    brake_loss = (energy / distance) * J_PER_M_TO_WH_PER_KM if distance > 0 else 0.0

    if log.pair_h0.size:
        min_h0 = float(np.min(log.pair_h0))
        min_h = float(np.min(log.pair_h))
    elif len(log.pair_src):
        min_h0 = float(np.min(pair_values(states, log.pair_src, log.pair_dst,
                                          config.reporting_ellipse, params.wheelbase)))
        min_h = float(np.min(pair_values(states, log.pair_src, log.pair_dst,
                                         config.control_ellipse, params.wheelbase)))
    else:
        min_h0 = min_h = math.inf

    oob = _corner_excursion(states, params, config.road_low, config.road_high)

    # lane-change completion, judged at the finish line by interpolation
    incomplete = 0
    changers = np.flatnonzero(log.changer)
    for k in changers:
        xk = x[:, k]
        past = np.flatnonzero(xk >= finish)
        if past.size == 0:
            incomplete += 1
            continue
        i = past[0]
        if i == 0:
            y_at = states[0, k, 1]
        else:
            frac = (finish - xk[i - 1]) / (xk[i] - xk[i - 1])
            y_at = states[i - 1, k, 1] + frac * (states[i, k, 1] - states[i - 1, k, 1])
        if abs(y_at - log.target_y[k]) > params.body_width / 2.0:
            incomplete += 1

    da = np.abs(np.diff(a, axis=0))
    max_delta = float(np.max(da)) if da.size else 0.0
    count_gt2 = int(np.sum(da > 2.0))

    collisions = count_collisions(states, log.pair_src, log.pair_dst, params)

    if log.loop_ms is not None and log.loop_ms.size:
        mean_loop = float(np.mean(log.loop_ms))
        max_loop = float(np.max(log.loop_ms))
    else:
        mean_loop = max_loop = math.nan
    fallbacks = sum(1 for _, _, tag in log.events if tag == "fallback")

    return RunMetrics(
        seed=int(log.config.get("seed", -1)),
        avg_speed_ms=avg_speed, avg_speed_mph=avg_speed * MS_TO_MPH,
        brake_loss_wh_km=brake_loss, min_h0=min_h0, min_h=min_h,
        oob_max=oob, incomplete_ls=incomplete, n_changers=int(len(changers)),
        max_delta_ac=max_delta, count_delta_ac_gt2=count_gt2,
        collision_count=collisions, mean_loop_ms=mean_loop,
        max_loop_ms=max_loop, fallback_count=fallbacks, timeout=log.timeout)


@dataclass
class Aggregate:
    label: str
    runs: int
    avg_speed_ms: float     # mean over runs
    avg_speed_mph: float
    brake_loss_wh_km: float  # mean
    min_h0: float            # min
    oob_max: float           # max
    incomplete_ls: int       # total
    max_delta_ac: float      # max
    mean_delta_ac_gt2: float  # mean count per run
    collisions: int          # total
    mean_loop_ms: float
    max_loop_ms: float

    def as_dict(self) -> dict:
        return asdict(self)


def aggregate(label: str, runs: list[RunMetrics]) -> Aggregate:
    loops = [r.mean_loop_ms for r in runs if not math.isnan(r.mean_loop_ms)]
    loops_max = [r.max_loop_ms for r in runs if not math.isnan(r.max_loop_ms)]
    return Aggregate(
        label=label, runs=len(runs),
        avg_speed_ms=float(np.mean([r.avg_speed_ms for r in runs])),
        avg_speed_mph=float(np.mean([r.avg_speed_mph for r in runs])),
        brake_loss_wh_km=float(np.mean([r.brake_loss_wh_km for r in runs])),
        min_h0=float(np.min([r.min_h0 for r in runs])),
        oob_max=float(np.max([r.oob_max for r in runs])),
        incomplete_ls=int(np.sum([r.incomplete_ls for r in runs])),
        max_delta_ac=float(np.max([r.max_delta_ac for r in runs])),
        mean_delta_ac_gt2=float(np.mean([r.count_delta_ac_gt2 for r in runs])),
        collisions=int(np.sum([r.collision_count for r in runs])),
        mean_loop_ms=float(np.mean(loops)) if loops else math.nan,
        max_loop_ms=float(np.max(loops_max)) if loops_max else math.nan)


_COLUMNS = [
    ("variant", "label", "s"), ("runs", "runs", "d"),
    ("speed [m/s]", "avg_speed_ms", ".1f"), ("speed [mph]", "avg_speed_mph", ".1f"),
    ("brake [Wh/km]", "brake_loss_wh_km", ".1f"), ("min h0 [m]", "min_h0", ".2f"),
    ("max OOB [m]", "oob_max", ".2f"), ("incomplete LS", "incomplete_ls", "d"),
    ("max dAc [m/s2]", "max_delta_ac", ".1f"), ("avg dAc>2 #", "mean_delta_ac_gt2", ".1f"),
    ("collisions", "collisions", "d"), ("loop mean [ms]", "mean_loop_ms", ".1f"),
    ("loop max [ms]", "max_loop_ms", ".1f"),
]


def render_table(rows: list[tuple[str, list[RunMetrics]]]):
    """Aligned-text and CSV summaries across variants.

    Aggregation: mean over runs for speed / brake loss / dAc>2 count,
    min over runs for min h0, max for OOB and max dAc, totals for
    incomplete lane swaps and collisions.
    """
    aggs = [aggregate(label, runs) for label, runs in rows]
    header = [c[0] for c in _COLUMNS]
    body = []
    for agg in aggs:
        d = agg.as_dict()
        line = []
        for _, key, fmt in _COLUMNS:
            val = d[key]
            line.append(f"{val:{fmt}}" if fmt != "s" else str(val))
        body.append(line)
    widths = [max(len(header[i]), *(len(b[i]) for b in body)) for i in range(len(header))]
    text_lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    for b in body:
        text_lines.append("  ".join(c.rjust(w) for c, w in zip(b, widths)))
    text = "\n".join(text_lines)
    csv_text = ",".join(header) + "\n" + "\n".join(",".join(b) for b in body) + "\n"
    return text, csv_text, [a.as_dict() for a in aggs]
