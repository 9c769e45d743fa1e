"""Per-agent cooperative safety filter.

Each agent solves, every control period, a quasi-centralized QP over its
own control and hypothetical controls for every perceived neighbor,
subject to all pairwise and road barrier constraints it can evaluate
from broadcast state. It applies only its own component. Disagreement
between what it computed for a neighbor and what that neighbor actually
did (observed through the next broadcast) is low-pass filtered into a
per-neighbor disturbance estimate w that shifts the constraint terms,
closing the predictor-corrector loop that lets the group converge on a
joint maneuver without sharing intent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from .dynamics import AgentState, ControlBox, ControlInput, EGO_BOX, clamp_control
from .geometry import CbfGains, CONTROL_ELLIPSE, EllipseSpec, Rail, pair_rows, road_rows
from . import qp

# s_a(v) = 1 / max(c0 + c2 v^2 + c3 v^3, floor); the floor keeps the QP
# strictly convex at speeds below the calibrated operating range, where
# the fitted cubic may cross zero.
SA_FLOOR = 1e-6

OTHER_BOX_FACTOR = 1.8


@dataclass(frozen=True)
class BsmMessage:
    """Broadcast safety message: the only inter-agent interface.

    Carries pose, speed, actuator state and body size; never intent.
    """

    sender: int
    x: float
    y: float
    v: float
    theta: float
    delta: float
    a_c: float
    length: float
    width: float
    timestamp: float

    def state(self) -> AgentState:
        return AgentState(self.x, self.y, self.theta, self.v)


@dataclass(frozen=True)
class FilterConfig:
    gains: CbfGains = CbfGains()
    ellipse: EllipseSpec = CONTROL_ELLIPSE
    sa_coeffs: tuple = (1.0, 0.0, 0.0)      # (c0, c2, c3)
    tau: float = 0.1                        # w-filter time constant [s]
    ego_box: ControlBox = EGO_BOX
    other_box: ControlBox = EGO_BOX.scaled(OTHER_BOX_FACTOR)
    slack_weight_agent: float = 20000.0
    slack_weight_road: float = 1000.0     # soft lane-forcing guard rails
    slack_weight_edge: float = 20000.0    # physical outer road edges
    soft: bool = True
    wheelbase: float = 2.9
    rail_left: Rail = Rail(d0=5.25)
    rail_right: Rail = Rail(d0=-1.75)
    stale_limit: float = 1.0                # hold last action this long [s]


@dataclass
class FilterState:
    """Per-ego mutable filter memory, keyed by perceived agent id."""

    w: dict = field(default_factory=dict)              # id -> (2,) estimate
    last_solution: dict = field(default_factory=dict)  # id -> (2,) local copy
    last_active_set: tuple = ()


def sensitivity(v: float, coeffs) -> float:
    """Speed-dependent weight of acceleration vs steering in the QP cost."""
    c0, c2, c3 = coeffs
    return 1.0 / max(c0 + c2 * v * v + c3 * v ** 3, SA_FLOOR)


def feasible_fallback(v: float, lambda1: float, w=(0.0, 0.0)) -> ControlInput:
    """Always-feasible action: no steering, brake proportionally to speed,
    cancel the disturbance estimate. Box limits are not accounted for."""
    return ControlInput(-w[0], -lambda1 * v - w[1])


_PAIR_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _ordered_pairs(n: int):
    cached = _PAIR_CACHE.get(n)
    if cached is None:
        src, dst = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        keep = src != dst
        cached = (src[keep].astype(np.intp), dst[keep].astype(np.intp))
        _PAIR_CACHE[n] = cached
    return cached


def build_qp(ego_id: int, own_state: AgentState, messages, baseline: ControlInput,
             fstate: FilterState, config: FilterConfig,
             ego_rails: tuple[Rail, Rail] | None = None):
    """Assemble the quasi-centralized QP for one agent.

    Decision vector: (delta, a_c) for every perceived agent (ego included,
    sorted by id) followed by one slack per soft constraint row. Returns
    (problem, ids, row_pairs) with ids in decision-vector order.
    """
    msgs = sorted(messages, key=lambda mm: mm.sender)
    ids = sorted([ego_id] + [mm.sender for mm in msgs])
    n_agents = len(ids)
    pos = {a: k for k, a in enumerate(ids)}
    e = pos[ego_id]

    x = np.empty(n_agents)
    y = np.empty(n_agents)
    th = np.empty(n_agents)
    v = np.empty(n_agents)
    x[e], y[e], th[e], v[e] = own_state.x, own_state.y, own_state.theta, own_state.v
    for mm in msgs:
        k = pos[mm.sender]
        x[k], y[k], th[k], v[k] = mm.x, mm.y, mm.theta, mm.v

    w_arr = np.zeros((n_agents, 2))
    for a, val in fstate.w.items():
        if a in pos and a != ego_id:
            w_arr[pos[a]] = val

    gains = config.gains
    lw = config.wheelbase
    n_u = 2 * n_agents

    # inter-agent rows, one per ordered pair
    if n_agents > 1:
        src, dst = _ordered_pairs(n_agents)
        _, _, a_pair, b_src, b_dst = pair_rows(
            x, y, th, v, src, dst, config.ellipse, gains, lw)
        const_pair = (a_pair
                      + np.einsum("ij,ij->i", b_src, w_arr[src])
                      + np.einsum("ij,ij->i", b_dst, w_arr[dst]))
        n_pair = len(src)
    else:
        src = dst = np.zeros(0, dtype=np.intp)
        a_pair = const_pair = np.zeros(0)
        b_src = b_dst = np.zeros((0, 2))
        n_pair = 0

    # road rows, right then left per agent; the ego may carry guard rails
    rail_l, rail_r = config.rail_left, config.rail_right
    rb_l = rail_l.value(x)
    rb_lp = rail_l.slope(x)
    rb_lpp = rail_l.curvature(x)
    rb_r = rail_r.value(x)
    rb_rp = rail_r.slope(x)
    rb_rpp = rail_r.curvature(x)
    if ego_rails is not None:
        el, er = ego_rails
        rb_l[e], rb_lp[e], rb_lpp[e] = el.value(x[e]), el.slope(x[e]), el.curvature(x[e])
        rb_r[e], rb_rp[e], rb_rpp[e] = er.value(x[e]), er.slope(x[e]), er.curvature(x[e])

    ct, st = np.cos(th), np.sin(th)
    v2lw = v * v / lw
    # right: h = y - rb_r;  left: h = rb_l - y
    a_right = (-rb_rpp * v * v * ct * ct
               + gains.l1 * (v * st - rb_rp * v * ct)
               + gains.l0 * (y - rb_r))
    b_right = np.stack([v2lw * (ct + rb_rp * st), st - rb_rp * ct], axis=-1)
    a_left = (rb_lpp * v * v * ct * ct
              + gains.l1 * (rb_lp * v * ct - v * st)
              + gains.l0 * (rb_l - y))
    b_left = -np.stack([v2lw * (ct + rb_lp * st), st - rb_lp * ct], axis=-1)
    const_right = a_right + np.einsum("ij,ij->i", b_right, w_arr)
    const_left = a_left + np.einsum("ij,ij->i", b_left, w_arr)

    n_road = 2 * n_agents
    n_rows = n_pair + n_road
    n_slack = n_rows if config.soft else 0
    n_vars = n_u + n_slack

    # sparse constraint matrix, row-by-row CSR blocks
    per_pair = 5 if config.soft else 4
    per_road = 3 if config.soft else 2
    data = np.empty(n_pair * per_pair + n_road * per_road)
    indices = np.empty_like(data, dtype=np.int32)
    indptr = np.empty(n_rows + 1, dtype=np.int32)
    indptr[:n_pair + 1] = np.arange(n_pair + 1) * per_pair
    indptr[n_pair + 1:] = n_pair * per_pair + np.arange(1, n_road + 1) * per_road

    if n_pair:
        dpair = data[:n_pair * per_pair].reshape(n_pair, per_pair)
        ipair = indices[:n_pair * per_pair].reshape(n_pair, per_pair)
        dpair[:, 0:2] = b_src
        dpair[:, 2:4] = b_dst
        ipair[:, 0] = 2 * src
        ipair[:, 1] = 2 * src + 1
        ipair[:, 2] = 2 * dst
        ipair[:, 3] = 2 * dst + 1
        if config.soft:
            dpair[:, 4] = 1.0
            ipair[:, 4] = n_u + np.arange(n_pair)
    droad = data[n_pair * per_pair:].reshape(n_road, per_road)
    iroad = indices[n_pair * per_pair:].reshape(n_road, per_road)
    agent_cols = np.arange(n_agents)
    droad[0::2, 0:2] = b_right
    droad[1::2, 0:2] = b_left
    iroad[0::2, 0] = 2 * agent_cols
    iroad[0::2, 1] = 2 * agent_cols + 1
    iroad[1::2, 0] = 2 * agent_cols
    iroad[1::2, 1] = 2 * agent_cols + 1
    if config.soft:
        droad[:, 2] = 1.0
        iroad[:, 2] = n_u + n_pair + np.arange(n_road)

    A = sparse.csr_matrix((data, indices, indptr), shape=(n_rows, n_vars))
    b_vec = np.empty(n_rows)
    b_vec[:n_pair] = const_pair
    b_vec[n_pair::2] = const_right
    b_vec[n_pair + 1::2] = const_left

    # diagonal cost: steering weight 1, acceleration weight s_a(speed)
    hdiag = np.empty(n_vars)
    sa = np.array([sensitivity(v[k], config.sa_coeffs) for k in range(n_agents)])
    hdiag[0:n_u:2] = 2.0
    hdiag[1:n_u:2] = 2.0 * sa
    if config.soft:
        hdiag[n_u:n_u + n_pair] = 2.0 * config.slack_weight_agent
        # guard rails stay soft; the physical road edge is near-rigid
        w_road = np.full(n_road, config.slack_weight_edge)
        if ego_rails is not None:
            el, er = ego_rails
            if er.kind == "arctan":
                w_road[2 * e] = config.slack_weight_road
            if el.kind == "arctan":
                w_road[2 * e + 1] = config.slack_weight_road
        hdiag[n_u + n_pair:] = 2.0 * w_road
    f = np.zeros(n_vars)
    f[2 * e] = -2.0 * baseline.delta
    f[2 * e + 1] = -2.0 * sa[e] * baseline.a_c

    lb = np.empty(n_vars)
    ub = np.empty(n_vars)
    ob, eb = config.other_box, config.ego_box
    lb[0:n_u:2] = ob.delta_min
    ub[0:n_u:2] = ob.delta_max
    lb[1:n_u:2] = ob.a_min
    ub[1:n_u:2] = ob.a_max
    lb[2 * e], ub[2 * e] = eb.delta_min, eb.delta_max
    lb[2 * e + 1], ub[2 * e + 1] = eb.a_min, eb.a_max
    if config.soft:
        lb[n_u:] = 0.0
        ub[n_u:] = math.inf

    problem = qp.QpProblem(H=hdiag, f=f, A_ineq=A, b_ineq=b_vec, lb=lb, ub=ub)
    row_pairs = [(ids[i], ids[j]) for i, j in zip(src, dst)]
    return problem, ids, row_pairs


def filter_step(ego_id: int, own_state: AgentState, messages,
                baseline: ControlInput, fstate: FilterState,
                config: FilterConfig, dt_ctrl: float, now: float = 0.0,
                ego_rails: tuple[Rail, Rail] | None = None):
    """One filter cycle: solve the QP, apply the ego component, advance w.

    The w estimates advance by one forward-Euler step of the lag
    tau w' = -w + (observed action) - (local copy), pairing the action
    carried by the latest broadcast with the copy stored on the previous
    cycle. Agents that left perception are dropped; new ones start at 0.

    Returns (applied control, state, info dict).
    """
    senders = {mm.sender for mm in messages}
    fstate.w = {a: val for a, val in fstate.w.items() if a in senders}
    fstate.last_solution = {a: val for a, val in fstate.last_solution.items()
                            if a in senders}

    problem, ids, _ = build_qp(ego_id, own_state, messages, baseline,
                               fstate, config, ego_rails)
    sol = qp.solve(problem, warm_start=fstate.last_active_set or None)

    info = {"status": sol.status, "iterations": sol.iterations, "fallback": False}
    if sol.status == "optimal":
        e = ids.index(ego_id)
        applied = clamp_control(
            ControlInput(float(sol.z[2 * e]), float(sol.z[2 * e + 1])),
            config.ego_box)
        copies = {a: np.array([sol.z[2 * k], sol.z[2 * k + 1]])
                  for k, a in enumerate(ids) if a != ego_id}
        fstate.last_active_set = sol.active_set
    else:
        # always-feasible braking action, ego disturbance is zero
        info["fallback"] = True
        applied = clamp_control(
            feasible_fallback(own_state.v, config.gains.lambda1), config.ego_box)
        copies = {}
        for mm in messages:
            w_j = fstate.w.get(mm.sender, np.zeros(2))
            fb = feasible_fallback(mm.v, config.gains.lambda1, w_j)
            copies[mm.sender] = np.array([fb.delta, fb.a_c])
        fstate.last_active_set = ()

    # predictor-corrector update from the freshest broadcast actions
    alpha = dt_ctrl / config.tau
    new_w = {}
    for mm in messages:
        a = mm.sender
        prev_copy = fstate.last_solution.get(a)
        w_old = fstate.w.get(a, np.zeros(2))
        if prev_copy is None:
            new_w[a] = w_old
            continue
        if now - mm.timestamp > config.stale_limit:
            obs = np.zeros(2)
        else:
            obs = np.array([mm.delta, mm.a_c])
        new_w[a] = w_old + alpha * (-w_old + obs - prev_copy)
    fstate.w = new_w
    fstate.last_solution = copies
    return applied, fstate, info
