"""Elliptic inter-agent barrier functions, road-boundary barriers, and
ground-truth collision checks.

Each vehicle carries an ellipse aligned with its heading; safety against
vehicle j is measured by the focal-sum gap

    h = |F1 - Xj| + |F2 - Xj| - 2*alpha*r

which is positive exactly when j's center lies strictly outside the
ellipse. Derivatives use the focal-point-moves-with-center approximation:
focal points are assumed to translate with the body center, which drops
terms proportional to the (small) steering angle. The second derivative
is linear in both agents' controls, which is what the safety filter
constrains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import AgentState, VehicleParams

# Focal distances below this are treated as degenerate geometry; the
# configuration is unreachable while h > 2*rho - 2*alpha*r.
DEGENERATE_EPS = 1e-9


class DegenerateGeometryError(ValueError):
    """Raised when an agent center coincides with a focal point."""


@dataclass(frozen=True)
class EllipseSpec:
    """Protective ellipse: semi-minor axis r, major/minor ratio alpha."""

    r: float
    alpha: float

    def __post_init__(self):
        if self.r <= 0 or self.alpha <= 1.0:
            raise ValueError("ellipse requires r > 0 and alpha > 1")

    @property
    def rho(self) -> float:
        """Focal distance from center; rho^2 + r^2 = (alpha*r)^2."""
        return self.r * math.sqrt(self.alpha ** 2 - 1.0)

    @property
    def major(self) -> float:
        return self.alpha * self.r


# Controller ellipse, full axes 3.8 x 8.36 m.
CONTROL_ELLIPSE = EllipseSpec(r=1.9, alpha=2.2)


@dataclass(frozen=True)
class CbfGains:
    """Poles {-lambda1, -lambda2} of the barrier constraint dynamics."""

    lambda1: float = 0.4
    lambda2: float = 4.0

    def __post_init__(self):
        if not (0.0 < self.lambda1 <= self.lambda2):
            raise ValueError("require 0 < lambda1 <= lambda2")

    @property
    def l0(self) -> float:
        return self.lambda1 * self.lambda2

    @property
    def l1(self) -> float:
        return self.lambda1 + self.lambda2


@dataclass
class CbfRow:
    """One linear-in-control constraint  a + sum_k b_k u_k >= 0.

    b_terms maps agent id -> 1x2 row multiplying that agent's (delta, a_c);
    bw_terms are identical rows multiplying the w disturbance estimates.
    """

    a: float
    b_terms: dict = field(default_factory=dict)
    bw_terms: dict = field(default_factory=dict)
    kind: str = "inter-agent"      # inter-agent | road-left | road-right
    pair: tuple = ()


def _phi(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def ellipse_h(Xi, theta_i: float, Xj, spec: EllipseSpec) -> float:
    """Focal-sum gap of j's center against i's ellipse (positive outside)."""
    Xi = np.asarray(Xi, dtype=float)
    Xj = np.asarray(Xj, dtype=float)
    if not (np.all(np.isfinite(Xi)) and np.all(np.isfinite(Xj)) and math.isfinite(theta_i)):
        raise ValueError("non-finite inputs")
    off = spec.rho * _phi(theta_i)
    return float(np.linalg.norm(Xi + off - Xj) + np.linalg.norm(Xi - off - Xj)
                 - 2.0 * spec.alpha * spec.r)


def pair_rows(x, y, theta, v, src, dst, spec: EllipseSpec, gains: CbfGains,
              wheelbase: float):
    """Vectorized barrier rows for ordered agent pairs.

    For every k, row k protects agent src[k]'s ellipse against agent
    dst[k]'s center. Returns (h, h_dot, a, b_src, b_dst) where a is the
    control-free constraint term and b_src/b_dst are (n, 2) rows
    multiplying (delta, a_c) of the source/destination agent.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    theta = np.asarray(theta, float)
    v = np.asarray(v, float)
    src = np.asarray(src, int)
    dst = np.asarray(dst, int)

    ct, st = np.cos(theta), np.sin(theta)
    phix, phiy = ct, st           # heading unit vectors
    ppx, ppy = -st, ct            # perpendiculars

    rho = spec.rho
    dx = x[src] - x[dst]
    dy = y[src] - y[dst]
    ox = rho * phix[src]
    oy = rho * phiy[src]

    xi1x, xi1y = dx + ox, dy + oy
    xi2x, xi2y = dx - ox, dy - oy
    n1 = np.hypot(xi1x, xi1y)
    n2 = np.hypot(xi2x, xi2y)
    if n1.size and min(n1.min(), n2.min()) < DEGENERATE_EPS:
        raise DegenerateGeometryError("agent center coincides with a focal point")

    h = n1 + n2 - 2.0 * spec.alpha * spec.r

    # relative velocity of the (translated) focal points vs the other center
    dvx = v[src] * phix[src] - v[dst] * phix[dst]
    dvy = v[src] * phiy[src] - v[dst] * phiy[dst]

    u1x, u1y = xi1x / n1, xi1y / n1
    u2x, u2y = xi2x / n2, xi2y / n2
    p1 = u1x * dvx + u1y * dvy
    p2 = u2x * dvx + u2y * dvy
    h_dot = p1 + p2

    # curvature term: sum_k (|dv|^2 - (u_k . dv)^2) / |xi_k|  (always >= 0)
    dv2 = dvx * dvx + dvy * dvy
    lf2 = (dv2 - p1 * p1) / n1 + (dv2 - p2 * p2) / n2

    a = lf2 + gains.l1 * h_dot + gains.l0 * h

    sx = u1x + u2x
    sy = u1y + u2y
    gs = v[src] ** 2 / wheelbase
    gd = v[dst] ** 2 / wheelbase
    b_src = np.stack([gs * (sx * ppx[src] + sy * ppy[src]),
                      sx * phix[src] + sy * phiy[src]], axis=-1)
    b_dst = np.stack([-gd * (sx * ppx[dst] + sy * ppy[dst]),
                      -(sx * phix[dst] + sy * phiy[dst])], axis=-1)
    return h, h_dot, a, b_src, b_dst


def _pair_scalar(state_i: AgentState, state_j: AgentState, spec, gains, wheelbase):
    return pair_rows(
        np.array([state_i.x, state_j.x]), np.array([state_i.y, state_j.y]),
        np.array([state_i.theta, state_j.theta]), np.array([state_i.v, state_j.v]),
        np.array([0]), np.array([1]), spec, gains, wheelbase)


def ellipse_h_dot(state_i: AgentState, state_j: AgentState, spec: EllipseSpec,
                  wheelbase: float = 2.9) -> float:
    """Rate of change of the focal-sum gap under translated focal points."""
    _, h_dot, _, _, _ = _pair_scalar(state_i, state_j, spec, CbfGains(), wheelbase)
    return float(h_dot[0])


def ellipse_h_row(state_i: AgentState, state_j: AgentState, spec: EllipseSpec,
                  gains: CbfGains, wheelbase: float = 2.9,
                  id_i: int = 0, id_j: int = 1) -> CbfRow:
    """Assembled constraint row  a + b_i u_i + b_j u_j >= 0 for one pair."""
    _, _, a, b_src, b_dst = _pair_scalar(state_i, state_j, spec, gains, wheelbase)
    b = {id_i: b_src[0].copy(), id_j: b_dst[0].copy()}
    return CbfRow(a=float(a[0]), b_terms=b,
                  bw_terms={k: v.copy() for k, v in b.items()},
                  kind="inter-agent", pair=(id_i, id_j))


# ---------------------------------------------------------------------------
# road / guard-rail boundaries


@dataclass(frozen=True)
class Rail:
    """Lateral boundary rb(x) = d0 + d1*atan(d3*(x - d4)).

    A constant rail is the d1 == 0 special case. Arctan rails are the
    soft guard rails that funnel lane-changers toward their target lane.
    """

    d0: float
    d1: float = 0.0
    d3: float = 0.0
    d4: float = 0.0

    @property
    def kind(self) -> str:
        return "constant" if self.d1 == 0.0 else "arctan"

    def value(self, x):
        if self.d1 == 0.0:
            return self.d0 + 0.0 * np.asarray(x, float)
        return self.d0 + self.d1 * np.arctan(self.d3 * (np.asarray(x, float) - self.d4))

    def slope(self, x):
        if self.d1 == 0.0:
            return 0.0 * np.asarray(x, float)
        u = self.d3 * (np.asarray(x, float) - self.d4)
        return self.d1 * self.d3 / (1.0 + u * u)

    def curvature(self, x):
        if self.d1 == 0.0:
            return 0.0 * np.asarray(x, float)
        u = self.d3 * (np.asarray(x, float) - self.d4)
        return -2.0 * self.d1 * self.d3 ** 2 * u / (1.0 + u * u) ** 2


def road_rows(state: AgentState, rail_left: Rail, rail_right: Rail,
              gains: CbfGains, wheelbase: float = 2.9,
              agent_id: int = 0) -> tuple[CbfRow, CbfRow]:
    """Constraint rows keeping the agent between the two rails.

    Right rail: h = y - rb_r(x); left rail: h = rb_l(x) - y. Rail value,
    slope and curvature enter through x' = v cos(theta); the expressions
    are exact (no focal approximation here).
    """
    x, y, th, v = state.x, state.y, state.theta, state.v
    ct, st = math.cos(th), math.sin(th)

    rows = []
    for rail, sign, kind in ((rail_right, 1.0, "road-right"),
                             (rail_left, -1.0, "road-left")):
        rb = float(rail.value(x))
        rbp = float(rail.slope(x))
        rbpp = float(rail.curvature(x))
        h = sign * (y - rb)
        h_dot = sign * (v * st - rbp * v * ct)
        lf2 = sign * (-rbpp * v * v * ct * ct)
        a = lf2 + gains.l1 * h_dot + gains.l0 * h
        b = np.array([sign * (v * v / wheelbase) * (ct + rbp * st),
                      sign * (st - rbp * ct)])
        rows.append(CbfRow(a=float(a), b_terms={agent_id: b},
                           bw_terms={agent_id: b.copy()}, kind=kind,
                           pair=(agent_id, kind.split("-")[1])))
    right_row, left_row = rows
    return left_row, right_row


# ---------------------------------------------------------------------------
# ground-truth collision geometry


@dataclass(frozen=True)
class CollisionResult:
    overlap: bool
    clearance: float  # max separating-axis distance; negative when overlapping


def _half_extent(axis_x, axis_y, ct, st, half_l, half_w):
    # projection radius of an oriented rectangle onto a unit axis
    return half_l * abs(axis_x * ct + axis_y * st) + half_w * abs(-axis_x * st + axis_y * ct)


def collision_check(state_i: AgentState, state_j: AgentState,
                    params: VehicleParams) -> CollisionResult:
    """Exact oriented-rectangle overlap test with signed clearance.

    Uses the separating-axis theorem over the four face normals of the two
    bodies; clearance is the largest axis separation (negative means the
    projections overlap on every axis, i.e. the bodies intersect).
    """
    hl, hw = params.body_length / 2.0, params.body_width / 2.0
    dx = state_j.x - state_i.x
    dy = state_j.y - state_i.y
    ci, si = math.cos(state_i.theta), math.sin(state_i.theta)
    cj, sj = math.cos(state_j.theta), math.sin(state_j.theta)

    best = -math.inf
    for ax, ay in ((ci, si), (-si, ci), (cj, sj), (-sj, cj)):
        sep = (abs(dx * ax + dy * ay)
               - _half_extent(ax, ay, ci, si, hl, hw)
               - _half_extent(ax, ay, cj, sj, hl, hw))
        if sep > best:
            best = sep
    return CollisionResult(overlap=best < 0.0, clearance=best)


def rectangles_overlap_any(x, y, theta, src, dst, params: VehicleParams) -> np.ndarray:
    """Vectorized SAT overlap flags for pair index arrays (metrics hot path)."""
    hl, hw = params.body_length / 2.0, params.body_width / 2.0
    ct, st = np.cos(theta), np.sin(theta)
    dx = x[dst] - x[src]
    dy = y[dst] - y[src]
    overlap = np.ones(len(src), dtype=bool)
    for who in (src, dst):
        for ax, ay in ((ct[who], st[who]), (-st[who], ct[who])):
            ext = (hl * np.abs(ax * ct[src] + ay * st[src])
                   + hw * np.abs(-ax * st[src] + ay * ct[src])
                   + hl * np.abs(ax * ct[dst] + ay * st[dst])
                   + hw * np.abs(-ax * st[dst] + ay * ct[dst]))
            overlap &= np.abs(ax * dx + ay * dy) - ext < 0.0
    return overlap


def h0_metric(state_i: AgentState, state_j: AgentState, spec0: EllipseSpec) -> float:
    """Focal-sum gap on the smaller reporting ellipse (safety metric only)."""
    return ellipse_h((state_i.x, state_i.y), state_i.theta,
                     (state_j.x, state_j.y), spec0)


def reporting_ellipse(params: VehicleParams, alpha: float = 2.2) -> EllipseSpec:
    """Reporting ellipse sized for the worst-case orthogonal encounter.

    The semi-minor axis is set so that another vehicle of the same size,
    oriented orthogonally with its center at either principal-axis vertex,
    just clears the protected body: r = (body_length + body_width) / 2.
    The major vertex is then automatically clear as well (alpha > 1).
    A non-negative value on this ellipse therefore certifies no body
    overlap in the crossing configurations it is sized for.
    """
    r = (params.body_length + params.body_width) / 2.0
    spec = EllipseSpec(r=r, alpha=alpha)
    # sanity: orthogonal vehicle at each vertex must not overlap the body
    for px, py in ((spec.major, 0.0), (0.0, spec.r)):
        chk = collision_check(AgentState(0, 0, 0, 0),
                              AgentState(px, py, math.pi / 2, 0), params)
        if chk.overlap:
            raise RuntimeError("reporting ellipse construction failed")
    return spec
