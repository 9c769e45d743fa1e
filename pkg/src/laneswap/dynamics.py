"""Kinematic bicycle model with actuator limits.

All agent motion in the simulator is integrated here. The model is the
standard rear-axle bicycle kinematics: the state advances under

    x'     = v cos(theta)
    y'     = v sin(theta)
    theta' = (v / wheelbase) * delta
    v'     = a_c

with the control held constant over the step (zero-order hold between
controller updates) and fixed-step RK4 integration underneath.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# RK4 sub-step; finer than the 0.1 s controller period so plant error stays
# well below control-discretization effects.
INNER_DT = 0.01


@dataclass(frozen=True)
class AgentState:
    x: float      # longitudinal position [m]
    y: float      # lateral position [m]
    theta: float  # heading relative to the road axis [rad]
    v: float      # longitudinal speed [m/s]


@dataclass(frozen=True)
class ControlInput:
    delta: float  # wheel steering angle [rad]
    a_c: float    # longitudinal acceleration [m/s^2]


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.9     # [m], Mach-E / Model 3 class
    body_length: float = 4.7   # [m]
    body_width: float = 1.85   # [m]
    mass: float = 2000.0       # [kg], used only by the brake-loss metric

    def __post_init__(self):
        if min(self.wheelbase, self.body_length, self.body_width, self.mass) <= 0:
            raise ValueError("vehicle parameters must be strictly positive")


@dataclass(frozen=True)
class ControlBox:
    """Componentwise actuator bounds."""

    delta_min: float
    delta_max: float
    a_min: float
    a_max: float

    def __post_init__(self):
        if self.delta_min > self.delta_max or self.a_min > self.a_max:
            raise ValueError("control box lower bound exceeds upper bound")

    def scaled(self, factor: float) -> "ControlBox":
        return ControlBox(self.delta_min * factor, self.delta_max * factor,
                          self.a_min * factor, self.a_max * factor)


# Ego actuator limits: steering +-pi/7 rad, acceleration [-8, 4] m/s^2.
EGO_BOX = ControlBox(-math.pi / 7, math.pi / 7, -8.0, 4.0)


def clamp_control(u: ControlInput, box: ControlBox) -> ControlInput:
    """Componentwise saturation of a control input to a box."""
    return ControlInput(
        min(max(u.delta, box.delta_min), box.delta_max),
        min(max(u.a_c, box.a_min), box.a_max),
    )


def _rates(x, y, theta, v, delta, a_c, wheelbase):
    return (v * math.cos(theta), v * math.sin(theta), v * delta / wheelbase, a_c)


def step(state: AgentState, u: ControlInput, params: VehicleParams, dt: float) -> AgentState:
    """Advance one controller period with RK4 sub-stepping.

    The control is held constant over the whole step. Speed is floored at
    zero after every sub-step; the lane-swap scenario never commands
    reverse, so the floor only guards degenerate inputs.
    """
    if not (dt > 0.0):
        raise ValueError("dt must be positive")
    vals = (state.x, state.y, state.theta, state.v, u.delta, u.a_c)
    if not all(math.isfinite(c) for c in vals):
        raise ValueError("non-finite state or control")

    n_sub = max(1, round(dt / INNER_DT))
    h = dt / n_sub
    lw = params.wheelbase
    x, y, th, v = state.x, state.y, state.theta, state.v
    for _ in range(n_sub):
        k1 = _rates(x, y, th, v, u.delta, u.a_c, lw)
        k2 = _rates(x + 0.5 * h * k1[0], y + 0.5 * h * k1[1],
                    th + 0.5 * h * k1[2], v + 0.5 * h * k1[3], u.delta, u.a_c, lw)
        k3 = _rates(x + 0.5 * h * k2[0], y + 0.5 * h * k2[1],
                    th + 0.5 * h * k2[2], v + 0.5 * h * k2[3], u.delta, u.a_c, lw)
        k4 = _rates(x + h * k3[0], y + h * k3[1], th + h * k3[2], v + h * k3[3],
                    u.delta, u.a_c, lw)
        x += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        th += h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        v += h / 6.0 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        if v < 0.0:
            v = 0.0
    return AgentState(x, y, th, v)
