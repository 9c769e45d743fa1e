"""Pure-pursuit lane tracking with proportional speed hold.

This is the performance controller that the safety filter overrides: it
ignores every other vehicle and simply tracks the centerline of the lane
the driver wants, holding the desired speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .dynamics import AgentState, ControlBox, ControlInput, EGO_BOX, VehicleParams

# look-ahead = speed * LOOKAHEAD_TIME + LOOKAHEAD_BASE
LOOKAHEAD_TIME = 1.0
LOOKAHEAD_BASE = 5.0
SPEED_GAIN = 0.7  # kappa [1/s]


@dataclass(frozen=True)
class DrivingIntent:
    target_lane: str        # "left" | "right"
    change_lane: bool
    desired_speed: float    # [m/s]


def pure_pursuit(state: AgentState, intent: DrivingIntent, params: VehicleParams,
                 lane_centers: dict | None = None, kappa: float = SPEED_GAIN,
                 box: ControlBox = EGO_BOX) -> ControlInput:
    """Steer toward a look-ahead point on the target-lane centerline.

    The look-ahead point sits L_d = v*1s + 5m ahead along the road axis
    (lanes are straight and parallel, so arc distance equals x distance).
    Steering follows the pursuit curvature law delta = 2 L sin(eta) / L_d
    with eta the heading error to the look-ahead point; acceleration is
    -kappa * (v - desired_speed). Output is clamped to the ego box.
    """
    centers = lane_centers if lane_centers is not None else {"right": 0.0, "left": 3.5}
    y_target = centers[intent.target_lane]
    ld = state.v * LOOKAHEAD_TIME + LOOKAHEAD_BASE
    eta = math.atan2(y_target - state.y, ld) - state.theta
    delta = 2.0 * params.wheelbase * math.sin(eta) / ld
    a_c = -kappa * (state.v - intent.desired_speed)
    return ControlInput(
        min(max(delta, box.delta_min), box.delta_max),
        min(max(a_c, box.a_min), box.a_max),
    )
