"""Kinematic single-track vehicle model.

State layout is ``[x, y, delta, v, a, theta]`` everywhere in the package
(rear-axle position, steering angle, speed, longitudinal acceleration, yaw),
controls are ``[j_long, v_delta]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

STATE_DIM = 6
CONTROL_DIM = 2
IX, IY, IDELTA, IV, IA, ITHETA = range(STATE_DIM)


@dataclass(frozen=True)
class VehicleParams:
    wheelbase_m: float = 2.6
    max_steer_rad: float = 1.0
    max_steer_rate_rad_s: float = 0.4
    max_speed_m_s: float = 28.0
    min_speed_m_s: float = 0.0
    max_long_accel_m_s2: float = 11.5
    max_lat_accel_m_s2: float = 4.9
    switching_speed_m_s: float = 7.4

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value):
                raise ValueError(f"{f.name} must be finite, got {value}")
            if f.name == "min_speed_m_s":
                if value < 0:
                    raise ValueError("min_speed_m_s must be >= 0")
            elif value <= 0:
                raise ValueError(f"{f.name} must be > 0, got {value}")
        if self.switching_speed_m_s >= self.max_speed_m_s:
            raise ValueError("switching_speed_m_s must be below max_speed_m_s")

    def as_array(self) -> np.ndarray:
        """Pack in field order; the compiled OCP kernels index into this."""
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleParams":
        return cls(**{k: float(v) for k, v in d.items()})


PROFILES = {"bmw_320i": VehicleParams()}


def get_profile(name: str) -> VehicleParams:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown vehicle profile {name!r}; known: {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class State:
    x_m: float = 0.0
    y_m: float = 0.0
    steer_rad: float = 0.0
    speed_m_s: float = 0.0
    accel_m_s2: float = 0.0
    yaw_rad: float = 0.0

    def __post_init__(self):
        _check_finite(self.as_array(), "state")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x_m, self.y_m, self.steer_rad, self.speed_m_s, self.accel_m_s2, self.yaw_rad]
        )

    @classmethod
    def from_array(cls, arr) -> "State":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class Control:
    long_jerk_m_s3: float = 0.0
    steer_rate_rad_s: float = 0.0

    def __post_init__(self):
        _check_finite(self.as_array(), "control")

    def as_array(self) -> np.ndarray:
        return np.array([self.long_jerk_m_s3, self.steer_rate_rad_s])


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values: {arr}")


def _as_state(s) -> np.ndarray:
    arr = s.as_array() if isinstance(s, State) else np.asarray(s, dtype=np.float64)
    _check_finite(arr, "state")
    return arr


def _as_control(u) -> np.ndarray:
    arr = u.as_array() if isinstance(u, Control) else np.asarray(u, dtype=np.float64)
    _check_finite(arr, "control")
    return arr


def dynamics(state, control, params: VehicleParams) -> np.ndarray:
    """State derivative, ordered like the state vector."""
    s = _as_state(state)
    u = _as_control(control)
    delta, v, a, theta = s[IDELTA], s[IV], s[IA], s[ITHETA]
    if abs(delta) >= math.pi / 2:
        raise ValueError(f"steering angle {delta} outside (-pi/2, pi/2)")
    return np.array(
        [
            v * math.cos(theta),
            v * math.sin(theta),
            u[1],
            a,
            u[0],
            v / params.wheelbase_m * math.tan(delta),
        ]
    )


def accel_bound(a: float, v: float, params: VehicleParams) -> float:
    """Speed-dependent longitudinal acceleration limit.

    The high-speed branch wins over the sign branch, so braking is also
    scaled down above the switching speed.
    """
    a_max = params.max_long_accel_m_s2
    if v > params.switching_speed_m_s:
        return a_max * params.switching_speed_m_s / v
    if a < 0:
        return -a_max
    return a_max


def yaw_rate(state, params: VehicleParams) -> float:
    s = _as_state(state)
    return s[IV] / params.wheelbase_m * math.tan(s[IDELTA])


def constraint_values(state, control, params: VehicleParams) -> np.ndarray:
    """Path constraints, feasible where every entry is <= 0."""
    s = _as_state(state)
    u = _as_control(control)
    delta, v, a = s[IDELTA], s[IV], s[IA]
    lat_accel = yaw_rate(s, params) * v
    gg = (a / accel_bound(a, v, params)) ** 2 + (lat_accel / params.max_lat_accel_m_s2) ** 2 - 1.0
    return np.array(
        [
            abs(delta) - params.max_steer_rad,
            v - params.max_speed_m_s,
            -v - params.min_speed_m_s,
            abs(u[1]) - params.max_steer_rate_rad_s,
            gg,
        ]
    )


def lateral_jerk(state, control, params: VehicleParams) -> float:
    """Time derivative of the lateral acceleration ``v * yaw_rate``."""
    s = _as_state(state)
    u = _as_control(control)
    delta, v, a = s[IDELTA], s[IV], s[IA]
    if abs(delta) >= math.pi / 2:
        raise ValueError(f"steering angle {delta} outside (-pi/2, pi/2)")
    lwb = params.wheelbase_m
    c = math.cos(delta)
    return 2.0 * v * a / lwb * math.tan(delta) + v * v / (lwb * c * c) * u[1]


def integrate_step(state, control, dt: float, params: VehicleParams | None = None) -> np.ndarray:
    """One RK4 step with the control held constant over ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    params = params or VehicleParams()
    s = _as_state(state)
    u = _as_control(control)
    k1 = dynamics(s, u, params)
    k2 = dynamics(s + 0.5 * dt * k1, u, params)
    k3 = dynamics(s + 0.5 * dt * k2, u, params)
    k4 = dynamics(s + dt * k3, u, params)
    return s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rollout(state, controls, dt: float, params: VehicleParams | None = None) -> np.ndarray:
    """Integrate a control sequence; returns ``(len(controls) + 1, 6)`` states."""
    params = params or VehicleParams()
    out = [_as_state(state)]
    for u in np.atleast_2d(controls):
        out.append(integrate_step(out[-1], u, dt, params))
    return np.array(out)
