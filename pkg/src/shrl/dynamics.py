"""Kinematic bicycle model plus the goal-tracking controllers.

The reference point ``(x, y)`` is the center of gravity, which with the
default ``l_f = l_r`` is also the center of the vehicle rectangle.
"""

from __future__ import annotations

import math
from functools import cached_property
from dataclasses import dataclass, field, replace

import numpy as np


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class VehicleParams:
    length: float = 4.6
    width: float = 1.8
    l_f: float = 1.3
    l_r: float = 1.3
    steer_max: float = 0.6
    a_min: float = -6.0
    a_max: float = 3.0
    v_cap: float = 40.0

    def __post_init__(self):
        if self.l_f + self.l_r > self.length:
            raise ValueError("axle distances exceed the vehicle length")


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    psi: float
    speed: float
    params: VehicleParams = field(default_factory=VehicleParams)

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def heading(self) -> np.ndarray:
        return np.array([math.cos(self.psi), math.sin(self.psi)])

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * self.heading

    def front_axle(self) -> np.ndarray:
        return self.position + self.params.l_f * self.heading

    def corners(self) -> np.ndarray:
        """Rectangle corners as ``(4, 2)`` in fl, fr, rl, rr order."""
        return self._corners.copy()

    @cached_property
    def _corners(self) -> np.ndarray:
        h = self.heading
        n = np.array([-h[1], h[0]])  # left normal
        hl = 0.5 * self.params.length * h
        hw = 0.5 * self.params.width * n
        c = self.position
        return np.array([c + hl + hw, c + hl - hw, c - hl + hw, c - hl - hw])


@dataclass(frozen=True)
class ControlCommand:
    steer: float
    accel: float


@dataclass(frozen=True)
class GoalTarget:
    g: tuple[float, float]
    psi_target: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.g)) and math.isfinite(self.psi_target)):
            raise ValueError("goal target must be finite")


def saturate(cmd: ControlCommand, params: VehicleParams) -> ControlCommand:
    steer = min(max(cmd.steer, -params.steer_max), params.steer_max)
    accel = min(max(cmd.accel, params.a_min), params.a_max)
    return ControlCommand(steer, accel)


def step_bicycle(state: VehicleState, cmd: ControlCommand, dt: float) -> VehicleState:
    """One explicit-Euler step of the kinematic bicycle model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p = state.params
    cmd = saturate(cmd, p)
    beta = math.atan(p.l_r * math.tan(cmd.steer) / (p.l_f + p.l_r))
    v = state.speed
    x = state.x + v * math.cos(state.psi + beta) * dt
    y = state.y + v * math.sin(state.psi + beta) * dt
    psi = wrap_angle(state.psi + (v / p.l_r) * math.sin(beta) * dt)
    speed = min(max(v + cmd.accel * dt, 0.0), p.v_cap)
    return replace(state, x=x, y=y, psi=psi, speed=speed)


def cross_track_error(state: VehicleState, goal: GoalTarget) -> float:
    """Signed distance from the front axle to the goal line; positive when
    the line lies to the left of the vehicle."""
    f = state.front_axle()
    n = np.array([-math.sin(goal.psi_target), math.cos(goal.psi_target)])
    return float(np.dot(np.asarray(goal.g) - f, n))


def stanley_steer(state: VehicleState, goal: GoalTarget, k_e: float = 1.0, k_s: float = 1.0) -> float:
    e_lat = cross_track_error(state, goal)
    steer = wrap_angle(goal.psi_target - state.psi) + math.atan(k_e * e_lat / (k_s + state.speed))
    sm = state.params.steer_max
    return min(max(steer, -sm), sm)


@dataclass
class PID:
    kp: float
    ki: float
    kd: float
    integral: float = 0.0
    prev: float | None = None

    def __call__(self, error: float, dt: float, lo: float = -math.inf, hi: float = math.inf) -> float:
        deriv = 0.0 if self.prev is None else (error - self.prev) / dt
        self.prev = error
        out = self.kp * error + self.ki * (self.integral + error * dt) + self.kd * deriv
        if lo < out < hi:
            # integrate only when unsaturated (anti-windup)
            self.integral += error * dt
        return min(max(out, lo), hi)

    def reset(self):
        self.integral = 0.0
        self.prev = None


@dataclass
class LongitudinalController:
    """Cascade: distance-to-goal -> target speed -> acceleration."""

    outer: PID = field(default_factory=lambda: PID(0.5, 0.0, 0.1))
    inner: PID = field(default_factory=lambda: PID(1.5, 0.1, 0.0))

    def target_speed(self, state: VehicleState, goal: GoalTarget, limits: tuple[float, float], dt: float) -> float:
        d = np.asarray(goal.g) - state.position
        dist = float(d[0] * math.cos(goal.psi_target) + d[1] * math.sin(goal.psi_target))
        return self.outer(dist, dt, *limits)

    def __call__(self, state: VehicleState, goal: GoalTarget, limits: tuple[float, float], dt: float) -> float:
        v_target = self.target_speed(state, goal, limits, dt)
        p = state.params
        return self.inner(v_target - state.speed, dt, p.a_min, p.a_max)

    def reset(self):
        self.outer.reset()
        self.inner.reset()


@dataclass
class GoalTracker:
    """Stanley lateral control plus the longitudinal cascade for one vehicle."""

    k_e: float = 1.0
    k_s: float = 1.0
    speed_limits: tuple[float, float] = (5.0, 30.0)
    longitudinal: LongitudinalController = field(default_factory=LongitudinalController)

    def command(self, state: VehicleState, goal: GoalTarget, dt: float) -> ControlCommand:
        steer = stanley_steer(state, goal, self.k_e, self.k_s)
        accel = self.longitudinal(state, goal, self.speed_limits, dt)
        return saturate(ControlCommand(steer, accel), state.params)
