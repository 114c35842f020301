"""Minimum-jerk recovery planning and quaternion interpolation.

A recovery plan blends from the pose at trigger time toward a (possibly
moving) target with a quintic phase variable whose velocity and acceleration
vanish at both endpoints, so the probe recontacts the patient softly.
Orientation follows SLERP over the same phase; the commanded angular
velocity is zero throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .robot_core import Pose, Twist
from .rotations import quat_normalize


def phase(t: float, t_i: float, T_rec: float) -> float:
    """Quintic phase 10u^3 - 15u^4 + 6u^5 with u = (t - t_i)/T_rec, clamped
    to [0, 1] outside the plan interval."""
    if T_rec <= 0.0:
        raise ValueError("recovery duration T_rec must be positive")
    u = (t - t_i) / T_rec
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)


def phase_rate(t: float, t_i: float, T_rec: float) -> float:
    """d(phase)/dt; zero outside the plan interval."""
    if T_rec <= 0.0:
        raise ValueError("recovery duration T_rec must be positive")
    u = (t - t_i) / T_rec
    if u <= 0.0 or u >= 1.0:
        return 0.0
    return (30.0 * u * u - 60.0 * u**3 + 30.0 * u**4) / T_rec


def phase_accel(t: float, t_i: float, T_rec: float) -> float:
    """d^2(phase)/dt^2; zero outside the plan interval."""
    if T_rec <= 0.0:
        raise ValueError("recovery duration T_rec must be positive")
    u = (t - t_i) / T_rec
    if u <= 0.0 or u >= 1.0:
        return 0.0
    return (60.0 * u - 180.0 * u * u + 120.0 * u**3) / T_rec**2


def slerp(r0: np.ndarray, r1: np.ndarray, u: float) -> np.ndarray:
    """Spherical linear interpolation along the shorter great-circle arc.

    Inputs are unit quaternions [w,x,y,z]; the sign of r1 is flipped when
    dot(r0, r1) < 0 so the path is the short way around. Falls back to
    normalized linear interpolation for nearly coincident inputs.
    """
    r0 = np.asarray(r0, dtype=float)
    r1 = np.asarray(r1, dtype=float)
    dot = float(np.dot(r0, r1))
    if dot < 0.0:
        r1 = -r1
        dot = -dot
    dot = min(dot, 1.0)
    angle = np.arccos(dot)
    if angle < 1e-6:
        return quat_normalize(r0 + u * (r1 - r0))
    s = np.sin(angle)
    out = (np.sin((1.0 - u) * angle) / s) * r0 + (np.sin(u * angle) / s) * r1
    return quat_normalize(out)


@dataclass
class MinJerkPlan:
    """One recovery episode: start pose x_i frozen at trigger time t_i, and a
    provider for the (time-varying) target pose x_f(t)."""

    t_i: float
    T_rec: float
    x_i: Pose
    target_provider: Callable[[float], Pose]

    def __post_init__(self):
        if self.T_rec <= 0.0:
            raise ValueError("recovery duration T_rec must be positive")
        self.x_i = self.x_i.copy()

    def pose(self, t: float) -> Pose:
        """Desired pose: position blends linearly in the phase, orientation
        by SLERP over the same phase."""
        x_f = self.target_provider(t)
        ph = phase(t, self.t_i, self.T_rec)
        p = self.x_i.p + ph * (x_f.p - self.x_i.p)
        r = slerp(self.x_i.r, x_f.r, ph)
        return Pose(p, r)

    def velocity(self, t: float) -> Twist:
        """Desired twist: phase-rate times the position offset; the angular
        part is identically zero."""
        x_f = self.target_provider(t)
        dph = phase_rate(t, self.t_i, self.T_rec)
        return Twist(dph * (x_f.p - self.x_i.p), np.zeros(3))

    def acceleration(self, t: float) -> np.ndarray:
        """Analytic second derivative of the position profile (target motion
        neglected); used as the feedforward acceleration during recovery."""
        x_f = self.target_provider(t)
        ddph = phase_accel(t, self.t_i, self.T_rec)
        return np.concatenate([ddph * (x_f.p - self.x_i.p), np.zeros(3)])


def plan_pose(plan: MinJerkPlan, t: float) -> Pose:
    return plan.pose(t)


def plan_velocity(plan: MinJerkPlan, t: float) -> Twist:
    return plan.velocity(t)
