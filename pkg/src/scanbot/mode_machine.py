"""Mode selection, task progress, and per-mode control directives.

One mode is active per control tick. Selection priority: a grasped probe
forces the human-guided mode; without a trajectory the robot waits; with a
trajectory, a position-force combined condition separates scanning from
recovery. Progress time advances only while scanning, so every trajectory
point is eventually traversed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .weighting import WeightingFactors

# Recovery refreshes the null-space posture target at this cadence
QDN_RESAMPLE_CYCLES = 100


class Mode(enum.Enum):
    WAITING = "waiting"
    SCANNING = "scanning"
    RECOVERY = "recovery"
    HUMAN_GUIDED = "human_guided"


class XdSource(enum.Enum):
    SCAN_TRAJECTORY = "scan_trajectory"
    RECOVERY_PLAN = "recovery_plan"
    CURRENT_POSE = "current_pose"
    FROZEN_POSE = "frozen_pose"


class QdnPolicy(enum.Enum):
    NOMINAL = "nominal"
    RESAMPLE_EVERY_100_CYCLES = "resample_every_100_cycles"
    CURRENT_Q = "current_q"
    FROZEN_Q = "frozen_q"


@dataclass(frozen=True)
class Thresholds:
    """Mode-selection thresholds: a_ht (grasp), a_ft (contact), a_pt
    (proximity), all in (0,1); eps is the tracking-error bound in meters."""

    a_ht: float = 0.8
    a_ft: float = 0.5
    a_pt: float = 0.9
    eps: float = 0.05

    def __post_init__(self):
        for name in ("a_ht", "a_ft", "a_pt"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0,1), got {v}")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class TaskProgress:
    """Progress clock of the scanning task.

    t_p is held as an integer count of scanning ticks so that the invariant
    "total increase equals dt times the number of scanning ticks" is exact.
    """

    T: float
    N_pts: int
    dt: float
    scan_ticks: int = 0

    @property
    def t_p(self) -> float:
        return min(self.scan_ticks * self.dt, self.T)

    @property
    def complete(self) -> bool:
        return self.scan_ticks * self.dt >= self.T


@dataclass(frozen=True)
class ModeDirectives:
    """One row of the per-mode directive table: where the desired pose and
    null-space posture come from, and the stiffness caps."""

    x_d_source: XdSource
    q_dn_policy: QdnPolicy
    K_d_max: np.ndarray
    K_dn_max: np.ndarray


def select_mode(w: WeightingFactors, tracking_err: float, has_traj: bool,
                th: Thresholds, prev: Mode,
                contact_overrides_error: bool = True) -> Mode:
    """Pick the active mode for this tick.

    The scanning condition is ((err < eps) and (a_p > a_pt)) or (a_f > a_ft):
    confirmed contact alone keeps the robot scanning, while proximity counts
    only with a small tracking error. Setting contact_overrides_error=False
    switches to the alternative grouping (err < eps) and ((a_p > a_pt) or
    (a_f > a_ft)) for comparison.
    """
    if w.a_h >= th.a_ht:
        return Mode.HUMAN_GUIDED
    if not has_traj:
        return Mode.WAITING
    if contact_overrides_error:
        scanning = ((tracking_err < th.eps) and (w.a_p > th.a_pt)) or (w.a_f > th.a_ft)
    else:
        scanning = (tracking_err < th.eps) and ((w.a_p > th.a_pt) or (w.a_f > th.a_ft))
    return Mode.SCANNING if scanning else Mode.RECOVERY


def advance_progress(p: TaskProgress, mode: Mode) -> TaskProgress:
    """Advance the progress clock by one tick iff the mode is scanning."""
    if mode is not Mode.SCANNING or p.complete:
        return p
    return replace(p, scan_ticks=p.scan_ticks + 1)


def trajectory_index(t_p: float, T: float, N_pts: int) -> int:
    """1-based index of the trajectory point for progress time t_p:
    nearest integer of t_p*N/T, clamped to [1, N_pts]."""
    if not 0.0 <= t_p <= T:
        raise ValueError(f"t_p must lie in [0, {T}], got {t_p}")
    i = int(round(t_p * N_pts / T))
    return max(1, min(N_pts, i))


def directives_for(mode: Mode, K_g: np.ndarray, K_gn: np.ndarray) -> ModeDirectives:
    """Directive row for a mode, given the maximum stiffness matrices."""
    if mode is Mode.SCANNING:
        return ModeDirectives(XdSource.SCAN_TRAJECTORY, QdnPolicy.NOMINAL, K_g, K_gn)
    if mode is Mode.RECOVERY:
        return ModeDirectives(XdSource.RECOVERY_PLAN,
                              QdnPolicy.RESAMPLE_EVERY_100_CYCLES, K_g, K_gn)
    if mode is Mode.HUMAN_GUIDED:
        return ModeDirectives(XdSource.CURRENT_POSE, QdnPolicy.CURRENT_Q,
                              np.zeros_like(K_g), np.zeros_like(K_gn))
    if mode is Mode.WAITING:
        return ModeDirectives(XdSource.FROZEN_POSE, QdnPolicy.FROZEN_Q, K_g, K_gn)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class ModeTracker:
    """Edge detection and frozen-state capture for the simulation loop.

    Owned by the single-threaded loop; select_mode itself stays pure.
    """

    mode: Mode = Mode.WAITING
    ticks_in_mode: int = 0
    transitions: list[tuple[float, str, str]] = field(default_factory=list)

    def update(self, new_mode: Mode, t: float) -> bool:
        """Record the tick's mode; returns True on a mode change."""
        changed = new_mode is not self.mode
        if changed:
            self.transitions.append((t, self.mode.value, new_mode.value))
            self.mode = new_mode
            self.ticks_in_mode = 0
        else:
            self.ticks_in_mode += 1
        return changed
