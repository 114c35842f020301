"""Closed-loop world: contact model, scripted patient and doctor, 1 kHz loop.

A scenario is a JSON document describing the patient geometry, controller
gains, thresholds, and a list of timed events (pushes, dodges, body motion,
head turns, grabs). Runs are fully deterministic for a given seed: two runs
with the same config produce bit-identical logs.

Sign convention: the logged contact force f_z is the pressing force along
the probe axis in the end-effector frame, positive in compression (the probe
z-axis points into the skin, so this is minus the z-component of the
reaction wrench expressed in {E}).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import controller as ctl
from . import mode_machine as mm
from . import perception as pc
from . import planner
from . import robot_core as rc
from .robot_core import JointState, Pose, RobotModel, Twist, Wrench
from .rotations import matrix_from_quat, quat_from_matrix, rotation_x, rotvec_from_matrix
from .weighting import (WeightingFactors, WeightingParams, basic_b,
                        compute_a_f, compute_a_p)

log = logging.getLogger(__name__)

EVENT_KINDS = {
    "patient_turn_head", "patient_translate", "patient_dodge", "patient_push",
    "hand_grab", "hand_release", "apply_gel_pause",
}

# defaults for event magnitudes (overridable per event)
PUSH_FORCE_DEFAULT = 25.0
DODGE_OFFSET_DEFAULT = (0.0, -0.02, 0.0)
GEL_LIFT_DEFAULT = 0.08


def smoothstep(u: float) -> float:
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


def bump(u: float) -> float:
    """Out-and-back profile: 0 -> 1 -> 0 over u in [0, 1]."""
    if u <= 0.0 or u >= 1.0:
        return 0.0
    return smoothstep(2.0 * u) if u < 0.5 else smoothstep(2.0 - 2.0 * u)


@dataclass(frozen=True)
class ScenarioEvent:
    """A timed disturbance or interaction in the scripted scenario."""

    kind: str
    t_start: float
    t_end: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not self.t_start < self.t_end:
            raise ValueError(f"event {self.kind}: t_start must precede t_end")

    def active(self, t: float) -> bool:
        return self.t_start <= t < self.t_end


# ---------------------------------------------------------------------------
# scripted patient
# ---------------------------------------------------------------------------

def _frame_with_x(axis: np.ndarray) -> np.ndarray:
    """Right-handed rotation matrix whose first column is the given axis."""
    x = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(helper, x)) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    y = np.cross(helper, x)
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    return np.column_stack([x, y, z])


class PatientScript:
    """Deterministic patient kinematics: a rigid neck cylinder whose pose and
    head angle follow the scripted events."""

    def __init__(self, base_position: np.ndarray, head_offset: np.ndarray,
                 radius: float, length: float, events: list[ScenarioEvent]):
        self.base_position = np.asarray(base_position, dtype=float)
        self.head_offset = np.asarray(head_offset, dtype=float)
        self.radius = float(radius)
        self.length = float(length)
        self.axis_rotation = _frame_with_x(self.head_offset)
        self.axis_quat = quat_from_matrix(self.axis_rotation)
        self.translations = [e for e in events if e.kind == "patient_translate"]
        self.dodges = [e for e in events if e.kind == "patient_dodge"]
        self.turns = [e for e in events if e.kind == "patient_turn_head"]
        self._pose_cache: tuple[bytes, Pose] | None = None

    def position_offset(self, t: float) -> np.ndarray:
        off = np.zeros(3)
        for e in self.translations:
            target = np.asarray(e.params.get("offset", (0.0, 0.0, 0.0)), dtype=float)
            u = (t - e.t_start) / (e.t_end - e.t_start)
            off += target * smoothstep(u)
        for e in self.dodges:
            target = np.asarray(e.params.get("offset", DODGE_OFFSET_DEFAULT), dtype=float)
            u = (t - e.t_start) / (e.t_end - e.t_start)
            off += target * bump(u)
        return off

    def alpha_head(self, t: float) -> float:
        alpha = 0.0
        for e in self.turns:
            u = (t - e.t_start) / (e.t_end - e.t_start)
            alpha += float(e.params.get("angle", 0.0)) * smoothstep(u)
        return alpha

    def cylinder_pose(self, t: float) -> Pose:
        position = self.base_position + self.position_offset(t)
        key = position.tobytes()
        if self._pose_cache is not None and self._pose_cache[0] == key:
            return self._pose_cache[1]
        pose = Pose(position, self.axis_quat)
        self._pose_cache = (key, pose)
        return pose

    def surface_velocity(self, t: float, dt: float) -> np.ndarray:
        if t <= 0.0:
            return np.zeros(3)
        return (self.position_offset(t) - self.position_offset(t - dt)) / dt

    def skeleton(self, t: float, hand_position: np.ndarray) -> pc.Skeleton:
        neck = self.base_position + self.position_offset(t)
        return pc.Skeleton(neck_joint=neck, head_joint=neck + self.head_offset,
                           alpha_head=self.alpha_head(t), hand_position=hand_position)


# ---------------------------------------------------------------------------
# scripted doctor hand
# ---------------------------------------------------------------------------

class HandScript:
    """Doctor's hand: parked at a standby point, or grabbing the probe and
    pulling it along a guide path with a saturated PD force."""

    def __init__(self, standby: np.ndarray, events: list[ScenarioEvent],
                 kp: float = 60.0, kd: float = 25.0, f_sat: float = 20.0):
        self.standby = np.asarray(standby, dtype=float)
        self.kp, self.kd, self.f_sat = float(kp), float(kd), float(f_sat)
        releases = sorted(e.t_start for e in events if e.kind == "hand_release")
        self.grabs = []
        for e in sorted(events, key=lambda e: e.t_start):
            if e.kind not in ("hand_grab", "apply_gel_pause"):
                continue
            end = e.t_end
            for tr in releases:
                if e.t_start < tr < end:
                    end = tr
                    break
            self.grabs.append((e, end))
        self._anchors: dict[int, np.ndarray] = {}

    def _active(self, t: float):
        for i, (e, end) in enumerate(self.grabs):
            if e.t_start <= t < end:
                return i, e
        return None, None

    def update(self, t: float, probe_p: np.ndarray,
               probe_v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Force applied by the hand (base frame, 3-vector) and hand position."""
        i, e = self._active(t)
        if e is None:
            return np.zeros(3), self.standby
        if i not in self._anchors:
            self._anchors[i] = probe_p.copy()
        anchor = self._anchors[i]
        if "constant_force" in e.params:
            f = np.asarray(e.params["constant_force"], dtype=float)
            return f, probe_p.copy()
        if e.kind == "apply_gel_pause":
            target = anchor + np.array([0.0, 0.0, float(e.params.get("lift", GEL_LIFT_DEFAULT))])
        else:
            target = anchor + np.asarray(e.params.get("target_offset", (0.0, 0.0, 0.2)), dtype=float)
        f = self.kp * (target - probe_p) - self.kd * probe_v
        norm = float(np.linalg.norm(f))
        if norm > self.f_sat:
            f *= self.f_sat / norm
        return f, probe_p.copy()


def hand_wrench(t: float, hand: HandScript, probe_pose: Pose,
                probe_twist: Twist) -> tuple[Wrench, np.ndarray]:
    """Doctor-hand wrench (base frame) and hand position at time t."""
    f, pos = hand.update(t, probe_pose.p, probe_twist.v)
    return Wrench(f, np.zeros(3)), pos


# ---------------------------------------------------------------------------
# contact model
# ---------------------------------------------------------------------------

@dataclass
class ContactSurface:
    """Penalty contact with the (moving) neck cylinder. Unilateral: zero
    wrench outside the skin, stiffness plus compression-rate damping inside."""

    radius: float
    length: float
    k_env: float = 5000.0
    d_env: float = 50.0
    pose: Pose = None
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.k_env < 0.0 or self.d_env < 0.0:
            raise ValueError("contact stiffness and damping must be non-negative")


def _contact_force(p: np.ndarray, v: np.ndarray, surface: ContactSurface) -> np.ndarray:
    axis = surface.pose.rotation()[:, 0]
    rel = p - surface.pose.p
    axial = float(rel @ axis)
    if abs(axial) > 0.5 * surface.length:
        return np.zeros(3)
    radial_vec = rel - axial * axis
    dist2 = float(radial_vec @ radial_vec)
    if dist2 >= surface.radius * surface.radius or dist2 < 1e-24:
        return np.zeros(3)
    dist = np.sqrt(dist2)
    n_out = radial_vec / dist
    depth = surface.radius - dist
    pen_rate = -float((v - surface.velocity) @ n_out)
    f_mag = surface.k_env * depth + surface.d_env * max(pen_rate, 0.0)
    return f_mag * n_out


def contact_wrench(probe_pose: Pose, probe_twist: Twist,
                   surface: ContactSurface) -> Wrench:
    """Reaction wrench on the probe tip (base frame); torque-free point contact.

    The stiffness term is continuous at zero depth; the damping term acts
    only while compressing, so separation never produces a sticking force.
    """
    return Wrench(_contact_force(probe_pose.p, probe_twist.v, surface), np.zeros(3))


def probe_axis_force(fe_base: np.ndarray, ee_rotation: np.ndarray) -> float:
    """Pressing force along the probe axis, frame {E}, compression positive."""
    return -float(ee_rotation[:, 2] @ fe_base[:3])


# ---------------------------------------------------------------------------
# scenario configuration
# ---------------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    raw: dict
    dt: float
    duration: float
    seed: int
    initial_q: np.ndarray
    T: float
    N_pts: int
    T_rec: float
    thresholds: mm.Thresholds
    weighting: WeightingParams
    gains: ctl.ImpedanceParams
    q_nominal: np.ndarray
    contact: dict
    patient: dict
    hand: dict
    perception: dict
    events: list[ScenarioEvent]
    contact_overrides_error: bool
    f_max_override: np.ndarray | None

    @classmethod
    def from_dict(cls, doc: dict, n_joints: int = 7) -> "ScenarioConfig":
        task = doc.get("task", {})
        gains_doc = doc.get("gains", {})
        K_gn_val = gains_doc.get("K_gn", 10.0)
        K_gn = (np.diag(np.asarray(K_gn_val, dtype=float))
                if np.ndim(K_gn_val) == 1 else float(K_gn_val) * np.eye(n_joints))
        gains = ctl.ImpedanceParams(
            M_d=np.diag(gains_doc.get("M_d", [5.0, 5.0, 5.0, 0.5, 0.5, 0.5])),
            K_g=np.diag(gains_doc.get("K_g", [400.0, 400.0, 400.0, 20.0, 20.0, 20.0])),
            K_gn=K_gn,
        )
        th_doc = doc.get("thresholds", {})
        w_doc = doc.get("weighting", {})
        events = [ScenarioEvent(e["kind"], float(e["t_start"]), float(e["t_end"]),
                                e.get("params", {})) for e in doc.get("events", [])]
        events.sort(key=lambda e: (e.t_start, e.t_end, e.kind))
        q_nom = np.asarray(gains_doc.get("q_nominal", doc["initial_q"]), dtype=float)
        f_max = doc.get("safety", {}).get("f_max")
        return cls(
            raw=doc,
            dt=float(doc.get("dt_s", 1e-3)),
            duration=float(doc.get("duration_s", 60.0)),
            seed=int(doc.get("seed", 0)),
            initial_q=np.asarray(doc["initial_q"], dtype=float),
            T=float(task.get("T", 30.0)),
            N_pts=int(task.get("N", 100)),
            T_rec=float(doc.get("recovery", {}).get("T_rec", 8.0)),
            thresholds=mm.Thresholds(**{k: float(v) for k, v in th_doc.items()}),
            weighting=WeightingParams(**{k: float(v) for k, v in w_doc.items()}),
            gains=gains,
            q_nominal=q_nom,
            contact=doc.get("contact", {}),
            patient=doc["patient"],
            hand=doc.get("hand", {}),
            perception=doc.get("perception", {}),
            events=events,
            contact_overrides_error=bool(
                doc.get("mode_logic", {}).get("contact_overrides_error", True)),
            f_max_override=None if f_max is None else np.asarray(f_max, dtype=float),
        )

    @classmethod
    def from_json(cls, path: str | Path, n_joints: int = 7) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), n_joints)


# ---------------------------------------------------------------------------
# trajectory provider
# ---------------------------------------------------------------------------

class TrajectoryProvider:
    """Owns the perception pipeline inside a run.

    The point cloud is captured once when the trajectory first becomes
    available (standing in for the pre-scan capture at a non-occlusion
    moment), MLS-smoothed, and stored in capture-scan coordinates. Every tick
    the scan frame follows the scripted skeleton; the plane intersection is
    recomputed whenever the head angle changes (quantized at 1 mrad, i.e.
    sub-0.1 mm trajectory motion), and rigid patient motion just transforms
    the cached curve.
    """

    ALPHA_QUANTUM = 1e-3

    def __init__(self, patient: PatientScript, cfg: ScenarioConfig):
        p = cfg.perception
        self.patient = patient
        self.available_at = float(p.get("trajectory_available_at_s", 0.0))
        self.cloud_count = int(p.get("cloud_count", 4000))
        self.noise_sd = float(p.get("noise_sd", 0.0))
        self.support_radius = float(p.get("support_radius", pc.MLS_SUPPORT_DEFAULT))
        self.slab_half = float(p.get("slab_half", pc.SLAB_HALF_DEFAULT))
        self.skin_offset = float(p.get("skin_offset", pc.SKIN_OFFSET_DEFAULT))
        self.scan_x_range = tuple(p.get("scan_x_range", (0.005, 0.075)))
        self.plane_up = np.asarray(p.get("plane_up", (0.0, 0.0, 1.0)), dtype=float)
        self.filter_pad = float(p.get("filter_pad", 0.02))
        self.N_pts = cfg.N_pts
        self.seed = cfg.seed
        self.weighting = cfg.weighting
        self.capture_pose: Pose | None = None
        self.capture_alpha = 0.0
        self._cloud_capture_scan: np.ndarray | None = None
        self._traj_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._frame_cache: tuple[bytes, float, pc.ScanFrame, int] | None = None
        self._frame_token = 0
        self._pose_cache: dict[tuple[int, int, int], tuple[Pose, np.ndarray]] = {}
        self._identity_frame = pc.ScanFrame(np.eye(3), np.zeros(3))

    def ready(self, t: float) -> bool:
        return t >= self.available_at and self._cloud_capture_scan is not None

    def maybe_capture(self, t: float, sk: pc.Skeleton) -> None:
        if t < self.available_at or self._cloud_capture_scan is not None:
            return
        # scripted capture pose: probe aligned with the cervical axis, the
        # scan plane containing plane_up (the initialization placement)
        x_axis = sk.head_joint - sk.neck_joint
        x_axis = x_axis / np.linalg.norm(x_axis)
        y_ref = self.plane_up - np.dot(self.plane_up, x_axis) * x_axis
        y_ref /= np.linalg.norm(y_ref)
        R_target = np.column_stack([x_axis, y_ref, np.cross(x_axis, y_ref)])
        R0 = R_target @ rotation_x(pc.ALPHA_ARTERY - sk.alpha_head)
        self.capture_pose = Pose(sk.neck_joint.copy(), quat_from_matrix(R0))
        self.capture_alpha = sk.alpha_head

        frame = pc.scan_frame_from_skeleton(sk, self.capture_pose)
        cyl_pose = self.patient.cylinder_pose(t)
        cloud = pc.synth_neck_cloud(self.patient.radius, self.patient.length,
                                    cyl_pose, self.noise_sd, self.cloud_count,
                                    seed=self.seed)
        seg = pc.segment_cylinder(
            cloud, frame, self.weighting.r_p,
            x_top=self.weighting.x_top + self.filter_pad,
            x_bottom=self.weighting.x_bottom - self.filter_pad)
        smoothed = pc.mls_smooth(seg, self.support_radius, poly_degree=2)
        self._cloud_capture_scan = frame.to_scan(smoothed.points)
        log.info("trajectory capture at t=%.3f: %d cloud points, %d after "
                 "segmentation", t, len(cloud), len(seg))

    def frame(self, sk: pc.Skeleton) -> pc.ScanFrame:
        key = (sk.neck_joint.tobytes(), sk.alpha_head)
        cached = self._frame_cache
        if cached is not None and cached[0] == key[0] and cached[1] == key[1]:
            return cached[2]
        frame = pc.scan_frame_from_skeleton(sk, self.capture_pose)
        self._frame_token += 1
        self._frame_cache = (key[0], key[1], frame, self._frame_token)
        return frame

    def _scan_poses(self, alpha_head: float) -> tuple[np.ndarray, np.ndarray]:
        """Trajectory in current-scan-frame coordinates (positions, quats)."""
        key = int(round((alpha_head - self.capture_alpha) / self.ALPHA_QUANTUM))
        hit = self._traj_cache.get(key)
        if hit is not None:
            return hit
        delta = key * self.ALPHA_QUANTUM
        pts = self._cloud_capture_scan @ rotation_x(delta)
        traj = pc.generate_trajectory(
            pc.PointCloud(pts), self._identity_frame, self.N_pts,
            skin_offset=self.skin_offset, slab_half=self.slab_half,
            x_range=self.scan_x_range, support_radius=self.support_radius)
        positions = traj.positions()
        quats = np.array([p.r for p in traj.poses])
        self._traj_cache[key] = (positions, quats)
        return positions, quats

    def pose_at(self, index: int, frame: pc.ScanFrame,
                alpha_head: float) -> tuple[Pose, np.ndarray]:
        """Base-frame pose (and its rotation matrix) of the 1-based
        trajectory point `index`."""
        alpha_key = int(round((alpha_head - self.capture_alpha) / self.ALPHA_QUANTUM))
        cache_key = (index, alpha_key, self._frame_token)
        hit = self._pose_cache.get(cache_key)
        if hit is not None:
            return hit
        positions, quats = self._scan_poses(alpha_head)
        i = index - 1
        p = frame.to_base(positions[i])[0]
        R = frame.rotation @ matrix_from_quat(quats[i])
        result = (Pose(p, quat_from_matrix(R)), R)
        if len(self._pose_cache) > 4096:
            self._pose_cache.clear()
        self._pose_cache[cache_key] = result
        return result


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------

_SCALARS = ["t", "a_h", "a_p", "a_f", "f_z", "err", "hand_dist", "t_p",
            "phase", "res_task", "res_null"]
_INTS = ["mode", "traj_index", "near_singular", "torque_clamped", "limit_clamped"]
_VECTORS = {"kd": 6, "xerr": 6, "xerr_dot": 6, "xd_p": 3, "xd_q": 4, "fe": 6,
            "u": 7, "q": 7, "dq": 7, "ddq": 7, "q_dn": 7}

MODE_CODES = {mm.Mode.WAITING: 0, mm.Mode.SCANNING: 1,
              mm.Mode.RECOVERY: 2, mm.Mode.HUMAN_GUIDED: 3}
MODE_NAMES = {v: k.value for k, v in MODE_CODES.items()}


@dataclass
class RunResult:
    """Arrays logged per tick plus the run summary."""

    data: dict[str, np.ndarray]
    summary: dict
    transitions: list[tuple[float, str, str]]

    def __len__(self) -> int:
        return len(self.data["t"])

    def bitwise_equal(self, other: "RunResult") -> bool:
        if set(self.data) != set(other.data):
            return False
        return all(np.array_equal(self.data[k], other.data[k], equal_nan=True)
                   for k in self.data)

    def to_dataframe(self, extended: bool = False):
        import pandas as pd
        cols: dict[str, np.ndarray] = {}
        for name in ("t", "mode", "a_h", "a_p", "a_f"):
            cols[name] = self.data[name]
        for j in range(6):
            cols[f"kd{j + 1}"] = self.data["kd"][:, j]
        for j in range(6):
            cols[f"xerr{j + 1}"] = self.data["xerr"][:, j]
        for name, width in (("xd_p", 3), ("xd_q", 4)):
            for j in range(width):
                cols[f"{name}{j + 1}"] = self.data[name][:, j]
        cols["f_z"] = self.data["f_z"]
        for j in range(7):
            cols[f"u{j + 1}"] = self.data["u"][:, j]
        cols["res_task"] = self.data["res_task"]
        cols["res_null"] = self.data["res_null"]
        cols["t_p"] = self.data["t_p"]
        cols["phase"] = self.data["phase"]
        cols["traj_index"] = self.data["traj_index"]
        cols["err"] = self.data["err"]
        cols["hand_dist"] = self.data["hand_dist"]
        cols["near_singular"] = self.data["near_singular"]
        cols["torque_clamped"] = self.data["torque_clamped"]
        if extended:
            for name in ("xerr_dot", "fe", "q", "dq", "ddq", "q_dn"):
                for j in range(self.data[name].shape[1]):
                    cols[f"{name}{j + 1}"] = self.data[name][:, j]
            cols["limit_clamped"] = self.data["limit_clamped"]
        df = pd.DataFrame(cols)
        df["mode"] = df["mode"].map(MODE_NAMES)
        return df

    def write(self, out_dir: str | Path, extended: bool = False) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_dataframe(extended=extended).to_csv(
            out / "run.csv", index=False, float_format="%.17g")
        with open(out / "summary.json", "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def run_scenario(model: RobotModel, cfg: ScenarioConfig) -> RunResult:
    """Execute the full pipeline tick by tick until the scanning task
    completes, the duration cap is reached, or the safety monitor aborts."""
    dt = cfg.dt
    n_max = int(round(cfg.duration / dt)) + 1
    n = model.n
    f_max = cfg.f_max_override if cfg.f_max_override is not None else model.f_max

    patient = PatientScript(
        base_position=cfg.patient["base_position"],
        head_offset=cfg.patient.get("head_offset", (0.2, 0.0, 0.0)),
        radius=cfg.patient["cylinder_radius_m"],
        length=cfg.patient.get("cylinder_length_m", 0.4),
        events=cfg.events)
    hand = HandScript(
        standby=cfg.hand.get("standby_position", (0.2, -0.7, 0.5)),
        events=cfg.events,
        kp=cfg.hand.get("kp", 60.0), kd=cfg.hand.get("kd", 25.0),
        f_sat=cfg.hand.get("f_sat", 20.0))
    surface = ContactSurface(
        radius=patient.radius, length=patient.length,
        k_env=cfg.contact.get("k_env", 5000.0),
        d_env=cfg.contact.get("d_env", 50.0),
        pose=patient.cylinder_pose(0.0))
    provider = TrajectoryProvider(patient, cfg)
    pushes = [e for e in cfg.events if e.kind == "patient_push"]
    any_patient_motion = bool(patient.translations or patient.dodges)

    params = cfg.gains
    th = cfg.thresholds
    progress = mm.TaskProgress(T=cfg.T, N_pts=cfg.N_pts, dt=dt)
    tracker = mm.ModeTracker()
    state = JointState(cfg.initial_q.copy(), np.zeros(n))

    # all gain matrices are diagonal; work with their diagonals directly
    Kg_diag = np.diag(params.K_g)
    Kgn_diag = np.diag(params.K_gn)
    Cd_diag = np.diag(params.C_d)
    Kvn_diag = np.diag(params.K_vn)
    Md_diag = np.diag(params.M_d)
    Mdinv_diag = 1.0 / Md_diag
    eye_n = np.eye(n)

    data: dict[str, np.ndarray] = {}
    for name in _SCALARS:
        data[name] = np.full(n_max, np.nan)
    for name in _INTS:
        data[name] = np.zeros(n_max, dtype=np.int64)
    for name, width in _VECTORS.items():
        data[name] = np.full((n_max, width), np.nan)

    frozen_pose: Pose | None = None
    frozen_R: np.ndarray | None = None
    frozen_q: np.ndarray | None = None
    recovery_plan: planner.MinJerkPlan | None = None
    recovery_q_dn: np.ndarray | None = None
    recovery_ticks = 0
    emergency = False
    emergency_t = None
    limit_events = 0
    torque_events = 0

    k = 0
    while k < n_max:
        t = k * dt
        q, dq = state.q, state.dq

        T_ee, J, M, C, g, jdot_dq = rc._dyn_terms(
            model.fixed_transforms, model.axes, model.tool_transform, q, dq,
            model.masses, model.coms, model.inertias, model.gravity,
            rc.FD_STEP_CORIOLIS, rc.FD_STEP_JDOT)
        p_ee = T_ee[:3, 3]
        R_ee = T_ee[:3, :3]
        twist6 = J @ dq
        v_ee = twist6[:3]

        # scripted world
        if any_patient_motion or k == 0:
            surface.pose = patient.cylinder_pose(t)
            surface.velocity = patient.surface_velocity(t, dt)
        hand_f, hand_pos = hand.update(t, p_ee, v_ee)
        sk = patient.skeleton(t, hand_pos)
        provider.maybe_capture(t, sk)
        has_traj = provider.ready(t)
        frame = provider.frame(sk) if has_traj else None

        fe6 = np.zeros(6)
        fe6[:3] = _contact_force(p_ee, v_ee, surface) + hand_f
        for e in pushes:
            if e.active(t):
                axis = surface.pose.rotation()[:, 0]
                rel = p_ee - surface.pose.p
                radial = rel - (rel @ axis) * axis
                norm = float(np.linalg.norm(radial))
                direction = radial / norm if norm > 1e-9 else np.array([0.0, 0.0, 1.0])
                fe6[:3] += float(e.params.get("force_n", PUSH_FORCE_DEFAULT)) * direction

        # safety monitor
        if np.any(np.abs(fe6) > f_max):
            emergency = True
            emergency_t = t
        f_z = probe_axis_force(fe6, R_ee)

        # weighting factors
        d_h = hand_pos - p_ee
        hand_dist = float(np.linalg.norm(d_h))
        a_h = basic_b(hand_dist / cfg.weighting.r_h)
        if has_traj:
            d_p = frame.rotation.T @ (p_ee - frame.origin)
            a_p = compute_a_p(d_p, cfg.weighting)
        else:
            a_p = 0.0
        a_f = compute_a_f(f_z, cfg.weighting)
        w = WeightingFactors(a_h, a_p, a_f)

        if has_traj:
            idx = mm.trajectory_index(progress.t_p, cfg.T, cfg.N_pts)
            scan_target, scan_target_R = provider.pose_at(idx, frame, sk.alpha_head)
            derr = p_ee - scan_target.p
            err = float(np.sqrt(derr @ derr))
        else:
            idx = 0
            scan_target = scan_target_R = None
            err = float("inf")

        mode = mm.select_mode(w, err, has_traj, th, tracker.mode,
                              cfg.contact_overrides_error)
        changed = tracker.update(mode, t)
        probe_pose: Pose | None = None
        if changed or k == 0:
            probe_pose = Pose(p_ee.copy(), quat_from_matrix(R_ee))
            if mode is mm.Mode.WAITING or k == 0:
                frozen_pose = probe_pose
                frozen_R = R_ee.copy()
                frozen_q = q.copy()
            if mode is mm.Mode.RECOVERY:
                recovery_plan = planner.MinJerkPlan(
                    t_i=t, T_rec=cfg.T_rec, x_i=probe_pose,
                    target_provider=_recovery_target(provider, progress, cfg, patient))
                recovery_q_dn = q.copy()
                recovery_ticks = 0

        # per-mode desired state
        kd_diag = (1.0 - a_h) * (1.0 - a_f) * Kg_diag
        kdn_diag = (1.0 - a_h) * (1.0 - a_f) * Kgn_diag
        xd_dot6 = None
        xd_ddot6 = None
        if mode is mm.Mode.SCANNING:
            x_d, x_d_R = scan_target, scan_target_R
            q_dn = cfg.q_nominal
        elif mode is mm.Mode.RECOVERY:
            x_d = recovery_plan.pose(t)
            x_d_R = x_d.rotation()
            xd_dot6 = recovery_plan.velocity(t).as_vector()
            xd_ddot6 = recovery_plan.acceleration(t)
            data["phase"][k] = planner.phase(t, recovery_plan.t_i, recovery_plan.T_rec)
            if recovery_ticks % mm.QDN_RESAMPLE_CYCLES == 0:
                recovery_q_dn = q.copy()
            recovery_ticks += 1
            q_dn = recovery_q_dn
        elif mode is mm.Mode.HUMAN_GUIDED:
            if probe_pose is None:
                probe_pose = Pose(p_ee.copy(), quat_from_matrix(R_ee))
            x_d, x_d_R = probe_pose, R_ee
            q_dn = q
        else:  # WAITING
            x_d, x_d_R = frozen_pose, frozen_R
            q_dn = frozen_q

        # control law (all gain matrices diagonal)
        xerr = np.empty(6)
        xerr[:3] = p_ee - x_d.p
        xerr[3:] = rotvec_from_matrix(R_ee @ x_d_R.T)
        xerr_dot = twist6 if xd_dot6 is None else twist6 - xd_dot6
        J_pinv, near_singular = rc.pseudoinverse(J)
        N = eye_n - J_pinv @ J
        task = -Mdinv_diag * (Cd_diag * xerr_dot + kd_diag * xerr) - jdot_dq
        if xd_ddot6 is not None:
            task = task + xd_ddot6
        qerr = q - q_dn
        qdd_c = J_pinv @ task + N @ (-Kvn_diag * dq - kdn_diag * qerr)
        u_raw = M @ qdd_c + C @ dq + g - J.T @ fe6 + M @ (J_pinv @ (Mdinv_diag * fe6))
        u = np.clip(u_raw, -model.torque_limits, model.torque_limits)
        torque_clamped = bool(np.any(u != u_raw))
        torque_events += int(torque_clamped)

        # plant
        qdd = np.linalg.solve(M, u + J.T @ fe6 - C @ dq - g)
        res_null = float(np.linalg.norm(N @ (qdd + Kvn_diag * dq + kdn_diag * qerr)))

        # log
        data["t"][k] = t
        data["mode"][k] = MODE_CODES[mode]
        data["a_h"][k], data["a_p"][k], data["a_f"][k] = a_h, a_p, a_f
        data["f_z"][k] = f_z
        data["err"][k] = err if np.isfinite(err) else np.nan
        data["hand_dist"][k] = hand_dist
        data["t_p"][k] = progress.t_p
        data["res_null"][k] = res_null
        data["traj_index"][k] = idx
        data["near_singular"][k] = int(near_singular)
        data["torque_clamped"][k] = int(torque_clamped)
        data["kd"][k] = kd_diag
        data["xerr"][k] = xerr
        data["xerr_dot"][k] = xerr_dot
        data["xd_p"][k] = x_d.p
        data["xd_q"][k] = x_d.r
        data["fe"][k] = fe6
        data["u"][k] = u
        data["q"][k] = q
        data["dq"][k] = dq
        data["ddq"][k] = qdd
        data["q_dn"][k] = q_dn

        # task-space impedance residual for the previous tick, where the
        # finite-difference stencil is valid
        if k >= 2:
            data["res_task"][k - 1] = _task_impedance_residual(data, k - 1, dt, Md_diag, Cd_diag)

        if emergency:
            k += 1
            break

        new_state, events = rc.integrate(model, state, qdd, dt)
        if events:
            limit_events += len(events)
            data["limit_clamped"][k] = len(events)
        state = new_state
        progress = mm.advance_progress(progress, mode)
        k += 1
        if progress.complete:
            break

    n_ticks = k
    for name in data:
        data[name] = data[name][:n_ticks]

    mode_arr = data["mode"]
    durations = {MODE_NAMES[c]: float(np.sum(mode_arr == c) * dt) for c in MODE_NAMES}
    first_visit: list[str] = []
    for c in mode_arr:
        name = MODE_NAMES[int(c)]
        if name not in first_visit:
            first_visit.append(name)
    res_task = data["res_task"]
    finite_err = data["err"][np.isfinite(data["err"])]
    summary = {
        "completed": bool(progress.complete),
        "emergency_stop": emergency,
        "emergency_stop_t": emergency_t,
        "t_final": float(data["t"][-1]) if n_ticks else 0.0,
        "t_p_final": float(progress.t_p),
        "scan_ticks": int(progress.scan_ticks),
        "ticks": int(n_ticks),
        "mode_durations_s": durations,
        "mode_first_visit_order": first_visit,
        "max_abs_f_z": float(np.nanmax(np.abs(data["f_z"]))) if n_ticks else 0.0,
        "max_tracking_err": float(finite_err.max()) if finite_err.size else None,
        "max_res_task": float(np.nanmax(res_task)) if np.any(np.isfinite(res_task)) else None,
        "max_res_null": float(np.nanmax(data["res_null"])) if n_ticks else None,
        "joint_limit_events": int(limit_events),
        "torque_clamp_events": int(torque_events),
        "seed": cfg.seed,
        "dt_s": dt,
    }
    return RunResult(data=data, summary=summary, transitions=list(tracker.transitions))


def _recovery_target(provider: TrajectoryProvider, progress: mm.TaskProgress,
                     cfg: ScenarioConfig, patient: PatientScript):
    """Target provider for a recovery plan: the scanning-trajectory point at
    the frozen progress time, tracked on the live (regenerated) trajectory."""
    t_p = progress.t_p  # frozen: progress does not advance during recovery
    idx = mm.trajectory_index(t_p, cfg.T, cfg.N_pts)
    dummy_hand = np.array([10.0, 10.0, 10.0])

    def target(t: float) -> Pose:
        sk = patient.skeleton(t, dummy_hand)
        frame = provider.frame(sk)
        pose, _ = provider.pose_at(idx, frame, sk.alpha_head)
        return pose

    return target


def _task_impedance_residual(data: dict, c: int, dt: float, Md_diag: np.ndarray,
                   Cd_diag: np.ndarray) -> float:
    """Task-space impedance residual centered at tick c, NaN when the FD
    stencil is invalid (mode change, stepping reference, or guided mode)."""
    modes = data["mode"]
    if modes[c - 1] != modes[c] or modes[c] != modes[c + 1]:
        return np.nan
    mode = int(modes[c])
    if mode == MODE_CODES[mm.Mode.HUMAN_GUIDED]:
        return np.nan
    xd_p = data["xd_p"]
    xd_q = data["xd_q"]
    if mode in (MODE_CODES[mm.Mode.SCANNING], MODE_CODES[mm.Mode.WAITING]):
        # discrete reference: require an identical x_d across the stencil
        if not ((xd_p[c - 1] == xd_p[c]).all() and (xd_p[c] == xd_p[c + 1]).all()
                and (xd_q[c - 1] == xd_q[c]).all() and (xd_q[c] == xd_q[c + 1]).all()):
            return np.nan
    xerr = data["xerr"]
    xerr_ddot = (xerr[c + 1] - 2.0 * xerr[c] + xerr[c - 1]) / dt**2
    r = (Md_diag * xerr_ddot + Cd_diag * data["xerr_dot"][c]
         + data["kd"][c] * xerr[c] - data["fe"][c])
    if mode == MODE_CODES[mm.Mode.RECOVERY]:
        # the commanded angular velocity is zero by design while the SLERP
        # reference rotates, so only the translation rows are meaningful
        r = r[:3]
    return float(np.linalg.norm(r))
