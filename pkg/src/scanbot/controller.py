"""Impedance control law shared by all interaction modes, plus its probes.

One command acceleration drives every mode: a task-space
resolved-acceleration term shaped by the desired impedance model with
time-varying stiffness, plus a null-space damping/posture term. The final
torque decouples the measured external wrench so the closed loop realizes
the desired impedance exactly under the exact-model assumption.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import robot_core as rc
from .robot_core import JointState, Pose, RobotModel, Twist, Wrench
from .rotations import rotvec_from_matrix
from .weighting import WeightingFactors


def critical_damping(M_d: np.ndarray, K_g: np.ndarray,
                     K_gn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Damping matrices for critical damping, per axis.

    Task space: C_d = 2*sqrt(M_d*K_g). Null space has unit inertia in its
    impedance model, so K_vn = 2*sqrt(K_gn). All inputs diagonal.
    """
    C_d = 2.0 * np.sqrt(np.diag(M_d) * np.diag(K_g))
    K_vn = 2.0 * np.sqrt(np.diag(K_gn))
    return np.diag(C_d), np.diag(K_vn)


@dataclass
class ImpedanceParams:
    """Diagonal impedance gains. C_d and K_vn are derived once from the
    maximum stiffnesses by the critical-damping construction and then held
    constant while K_d(t), K_dn(t) vary."""

    M_d: np.ndarray
    K_g: np.ndarray
    K_gn: np.ndarray
    C_d: np.ndarray | None = None
    K_vn: np.ndarray | None = None

    def __post_init__(self):
        self.M_d = np.asarray(self.M_d, dtype=float)
        self.K_g = np.asarray(self.K_g, dtype=float)
        self.K_gn = np.asarray(self.K_gn, dtype=float)
        for name in ("M_d", "K_g", "K_gn"):
            mat = getattr(self, name)
            if np.abs(mat - np.diag(np.diag(mat))).max() > 0.0:
                raise ValueError(f"{name} must be diagonal")
            if np.any(np.diag(mat) < 0.0):
                raise ValueError(f"{name} must be positive semi-definite")
        if np.any(np.diag(self.M_d) <= 0.0):
            raise ValueError("M_d must be positive definite")
        if self.C_d is None or self.K_vn is None:
            self.C_d, self.K_vn = critical_damping(self.M_d, self.K_g, self.K_gn)
        self.M_d_inv = np.diag(1.0 / np.diag(self.M_d))

    @classmethod
    def defaults(cls, n: int = 7) -> "ImpedanceParams":
        return cls(
            M_d=np.diag([5.0, 5.0, 5.0, 0.5, 0.5, 0.5]),
            K_g=np.diag([400.0, 400.0, 400.0, 20.0, 20.0, 20.0]),
            K_gn=10.0 * np.eye(n),
        )


@dataclass
class ControllerState:
    """Per-tick controller inputs: current stiffness, desired motion, and
    the null-space posture target."""

    K_d: np.ndarray
    K_dn: np.ndarray
    x_d: Pose
    xd_dot: Twist
    xd_ddot: np.ndarray  # 6-vector feedforward acceleration
    q_dn: np.ndarray


def update_stiffness(w: WeightingFactors,
                     params: ImpedanceParams) -> tuple[np.ndarray, np.ndarray]:
    """Continuous stiffness update: K = (1 - a_h)(1 - a_f) * K_max for both
    the task and null space."""
    scale = (1.0 - w.a_h) * (1.0 - w.a_f)
    return scale * params.K_g, scale * params.K_gn


def task_error(x: Pose, x_d: Pose) -> np.ndarray:
    """6-vector pose error: translation difference stacked with the
    axis-angle of the relative rotation, in base-frame coordinates."""
    R_err = x.rotation() @ x_d.rotation().T
    return np.concatenate([x.p - x_d.p, rotvec_from_matrix(R_err)])


def command_acceleration(model: RobotModel, state: JointState,
                         ctrl: ControllerState, params: ImpedanceParams,
                         J: np.ndarray | None = None,
                         jdot_dq: np.ndarray | None = None,
                         x: Pose | None = None) -> tuple[np.ndarray, bool]:
    """Command joint acceleration of the shared control law.

    qdd_c = J+ [xdd_d - M_d^-1 (C_d*xerr_dot + K_d*xerr) - Jdot*dq]
            + N (-K_vn*dq - K_dn*qerr)

    Precomputed J, Jdot*dq and the current pose may be passed in to avoid
    redundant kinematics. Returns (qdd_c, near_singularity_flag).
    """
    q, dq = state.q, state.dq
    if J is None:
        J = rc.jacobian(model, q)
    if jdot_dq is None:
        jdot_dq = rc.jacobian_dot_times_dq(model, q, dq)
    if x is None:
        x = rc.forward_kinematics(model, q)

    xerr = task_error(x, ctrl.x_d)
    xerr_dot = J @ dq - ctrl.xd_dot.as_vector()

    J_pinv, near_singular = rc.pseudoinverse(J)
    N = np.eye(model.n) - J_pinv @ J

    task = ctrl.xd_ddot - params.M_d_inv @ (params.C_d @ xerr_dot + ctrl.K_d @ xerr) - jdot_dq
    qerr = q - ctrl.q_dn
    null = -params.K_vn @ dq - ctrl.K_dn @ qerr
    return J_pinv @ task + N @ null, near_singular


def control_torque(model: RobotModel, state: JointState, qdd_c: np.ndarray,
                   f_e: Wrench, params: ImpedanceParams,
                   J: np.ndarray | None = None,
                   M: np.ndarray | None = None,
                   C: np.ndarray | None = None,
                   g: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Resolved-acceleration torque with external-force decoupling:

    u = M*qdd_c + C*dq + g - J'f_e + M*J+*M_d^-1*f_e

    The wrench must be expressed in the base frame. Output is clamped to the
    model torque limits; the returned flag reports whether clamping occurred.
    """
    if f_e.frame != "base":
        raise ValueError("control_torque expects the external wrench in the base frame")
    q, dq = state.q, state.dq
    if J is None:
        J = rc.jacobian(model, q)
    if M is None:
        M = rc.mass_matrix(model, q)
    if C is None:
        C = rc.coriolis_matrix(model, q, dq)
    if g is None:
        g = rc.gravity(model, q)
    fe6 = f_e.as_vector()
    J_pinv, _ = rc.pseudoinverse(J)
    u = M @ qdd_c + C @ dq + g - J.T @ fe6 + M @ (J_pinv @ (params.M_d_inv @ fe6))
    return rc.clip_torques(model, u)


def null_space_residual(model: RobotModel, state: JointState, qdd: np.ndarray,
                        K_vn: np.ndarray, K_dn: np.ndarray, qerr: np.ndarray,
                        N: np.ndarray | None = None) -> np.ndarray:
    """Verification probe of the null-space impedance model:
    N (qdd + K_vn*dq + K_dn*qerr), expected ~0 in the exact-model closed loop."""
    if N is None:
        N = rc.null_projector(rc.jacobian(model, state.q))
    return N @ (qdd + K_vn @ state.dq + K_dn @ qerr)


def task_space_residual(xerr_ddot: np.ndarray, xerr_dot: np.ndarray,
                        xerr: np.ndarray, fe6: np.ndarray, K_d: np.ndarray,
                        params: ImpedanceParams) -> float:
    """Norm of the task-space impedance residual
    M_d*xerr_ddot + C_d*xerr_dot + K_d*xerr - f_e."""
    r = params.M_d @ xerr_ddot + params.C_d @ xerr_dot + K_d @ xerr - fe6
    return float(np.linalg.norm(r))
