"""Kinematics and dynamics of a redundant serial manipulator.

The chain is described joint by joint: a fixed transform from the previous
link frame to the joint frame, followed by a rotation of the joint angle
about a local axis. Link inertial data (mass, COM, rotational inertia) are
expressed in the link frame that results after the joint rotation.

All heavy numerical kernels are numba-compiled; everything here is a pure
function of its inputs and safe to call from multiple threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .rotations import matrix_from_quat, quat_from_matrix, quat_normalize

GRAVITY_DEFAULT = np.array([0.0, 0.0, -9.81])

# finite-difference steps: Coriolis dM/dq and Jdot*dq drift term
FD_STEP_CORIOLIS = 1e-5
FD_STEP_JDOT = 1e-6

# damped least-squares pseudoinverse: damping ramps in below this sigma_min
SINGULARITY_THRESHOLD = 0.05
DAMPING_MAX = 0.05


# ---------------------------------------------------------------------------
# state and geometry containers
# ---------------------------------------------------------------------------

@dataclass
class JointState:
    """Joint angles q (rad) and velocities dq (rad/s)."""

    q: np.ndarray
    dq: np.ndarray

    def copy(self) -> "JointState":
        return JointState(self.q.copy(), self.dq.copy())


@dataclass
class Pose:
    """Position p (m) and orientation r as a unit quaternion [w,x,y,z]."""

    p: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.r = quat_normalize(np.asarray(self.r, dtype=float))

    def rotation(self) -> np.ndarray:
        return matrix_from_quat(self.r)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.p
        return T

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        return cls(T[:3, 3].copy(), quat_from_matrix(T[:3, :3]))

    def copy(self) -> "Pose":
        return Pose(self.p.copy(), self.r.copy())


@dataclass
class Twist:
    """Linear velocity v (m/s) and angular velocity w (rad/s), base frame."""

    v: np.ndarray
    w: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))


@dataclass
class Wrench:
    """Force f (N) and torque tau (N*m) with an explicit frame tag."""

    f: np.ndarray
    tau: np.ndarray
    frame: str = "base"  # "base" or "ee"

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.f, self.tau])

    @classmethod
    def zero(cls, frame: str = "base") -> "Wrench":
        return cls(np.zeros(3), np.zeros(3), frame)

    def in_base(self, ee_pose: Pose) -> "Wrench":
        """Express this wrench in the base frame (rotation only; the wrench
        acts at the end-effector origin in both frames)."""
        if self.frame == "base":
            return self
        R = ee_pose.rotation()
        return Wrench(R @ self.f, R @ self.tau, "base")

    def in_ee(self, ee_pose: Pose) -> "Wrench":
        if self.frame == "ee":
            return self
        R = ee_pose.rotation()
        return Wrench(R.T @ self.f, R.T @ self.tau, "ee")


# ---------------------------------------------------------------------------
# robot model
# ---------------------------------------------------------------------------

def _mdh_fixed_transform(alpha: float, a: float, d: float, theta0: float) -> np.ndarray:
    """Fixed part of a modified-DH joint transform:
    RotX(alpha) * TransX(a) * TransZ(d) * RotZ(theta0)."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    ct, st = np.cos(theta0), np.sin(theta0)
    return np.array([
        [ct, -st, 0.0, a],
        [st * ca, ct * ca, -sa, -sa * d],
        [st * sa, ct * sa, ca, ca * d],
        [0.0, 0.0, 0.0, 1.0],
    ])


@dataclass
class RobotModel:
    """An n-joint (n > 6) revolute chain with inertial data and safety limits.

    Attributes:
        fixed_transforms: (n,4,4) transform from link i-1 frame to joint i frame.
        axes: (n,3) unit joint axis in the joint frame.
        tool_transform: (4,4) last link frame to probe-tip frame.
        masses: (n,) link masses, kg.
        coms: (n,3) link COM in the link frame, m.
        inertias: (n,3,3) rotational inertia about the COM, link frame, kg*m^2.
        joint_limits: (n,2) position limits, rad.
        torque_limits: (n,) absolute torque limits, N*m.
        f_max: (6,) per-axis safety limit on the external wrench (N, N*m).
    """

    name: str
    fixed_transforms: np.ndarray
    axes: np.ndarray
    tool_transform: np.ndarray
    masses: np.ndarray
    coms: np.ndarray
    inertias: np.ndarray
    joint_limits: np.ndarray
    torque_limits: np.ndarray
    f_max: np.ndarray
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY_DEFAULT.copy())

    def __post_init__(self):
        for attr in ("fixed_transforms", "axes", "tool_transform", "masses",
                     "coms", "inertias", "joint_limits", "torque_limits",
                     "f_max", "gravity"):
            setattr(self, attr, np.ascontiguousarray(getattr(self, attr), dtype=float))
        n = self.n
        if n <= 6:
            raise ValueError(f"redundancy requires n > 6 joints, got {n}")
        if self.fixed_transforms.shape != (n, 4, 4):
            raise ValueError("fixed_transforms must have shape (n,4,4)")
        if np.any(self.masses <= 0.0):
            raise ValueError("all link masses must be positive")
        for i in range(n):
            I = self.inertias[i]
            if not np.allclose(I, I.T, atol=1e-12):
                raise ValueError(f"inertia tensor of link {i} is not symmetric")
            if np.min(np.linalg.eigvalsh(I)) <= 0.0:
                raise ValueError(f"inertia tensor of link {i} is not positive definite")
            norm = np.linalg.norm(self.axes[i])
            if abs(norm - 1.0) > 1e-9:
                raise ValueError(f"joint axis {i} is not a unit vector")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("joint limits must satisfy lower < upper")
        if np.any(self.torque_limits <= 0.0) or np.any(self.f_max <= 0.0):
            raise ValueError("torque limits and f_max must be positive")

    @property
    def n(self) -> int:
        return int(self.axes.shape[0])

    @classmethod
    def from_dict(cls, doc: dict) -> "RobotModel":
        links = doc["links"]
        n = len(links)
        fixed = np.empty((n, 4, 4))
        axes = np.empty((n, 3))
        masses = np.empty(n)
        coms = np.empty((n, 3))
        inertias = np.empty((n, 3, 3))
        for i, link in enumerate(links):
            fixed[i] = _mdh_fixed_transform(
                link["alpha"], link["a"], link["d"], link.get("theta0", 0.0))
            axes[i] = link.get("axis", [0.0, 0.0, 1.0])
            masses[i] = link["mass"]
            coms[i] = link["com"]
            inertias[i] = link["inertia"]
        tool = np.eye(4)
        tool_doc = doc.get("tool", {})
        tool[:3, 3] = tool_doc.get("xyz", [0.0, 0.0, 0.0])
        return cls(
            name=doc.get("name", "robot"),
            fixed_transforms=fixed,
            axes=axes,
            tool_transform=tool,
            masses=masses,
            coms=coms,
            inertias=inertias,
            joint_limits=np.asarray(doc["joint_limits"], dtype=float),
            torque_limits=np.asarray(doc["torque_limits"], dtype=float),
            f_max=np.asarray(doc["f_max"], dtype=float),
            gravity=np.asarray(doc.get("gravity", GRAVITY_DEFAULT), dtype=float),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "RobotModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def reference(cls) -> "RobotModel":
        """The bundled 7-DOF reference chain (repo constants)."""
        from .data import data_path
        return cls.from_json(data_path("reference_7dof.json"))

    def check_q(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise ValueError(f"expected q of length {self.n}, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise ValueError("q contains non-finite entries")
        return q


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _axis_rotation(axis, angle):
    x, y, z = axis[0], axis[1], axis[2]
    c = np.cos(angle)
    s = np.sin(angle)
    C = 1.0 - c
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * C
    R[0, 1] = x * y * C - z * s
    R[0, 2] = x * z * C + y * s
    R[1, 0] = y * x * C + z * s
    R[1, 1] = c + y * y * C
    R[1, 2] = y * z * C - x * s
    R[2, 0] = z * x * C - y * s
    R[2, 1] = z * y * C + x * s
    R[2, 2] = c + z * z * C
    return R


@njit(cache=True)
def _fk_chain(fixed, axes, tool, q):
    """Walk the chain; returns link transforms, joint axes/origins in base
    frame, and the end-effector transform."""
    n = q.shape[0]
    T_links = np.empty((n, 4, 4))
    joint_axes = np.empty((n, 3))
    joint_origins = np.empty((n, 3))
    T = np.eye(4)
    for i in range(n):
        Tj = T @ fixed[i]
        for r in range(3):
            joint_origins[i, r] = Tj[r, 3]
            joint_axes[i, r] = (Tj[r, 0] * axes[i, 0] + Tj[r, 1] * axes[i, 1]
                                + Tj[r, 2] * axes[i, 2])
        R = _axis_rotation(axes[i], q[i])
        Ti = np.empty((4, 4))
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += Tj[r, k] * R[k, c]
                Ti[r, c] = acc
            Ti[r, 3] = Tj[r, 3]
        Ti[3, 0] = 0.0
        Ti[3, 1] = 0.0
        Ti[3, 2] = 0.0
        Ti[3, 3] = 1.0
        T_links[i] = Ti
        T = Ti
    T_ee = T @ tool
    return T_links, joint_axes, joint_origins, T_ee


@njit(cache=True)
def _jacobian(fixed, axes, tool, q):
    T_links, z, p, T_ee = _fk_chain(fixed, axes, tool, q)
    n = q.shape[0]
    J = np.zeros((6, n))
    for i in range(n):
        rx = T_ee[0, 3] - p[i, 0]
        ry = T_ee[1, 3] - p[i, 1]
        rz = T_ee[2, 3] - p[i, 2]
        J[0, i] = z[i, 1] * rz - z[i, 2] * ry
        J[1, i] = z[i, 2] * rx - z[i, 0] * rz
        J[2, i] = z[i, 0] * ry - z[i, 1] * rx
        J[3, i] = z[i, 0]
        J[4, i] = z[i, 1]
        J[5, i] = z[i, 2]
    return J, T_ee


@njit(cache=True)
def _mass_matrix(fixed, axes, q, masses, coms, inertias):
    """Composite link-Jacobian mass matrix: sum over links of
    m*Jv'Jv + Jw'(R I R')Jw. Strictly positive definite for valid models."""
    n = q.shape[0]
    tool = np.eye(4)
    T_links, z, p, _ = _fk_chain(fixed, axes, tool, q)
    M = np.zeros((n, n))
    Jv = np.empty((3, n))
    Jw = np.empty((3, n))
    W = np.empty((3, n))
    Iw = np.empty((3, 3))
    tmp = np.empty((3, 3))
    for i in range(n):
        Ti = T_links[i]
        cx = Ti[0, 3] + Ti[0, 0] * coms[i, 0] + Ti[0, 1] * coms[i, 1] + Ti[0, 2] * coms[i, 2]
        cy = Ti[1, 3] + Ti[1, 0] * coms[i, 0] + Ti[1, 1] * coms[i, 1] + Ti[1, 2] * coms[i, 2]
        cz = Ti[2, 3] + Ti[2, 0] * coms[i, 0] + Ti[2, 1] * coms[i, 1] + Ti[2, 2] * coms[i, 2]
        # Iw = R I R^T
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += Ti[r, k] * inertias[i, k, c]
                tmp[r, c] = acc
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += tmp[r, k] * Ti[c, k]
                Iw[r, c] = acc
        for j in range(i + 1):
            rx = cx - p[j, 0]
            ry = cy - p[j, 1]
            rz = cz - p[j, 2]
            Jv[0, j] = z[j, 1] * rz - z[j, 2] * ry
            Jv[1, j] = z[j, 2] * rx - z[j, 0] * rz
            Jv[2, j] = z[j, 0] * ry - z[j, 1] * rx
            Jw[0, j] = z[j, 0]
            Jw[1, j] = z[j, 1]
            Jw[2, j] = z[j, 2]
        for j in range(i + 1):
            for r in range(3):
                W[r, j] = (Iw[r, 0] * Jw[0, j] + Iw[r, 1] * Jw[1, j]
                           + Iw[r, 2] * Jw[2, j])
        m = masses[i]
        for a in range(i + 1):
            for b in range(a, i + 1):
                term = m * (Jv[0, a] * Jv[0, b] + Jv[1, a] * Jv[1, b] + Jv[2, a] * Jv[2, b])
                term += Jw[0, a] * W[0, b] + Jw[1, a] * W[1, b] + Jw[2, a] * W[2, b]
                M[a, b] += term
    for a in range(n):
        for b in range(a + 1, n):
            M[b, a] = M[a, b]
    return M


@njit(cache=True)
def _gravity(fixed, axes, q, masses, coms, gvec):
    """g_j = -sum_i m_i * Jv_i[:,j] . gvec (gradient of the potential)."""
    n = q.shape[0]
    tool = np.eye(4)
    T_links, z, p, _ = _fk_chain(fixed, axes, tool, q)
    g = np.zeros(n)
    for i in range(n):
        Ti = T_links[i]
        cx = Ti[0, 3] + Ti[0, 0] * coms[i, 0] + Ti[0, 1] * coms[i, 1] + Ti[0, 2] * coms[i, 2]
        cy = Ti[1, 3] + Ti[1, 0] * coms[i, 0] + Ti[1, 1] * coms[i, 1] + Ti[1, 2] * coms[i, 2]
        cz = Ti[2, 3] + Ti[2, 0] * coms[i, 0] + Ti[2, 1] * coms[i, 1] + Ti[2, 2] * coms[i, 2]
        m = masses[i]
        for j in range(i + 1):
            rx = cx - p[j, 0]
            ry = cy - p[j, 1]
            rz = cz - p[j, 2]
            jvx = z[j, 1] * rz - z[j, 2] * ry
            jvy = z[j, 2] * rx - z[j, 0] * rz
            jvz = z[j, 0] * ry - z[j, 1] * rx
            g[j] -= m * (jvx * gvec[0] + jvy * gvec[1] + jvz * gvec[2])
    return g


@njit(cache=True)
def _coriolis(fixed, axes, q, dq, masses, coms, inertias, h):
    """Coriolis matrix from Christoffel symbols of M, with dM/dq by central
    finite difference. (M_dot - 2C) is then skew-symmetric by construction."""
    n = q.shape[0]
    dM = np.empty((n, n, n))
    qp = q.copy()
    inv2h = 1.0 / (2.0 * h)
    for k in range(n):
        qp[k] = q[k] + h
        Mp = _mass_matrix(fixed, axes, qp, masses, coms, inertias)
        qp[k] = q[k] - h
        Mm = _mass_matrix(fixed, axes, qp, masses, coms, inertias)
        qp[k] = q[k]
        for a in range(n):
            for b in range(n):
                dM[k, a, b] = (Mp[a, b] - Mm[a, b]) * inv2h
    C = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += (dM[k, i, j] + dM[j, i, k] - dM[i, j, k]) * dq[k]
            C[i, j] = 0.5 * acc
    return C


@njit(cache=True)
def _jdot_times_dq(fixed, axes, tool, q, dq, h):
    qp = q + h * dq
    qm = q - h * dq
    Jp, _ = _jacobian(fixed, axes, tool, qp)
    Jm, _ = _jacobian(fixed, axes, tool, qm)
    n = q.shape[0]
    out = np.zeros(6)
    inv2h = 1.0 / (2.0 * h)
    for r in range(6):
        acc = 0.0
        for c in range(n):
            acc += (Jp[r, c] - Jm[r, c]) * dq[c]
        out[r] = acc * inv2h
    return out


@njit(cache=True)
def _dyn_terms(fixed, axes, tool, q, dq, masses, coms, inertias, gvec, h_c, h_j):
    """All per-tick dynamics quantities in one call (for the simulation loop)."""
    J, T_ee = _jacobian(fixed, axes, tool, q)
    M = _mass_matrix(fixed, axes, q, masses, coms, inertias)
    C = _coriolis(fixed, axes, q, dq, masses, coms, inertias, h_c)
    g = _gravity(fixed, axes, q, masses, coms, gvec)
    jdot_dq = _jdot_times_dq(fixed, axes, tool, q, dq, h_j)
    return T_ee, J, M, C, g, jdot_dq


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def fk_transform(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Homogeneous base-to-probe-tip transform."""
    q = model.check_q(q)
    _, _, _, T_ee = _fk_chain(model.fixed_transforms, model.axes,
                              model.tool_transform, q)
    return T_ee


def link_transforms(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """(n,4,4) base-frame transforms of every link frame."""
    q = model.check_q(q)
    T_links, _, _, _ = _fk_chain(model.fixed_transforms, model.axes,
                                 model.tool_transform, q)
    return T_links


def potential_energy(model: RobotModel, q: np.ndarray) -> float:
    """Gravitational potential of the chain; gravity(model, q) is its gradient."""
    T_links = link_transforms(model, q)
    U = 0.0
    for i in range(model.n):
        com = T_links[i, :3, :3] @ model.coms[i] + T_links[i, :3, 3]
        U -= model.masses[i] * float(model.gravity @ com)
    return U


def forward_kinematics(model: RobotModel, q: np.ndarray) -> Pose:
    return Pose.from_matrix(fk_transform(model, q))


def jacobian(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Geometric Jacobian, 6 x n: rows 0-2 linear, rows 3-5 angular (base frame)."""
    q = model.check_q(q)
    J, _ = _jacobian(model.fixed_transforms, model.axes, model.tool_transform, q)
    return J


def jacobian_dot_times_dq(model: RobotModel, q: np.ndarray, dq: np.ndarray,
                          h: float = FD_STEP_JDOT) -> np.ndarray:
    """Drift acceleration Jdot(q)*dq, by central finite difference of J along dq."""
    q = model.check_q(q)
    dq = np.asarray(dq, dtype=float)
    return _jdot_times_dq(model.fixed_transforms, model.axes,
                          model.tool_transform, q, dq, h)


def pseudoinverse(J: np.ndarray,
                  sigma_threshold: float = SINGULARITY_THRESHOLD,
                  damping_max: float = DAMPING_MAX) -> tuple[np.ndarray, bool]:
    """Moore-Penrose pseudoinverse of J, damped near singularities.

    Away from singularity (sigma_min > sigma_threshold) this is the exact
    pseudoinverse J'(JJ')^-1. Below the threshold, damped least squares with
    lambda ramping linearly from 0 up to damping_max at sigma_min = 0 keeps
    the output bounded. Returns (J_pinv, near_singular_flag).
    """
    J = np.asarray(J, dtype=float)
    if not np.all(np.isfinite(J)):
        raise ValueError("Jacobian contains non-finite entries")
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    sigma_min = s[-1]
    near_singular = sigma_min <= sigma_threshold
    lam = 0.0
    if near_singular:
        lam = damping_max * (1.0 - sigma_min / sigma_threshold)
    factors = s / (s * s + lam * lam)
    # sigma = 0 with lam = 0 only in the impossible "threshold = 0" setup
    J_pinv = (Vt.T * factors) @ U.T
    return J_pinv, near_singular


def null_projector(J: np.ndarray) -> np.ndarray:
    """N = I - J^+ J using the same (possibly damped) pseudoinverse."""
    J_pinv, _ = pseudoinverse(J)
    n = J.shape[1]
    return np.eye(n) - J_pinv @ J


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    q = model.check_q(q)
    return _mass_matrix(model.fixed_transforms, model.axes, q,
                        model.masses, model.coms, model.inertias)


def coriolis_matrix(model: RobotModel, q: np.ndarray, dq: np.ndarray,
                    h: float = FD_STEP_CORIOLIS) -> np.ndarray:
    q = model.check_q(q)
    dq = np.asarray(dq, dtype=float)
    return _coriolis(model.fixed_transforms, model.axes, q, dq,
                     model.masses, model.coms, model.inertias, h)


def gravity(model: RobotModel, q: np.ndarray) -> np.ndarray:
    q = model.check_q(q)
    return _gravity(model.fixed_transforms, model.axes, q,
                    model.masses, model.coms, model.gravity)


def clip_torques(model: RobotModel, u: np.ndarray) -> tuple[np.ndarray, bool]:
    """Clamp joint torques to the model limits; flags whether clamping occurred."""
    u = np.asarray(u, dtype=float)
    clipped = np.clip(u, -model.torque_limits, model.torque_limits)
    return clipped, bool(np.any(clipped != u))


def forward_dynamics(model: RobotModel, state: JointState, u: np.ndarray,
                     f_e: Wrench | None = None) -> np.ndarray:
    """Joint accelerations: qdd = M^-1 (u + J'f_e - C dq - g).

    Torques outside the model limits are clamped. The external wrench is
    converted to the base frame if tagged otherwise.
    """
    q = model.check_q(state.q)
    dq = np.asarray(state.dq, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(dq))):
        raise ValueError("non-finite torque or velocity input")
    u, _ = clip_torques(model, u)
    M = mass_matrix(model, q)
    C = coriolis_matrix(model, q, dq)
    g = gravity(model, q)
    rhs = u - C @ dq - g
    if f_e is not None:
        fe_base = f_e if f_e.frame == "base" else f_e.in_base(forward_kinematics(model, q))
        rhs = rhs + jacobian(model, q).T @ fe_base.as_vector()
    return np.linalg.solve(M, rhs)


def integrate(model: RobotModel, state: JointState, qdd: np.ndarray,
              dt: float = 1e-3) -> tuple[JointState, list[str]]:
    """Fixed-step semi-implicit Euler with joint-limit clamping.

    dq <- dq + qdd*dt, then q <- q + dq*dt. Joints pushed past a position
    limit are clamped there with their velocity zeroed; each clamp is
    reported in the event list.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    qdd = np.asarray(qdd, dtype=float)
    dq_new = state.dq + qdd * dt
    q_new = state.q + dq_new * dt
    events: list[str] = []
    lo = model.joint_limits[:, 0]
    hi = model.joint_limits[:, 1]
    for j in range(model.n):
        if q_new[j] < lo[j]:
            q_new[j] = lo[j]
            dq_new[j] = 0.0
            events.append(f"joint {j} clamped at lower position limit")
        elif q_new[j] > hi[j]:
            q_new[j] = hi[j]
            dq_new[j] = 0.0
            events.append(f"joint {j} clamped at upper position limit")
    return JointState(q_new, dq_new), events
