"""Synthetic perception: scan reference frame and point-cloud trajectory.

Replaces the physical RGBD pipeline with a scripted skeleton and a sampled
cylinder standing in for the patient's neck. The scan reference frame sits
at the neck joint with its x-axis toward the head joint; the scanning
trajectory is the intersection of the frame's XY plane with the smoothed
surface, displaced a fixed offset under the skin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .robot_core import Pose
from .rotations import quat_from_matrix, rotation_x

log = logging.getLogger(__name__)

ALPHA_ARTERY = np.pi / 3.0
SKIN_OFFSET_DEFAULT = 0.03
SLAB_HALF_DEFAULT = 0.003
MLS_SUPPORT_DEFAULT = 0.025
MIN_SLAB_POINTS = 10
MIN_MLS_NEIGHBORS = 6


@dataclass(frozen=True)
class Skeleton:
    """Tracked joints of the synthetic patient plus the nearest hand marker."""

    neck_joint: np.ndarray
    head_joint: np.ndarray
    alpha_head: float
    hand_position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "neck_joint", np.asarray(self.neck_joint, dtype=float))
        object.__setattr__(self, "head_joint", np.asarray(self.head_joint, dtype=float))
        object.__setattr__(self, "hand_position", np.asarray(self.hand_position, dtype=float))
        if np.linalg.norm(self.head_joint - self.neck_joint) < 1e-9:
            raise ValueError("degenerate skeleton: head joint coincides with neck joint")


@dataclass(frozen=True)
class ScanFrame:
    """Rigid transform of the scan reference frame, expressed in base."""

    rotation: np.ndarray  # 3x3, maps scan coordinates to base
    origin: np.ndarray
    alpha_artery: float = ALPHA_ARTERY

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0.0:
            raise ValueError("scan frame rotation is not a proper rotation")

    def to_scan(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.origin) @ self.rotation

    def to_base(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.rotation.T + self.origin

    def vector_to_base(self, v: np.ndarray) -> np.ndarray:
        return np.atleast_2d(v) @ self.rotation.T


@dataclass
class PointCloud:
    """Points (N,3) in some stated frame; normals ride along when known."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must have shape (N,3)")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite entries")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class ScanTrajectory:
    """N ordered desired probe poses, a fixed offset under the skin."""

    poses: list[Pose]
    skin_offset: float = SKIN_OFFSET_DEFAULT

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.p for p in self.poses])

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t_index,px,py,pz,qw,qx,qy,qz\n")
            for i, pose in enumerate(self.poses, start=1):
                vals = [*pose.p, *pose.r]
                fh.write(f"{i}," + ",".join(f"{v:.17g}" for v in vals) + "\n")


def save_xyz(cloud: PointCloud, path) -> None:
    """One "x y z" triple per line, meters."""
    np.savetxt(path, cloud.points, fmt="%.17g")


def load_xyz(path) -> PointCloud:
    return PointCloud(np.loadtxt(path, dtype=float).reshape(-1, 3))


# ---------------------------------------------------------------------------
# scan reference frame
# ---------------------------------------------------------------------------

def scan_frame_from_skeleton(sk: Skeleton, probe_pose_at_capture: Pose,
                             alpha_artery: float = ALPHA_ARTERY) -> ScanFrame:
    """Scan frame: origin at the neck joint, x-axis toward the head joint,
    rolled about x by (alpha_head - alpha_artery) relative to the capture
    orientation of the probe.

    The capture pose seeds the roll reference: its y-axis, projected
    orthogonal to the cervical axis, defines roll zero. With alpha_head equal
    to alpha_artery the frame is exactly the capture frame re-originated at
    the neck joint (assuming the capture x-axis was aligned with the neck).
    """
    x_axis = sk.head_joint - sk.neck_joint
    x_axis = x_axis / np.linalg.norm(x_axis)
    R0 = probe_pose_at_capture.rotation()
    y_ref = R0[:, 1]
    y_perp = y_ref - np.dot(y_ref, x_axis) * x_axis
    norm = np.linalg.norm(y_perp)
    if norm < 1e-9:
        raise ValueError("capture pose y-axis parallel to the cervical axis")
    y_axis = y_perp / norm
    z_axis = np.cross(x_axis, y_axis)
    R_aligned = np.column_stack([x_axis, y_axis, z_axis])
    R = R_aligned @ rotation_x(sk.alpha_head - alpha_artery)
    return ScanFrame(rotation=R, origin=sk.neck_joint, alpha_artery=alpha_artery)


# ---------------------------------------------------------------------------
# synthetic cloud and segmentation
# ---------------------------------------------------------------------------

def synth_neck_cloud(radius: float, length: float, pose: Pose, noise_sd: float,
                     count: int, seed: int = 0) -> PointCloud:
    """Sample a cylinder surface (axis along the pose's x-axis, centered at
    the pose origin) with Gaussian radial noise. Seeded and reproducible."""
    if radius <= 0.0 or length <= 0.0:
        raise ValueError("cylinder radius and length must be positive")
    if count <= 0:
        raise ValueError("point count must be positive")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5 * length, 0.5 * length, size=count)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    r = radius + (rng.normal(0.0, noise_sd, size=count) if noise_sd > 0.0 else 0.0)
    local = np.column_stack([x, r * np.cos(theta), r * np.sin(theta)])
    R = pose.rotation()
    return PointCloud(local @ R.T + pose.p)


def segment_cylinder(cloud: PointCloud, frame: ScanFrame, r_cyl: float,
                     x_top: float, x_bottom: float) -> PointCloud:
    """Keep points inside the closed cylindrical region of the scan frame:
    sqrt(y^2+z^2) <= r_cyl and x in [x_bottom, x_top]."""
    pts = frame.to_scan(cloud.points)
    radial = np.hypot(pts[:, 1], pts[:, 2])
    keep = (radial <= r_cyl) & (pts[:, 0] >= x_bottom) & (pts[:, 0] <= x_top)
    if not np.any(keep):
        raise ValueError("cylindrical segmentation removed every point (no neck in view)")
    return PointCloud(cloud.points[keep])


# ---------------------------------------------------------------------------
# moving least squares surface
# ---------------------------------------------------------------------------

def _poly_terms(xi: np.ndarray, degree: int) -> np.ndarray:
    """Design-matrix columns for a bivariate polynomial in local coordinates
    xi (..., 2); degree 1 or 2."""
    ones = np.ones(xi.shape[:-1])
    cols = [ones, xi[..., 0], xi[..., 1]]
    if degree >= 2:
        cols += [xi[..., 0] ** 2, xi[..., 0] * xi[..., 1], xi[..., 1] ** 2]
    return np.stack(cols, axis=-1)


class MlsSurface:
    """Moving-least-squares surface over a point set.

    Each query point gets a locally weighted plane (weighted PCA) and a
    weighted polynomial height fit over it; queries project onto the fitted
    patch along the plane normal. Gaussian weights use a bandwidth of half
    the support radius.
    """

    def __init__(self, points: np.ndarray, support_radius: float = MLS_SUPPORT_DEFAULT,
                 poly_degree: int = 2, max_neighbors: int = 60):
        if poly_degree not in (1, 2):
            raise ValueError("poly_degree must be 1 or 2")
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.support_radius = float(support_radius)
        self.poly_degree = int(poly_degree)
        self.max_neighbors = int(max_neighbors)
        self.bandwidth = 0.5 * self.support_radius
        self._tree = cKDTree(self.points)

    def project(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project query points onto the surface.

        Returns (projected (Q,3), normals (Q,3), ok (Q,) bool). Queries with
        fewer than six support neighbors or a degenerate (collinear)
        neighborhood are flagged not-ok and returned unchanged.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        nq = queries.shape[0]
        k = min(self.max_neighbors, self.points.shape[0])
        dist, idx = self._tree.query(queries, k=k)
        if k == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        inside = dist <= self.support_radius
        counts = inside.sum(axis=1)
        ok = counts >= max(MIN_MLS_NEIGHBORS, 3 * self.poly_degree)

        w = np.exp(-((dist / self.bandwidth) ** 2)) * inside
        wsum = np.maximum(w.sum(axis=1), 1e-300)
        nbr = self.points[idx]  # (Q, k, 3)
        centroid = (w[..., None] * nbr).sum(axis=1) / wsum[:, None]
        d = (nbr - centroid[:, None, :]) * inside[..., None]
        cov = np.einsum("qk,qki,qkj->qij", w, d, d) / wsum[:, None, None]
        evals, evecs = np.linalg.eigh(cov)  # ascending
        # collinear neighborhoods have two near-zero eigenvalues
        ok &= evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], 1e-30)

        normal0 = evecs[:, :, 0]
        # consistent local tangent basis
        seed = np.zeros_like(normal0)
        seed[np.arange(nq), np.argmin(np.abs(normal0), axis=1)] = 1.0
        t1 = np.cross(normal0, seed)
        t1 /= np.maximum(np.linalg.norm(t1, axis=1, keepdims=True), 1e-30)
        t2 = np.cross(normal0, t1)

        rel = nbr - centroid[:, None, :]
        xi = np.stack([np.einsum("qki,qi->qk", rel, t1),
                       np.einsum("qki,qi->qk", rel, t2)], axis=-1) / self.bandwidth
        eta = np.einsum("qki,qi->qk", rel, normal0)
        A = _poly_terms(xi, self.poly_degree)  # (Q, k, m)
        AtW = A.transpose(0, 2, 1) * w[:, None, :]
        G = AtW @ A
        b = np.einsum("qmk,qk->qm", AtW, eta)
        m = A.shape[-1]
        # tiny Tikhonov term keeps degenerate systems solvable; flagged rows
        # are discarded anyway
        G += (1e-10 * np.maximum(np.einsum("qmm->q", G), 1.0))[:, None, None] * np.eye(m)
        coef = np.linalg.solve(G, b[..., None])[..., 0]

        relq = queries - centroid
        xq = np.stack([np.einsum("qi,qi->q", relq, t1),
                       np.einsum("qi,qi->q", relq, t2)], axis=-1) / self.bandwidth
        Aq = _poly_terms(xq[:, None, :], self.poly_degree)[:, 0, :]
        height = np.einsum("qm,qm->q", Aq, coef)
        projected = (centroid + xq[:, 0:1] * self.bandwidth * t1
                     + xq[:, 1:2] * self.bandwidth * t2 + height[:, None] * normal0)

        # surface gradient at the query for the normal direction
        gx = coef[:, 1].copy()
        gy = coef[:, 2].copy()
        if self.poly_degree >= 2:
            gx += 2.0 * coef[:, 3] * xq[:, 0] + coef[:, 4] * xq[:, 1]
            gy += coef[:, 4] * xq[:, 0] + 2.0 * coef[:, 5] * xq[:, 1]
        gx /= self.bandwidth
        gy /= self.bandwidth
        normals = normal0 - gx[:, None] * t1 - gy[:, None] * t2
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)

        projected = np.where(ok[:, None], projected, queries)
        return projected, normals, ok


def mls_smooth(cloud: PointCloud, support_radius: float = MLS_SUPPORT_DEFAULT,
               poly_degree: int = 2) -> PointCloud:
    """Smooth a cloud by projecting every point onto its own MLS surface.

    Points without enough well-spread neighbors are dropped with a warning.
    The returned cloud carries the fitted surface normals (unoriented).
    """
    surface = MlsSurface(cloud.points, support_radius, poly_degree)
    projected, normals, ok = surface.project(cloud.points)
    dropped = int((~ok).sum())
    if dropped:
        log.warning("mls_smooth dropped %d of %d points (insufficient or "
                    "degenerate neighborhoods)", dropped, len(cloud))
    if not np.any(ok):
        raise ValueError("MLS smoothing dropped every point")
    return PointCloud(projected[ok], normals=normals[ok])


# ---------------------------------------------------------------------------
# trajectory generation
# ---------------------------------------------------------------------------

def generate_trajectory(cloud_smoothed: PointCloud, frame: ScanFrame,
                        N_pts: int, skin_offset: float = SKIN_OFFSET_DEFAULT,
                        slab_half: float = SLAB_HALF_DEFAULT,
                        x_range: tuple[float, float] | None = None,
                        support_radius: float = MLS_SUPPORT_DEFAULT) -> ScanTrajectory:
    """Build the scanning trajectory from a smoothed cloud.

    Points within a thin slab around the scan frame's XY plane form the
    intersection curve; it is ordered by scan-frame x, resampled to N_pts by
    arc length, re-projected onto the MLS surface, then displaced skin_offset
    along the inward normal. Probe orientation: z-axis along the inward
    normal, x-axis along the direction of travel.
    """
    if N_pts < 2:
        raise ValueError("a trajectory needs at least 2 points")
    pts_scan = frame.to_scan(cloud_smoothed.points)
    slab = np.abs(pts_scan[:, 2]) < slab_half
    # the plane generally cuts the surface on both sides of the anatomy;
    # the scanning side is the one the artery-facing y-axis points toward
    slab &= pts_scan[:, 1] > 0.0
    if x_range is not None:
        slab &= (pts_scan[:, 0] >= x_range[0]) & (pts_scan[:, 0] <= x_range[1])
    slab_pts = pts_scan[slab]
    if slab_pts.shape[0] < MIN_SLAB_POINTS:
        raise ValueError(
            f"only {slab_pts.shape[0]} points near the scan plane "
            f"(need {MIN_SLAB_POINTS}); no usable surface intersection")

    order = np.argsort(slab_pts[:, 0])
    slab_pts = slab_pts[order]
    x_lo, x_hi = slab_pts[0, 0], slab_pts[-1, 0]
    if x_hi - x_lo < 1e-9:
        raise ValueError("degenerate intersection segment (zero extent)")

    # dense curve estimate y(x) by kernel regression over the slab points
    n_dense = max(N_pts, 200)
    xs = np.linspace(x_lo, x_hi, n_dense)
    bw = max(2.0 * slab_half, 1.5 * (x_hi - x_lo) / max(slab_pts.shape[0], 1), 1e-4)
    wk = np.exp(-(((xs[:, None] - slab_pts[None, :, 0]) / bw) ** 2))
    ys = (wk @ slab_pts[:, 1]) / np.maximum(wk.sum(axis=1), 1e-300)
    dense = np.column_stack([xs, ys, np.zeros(n_dense)])

    # resample the dense polyline uniformly in arc length
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], N_pts)
    curve = np.column_stack([np.interp(targets, s, dense[:, i]) for i in range(3)])

    # pull the curve points onto the MLS surface and fetch accurate normals
    surface = MlsSurface(pts_scan, support_radius=support_radius, poly_degree=2)
    projected, normals, ok = surface.project(curve)
    if not np.all(ok):
        raise ValueError("surface projection failed along the intersection curve")

    # orient normals inward: toward the scan-frame x axis (the anatomy axis)
    radial = projected.copy()
    radial[:, 0] = 0.0
    flip = np.einsum("ij,ij->i", normals, radial) > 0.0
    normals[flip] *= -1.0

    positions = projected + skin_offset * normals

    # tangent along travel from the projected curve
    tangents = np.gradient(projected, axis=0)
    tangents /= np.maximum(np.linalg.norm(tangents, axis=1, keepdims=True), 1e-30)

    poses = []
    for i in range(N_pts):
        z_axis = normals[i]
        x_axis = tangents[i] - np.dot(tangents[i], z_axis) * z_axis
        x_axis /= np.linalg.norm(x_axis)
        y_axis = np.cross(z_axis, x_axis)
        R_scan = np.column_stack([x_axis, y_axis, z_axis])
        R_base = frame.rotation @ R_scan
        p_base = frame.to_base(positions[i])[0]
        poses.append(Pose(p_base, quat_from_matrix(R_base)))
    return ScanTrajectory(poses=poses, skin_offset=skin_offset)
