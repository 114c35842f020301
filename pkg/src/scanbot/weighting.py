"""Continuous [0,1] weighting factors that blend the interaction modes.

All three factors are built from one basic function b(s) that transitions
smoothly from 1 to 0 as s grows: the grasp factor a_h (hand near the probe),
the proximity factor a_p (probe inside a cylindrical region around the
patient), and the contact factor a_f (pressing force along the probe axis).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class WeightingParams:
    """Geometry and force constants of the weighting factors.

    r_h: hand-proximity radius (m); r_p: patient-region radius (m);
    x_top/x_bottom: axial extent of the region along scan-frame x (m);
    f0: contact force threshold (N).
    """

    r_h: float = 0.2
    r_p: float = 0.15
    x_top: float = 0.1
    x_bottom: float = -0.02
    f0: float = 12.5

    def __post_init__(self):
        if self.r_h <= 0.0 or self.r_p <= 0.0 or self.f0 <= 0.0:
            raise ValueError("r_h, r_p and f0 must be positive")
        if self.x_top <= self.x_bottom:
            raise ValueError("x_top must exceed x_bottom")


@dataclass(frozen=True)
class WeightingFactors:
    a_h: float
    a_p: float
    a_f: float


def basic_b(s: float) -> float:
    """Smooth transition from 1 to 0: b(s) = 1/(1+s^6) for s >= 0, else 1."""
    if s < 0.0:
        return 1.0
    return 1.0 / (1.0 + s**6)


def compute_a_h(d_h: np.ndarray, params: WeightingParams) -> float:
    """Grasp factor from the probe-to-hand distance vector (m)."""
    return basic_b(float(np.linalg.norm(d_h)) / params.r_h)


def compute_a_p(d_p: np.ndarray, params: WeightingParams) -> float:
    """Proximity factor from the probe position in the scan reference frame.

    Radial term: distance from the scan-frame x axis over r_p. Axial term:
    offset of x from the region center over the half-extent.
    """
    radial = np.hypot(d_p[1], d_p[2]) / params.r_p
    center = 0.5 * (params.x_top + params.x_bottom)
    half = 0.5 * (params.x_top - params.x_bottom)
    axial = abs(d_p[0] - center) / half
    return basic_b(radial) * basic_b(axial)


def compute_a_f(f_z_ee: float, params: WeightingParams) -> float:
    """Contact factor from the pressing force along the probe axis, frame {E}.

    Zero at or below zero force (no contact), 0.5 at f0, toward 1 for large
    pressing forces.
    """
    return 1.0 - basic_b(f_z_ee / params.f0)


def compute_factors(d_h: np.ndarray, d_p: np.ndarray | None, f_z_ee: float,
                    params: WeightingParams) -> WeightingFactors:
    """All three factors for one control tick. d_p is None before a scan
    frame exists; the proximity factor is 0 then."""
    a_p = 0.0 if d_p is None else compute_a_p(d_p, params)
    return WeightingFactors(
        a_h=compute_a_h(d_h, params),
        a_p=a_p,
        a_f=compute_a_f(f_z_ee, params),
    )
