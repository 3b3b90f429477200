"""Spherical coordinate systems and viewport-plane transforms.

Conventions used throughout the package:

* a gaze direction is a latitude/longitude pair ``(phi, theta)`` in
  radians, phi in [-pi/2, pi/2], theta normalized to [-pi, pi);
* viewport-plane (``uv``) coordinates are measured in pixels with the
  origin at the viewport center, u growing to the right (local east) and
  v growing downward;
* the sphere radius implied by a viewport is
  ``r = 0.5 * width_px * cot(0.5 * fov_rad)`` so that a ray at half the
  field of view lands exactly on the viewport edge.

All functions are pure and operate in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

# Gnomonic projection diverges at 90 degrees from the viewport center;
# points beyond HALF_PI - HORIZON_EPS are clamped to this rim and flagged.
HORIZON_EPS = 1e-3


class HorizonError(ValueError):
    """Point lies outside the valid projection domain and clamping is off."""


class UVPoint(NamedTuple):
    u: float
    v: float


def wrap_longitude(theta: float) -> float:
    """Normalize a longitude to the half-open interval [-pi, pi)."""
    wrapped = math.fmod(theta + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    return wrapped - math.pi


@dataclass(frozen=True)
class Viewpoint:
    """Gaze direction on the sphere: latitude phi, longitude theta."""

    phi: float
    theta: float

    def __post_init__(self):
        if not (-HALF_PI <= self.phi <= HALF_PI):
            raise ValueError(f"latitude {self.phi} outside [-pi/2, pi/2]")
        object.__setattr__(self, "theta", wrap_longitude(self.theta))


@dataclass(frozen=True)
class ViewportSpec:
    """Rectilinear viewport geometry: pixel size and field of view."""

    width_px: int
    height_px: int
    fov_rad: float

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("viewport dimensions must be positive")
        if not (0.0 < self.fov_rad < math.pi):
            raise ValueError("field of view must lie in (0, pi)")

    @property
    def radius(self) -> float:
        """Projection sphere radius in pixels."""
        return 0.5 * self.width_px / math.tan(0.5 * self.fov_rad)


@dataclass(frozen=True)
class RelativePath:
    """Scanpath re-expressed in the viewport frame of ``reference``.

    ``valid`` marks points that were inside the projection domain;
    clamped points carry rim coordinates and valid=False.
    """

    reference: Viewpoint
    uv: np.ndarray = field(repr=False)       # (n, 2)
    valid: np.ndarray = field(repr=False)    # (n,) bool

    @property
    def points(self) -> list[UVPoint]:
        return [UVPoint(float(u), float(v)) for u, v in self.uv]


def euler_to_cartesian(vp: Viewpoint, r: float) -> np.ndarray:
    """Map a gaze direction onto the sphere of radius ``r``."""
    if r <= 0.0:
        raise ValueError("radius must be positive")
    cp = math.cos(vp.phi)
    return np.array([r * cp * math.cos(vp.theta),
                     r * cp * math.sin(vp.theta),
                     r * math.sin(vp.phi)])


def unit_vector(vp: Viewpoint) -> np.ndarray:
    return euler_to_cartesian(vp, 1.0)


def rotation_matrix(center: Viewpoint) -> np.ndarray:
    """World-from-viewport rotation for the frame centered at ``center``.

    Column 0 is the gaze direction, column 1 the local east tangent and
    column 2 the local north tangent, so R @ (r, u, -v) recovers a world
    ray from viewport-plane coordinates.
    """
    a = math.cos(center.theta)
    b = math.sin(center.theta)
    c = math.cos(center.phi)
    d = math.sin(center.phi)
    r1 = np.array([[a, -b, 0.0],
                   [b, a, 0.0],
                   [0.0, 0.0, 1.0]])
    r2 = np.array([[c + (1 - c) * b * b, -(1 - c) * a * b, -d * a],
                   [-(1 - c) * a * b, c + (1 - c) * a * a, -d * b],
                   [d * a, d * b, c]])
    return r2 @ r1


def great_circle_distance(a: Viewpoint, b: Viewpoint) -> float:
    """Angular distance in radians, stable for both tiny and near-pi angles."""
    va = unit_vector(a)
    vb = unit_vector(b)
    cross = np.linalg.norm(np.cross(va, vb))
    return math.atan2(cross, float(np.dot(va, vb)))


def _clamp_to_rim(vp: Viewpoint, center: Viewpoint, limit: float) -> Viewpoint:
    """Slerp ``vp`` toward ``center`` so its angular distance equals ``limit``."""
    va = unit_vector(center)
    vb = unit_vector(vp)
    d = math.atan2(np.linalg.norm(np.cross(va, vb)), float(np.dot(va, vb)))
    sin_d = math.sin(d)
    if sin_d < 1e-12:
        # antipodal (or coincident) direction is ambiguous; walk toward the
        # local north tangent, which is deterministic for every center
        tangent = rotation_matrix(center)[:, 2]
        w = math.cos(limit) * va + math.sin(limit) * tangent
    else:
        w = (math.sin(d - limit) / sin_d) * va + (math.sin(limit) / sin_d) * vb
    return Viewpoint(math.asin(max(-1.0, min(1.0, w[2] / np.linalg.norm(w)))),
                     math.atan2(w[1], w[0]))


def sphere_to_viewport(vp: Viewpoint, center: Viewpoint, spec: ViewportSpec,
                       clamp: bool = True) -> tuple[UVPoint, bool]:
    """Project ``vp`` onto the viewport plane centered at ``center``.

    Returns ``(uv, valid)``. Outside the projection domain the point is
    pulled back to the horizon rim along the great circle and flagged
    invalid; with ``clamp=False`` a :class:`HorizonError` is raised instead.
    """
    limit = HALF_PI - HORIZON_EPS
    valid = great_circle_distance(vp, center) < limit
    if not valid:
        if not clamp:
            raise HorizonError(
                f"viewpoint {vp} beyond projection horizon of {center}")
        vp = _clamp_to_rim(vp, center, limit)
    r = spec.radius
    w = euler_to_cartesian(vp, r)
    rot = rotation_matrix(center)
    xt, yt, zt = rot.T @ w
    yp = r * yt / xt
    zp = r * zt / xt
    return UVPoint(yp, -zp), bool(valid)


def viewport_to_sphere(p: UVPoint | tuple, center: Viewpoint,
                       spec: ViewportSpec) -> Viewpoint:
    """Inverse viewport projection; total for finite inputs."""
    u, v = p
    r = spec.radius
    w = rotation_matrix(center) @ np.array([r, u, -v])
    norm = np.linalg.norm(w)
    return Viewpoint(math.asin(max(-1.0, min(1.0, w[2] / norm))),
                     math.atan2(w[1], w[0]))


def euler_to_erp_pixel(vp: Viewpoint, erp_height: int,
                       erp_width: int) -> tuple[float, float]:
    """Continuous (row, column) position of a gaze direction in an ERP frame."""
    m = (0.5 - vp.phi / math.pi) * erp_height - 0.5
    n = (vp.theta / TWO_PI + 0.5) * erp_width - 0.5
    return m, n


def relative_scanpath_set(path: Sequence[Viewpoint],
                          spec: ViewportSpec) -> list[RelativePath]:
    """Re-express a scanpath window in each of its own viewport frames.

    For a window of H viewpoints, entry t (t = 1..H) maps the whole window
    into the frame centered at ``path[H - t]``. Clamped points are flagged
    rather than raised so data preparation never aborts.
    """
    h = len(path)
    if h < 1:
        raise ValueError("path must contain at least one viewpoint")
    out = []
    for t in range(1, h + 1):
        reference = path[h - t]
        uv = np.empty((h, 2))
        valid = np.empty(h, dtype=bool)
        for i, vp in enumerate(path):
            (u, v), ok = sphere_to_viewport(vp, reference, spec)
            uv[i, 0] = u
            uv[i, 1] = v
            valid[i] = ok
        out.append(RelativePath(reference=reference, uv=uv, valid=valid))
    return out
