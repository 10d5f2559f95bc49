"""Measurement geometry for the simulated instruments.

Laser-tracker readings live in instrument-native spherical coordinates
(distance d, azimuth az, elevation el); the Cartesian position is

    x = d cos(el) cos(az),  y = d cos(el) sin(az),  z = d sin(el).

Position uncertainty is first-order propagation of the per-axis sensor
standard deviations through the analytic Jacobian of that map:

    Sigma = J diag(sd_d^2, sd_az^2, sd_el^2) J^T.

Multilateration positions are recovered from anchor ranges by Gauss-Newton
least squares; the estimator covariance is the usual geometry factor
sd_r^2 (J^T J)^-1 evaluated at the solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GN_STEP_TOL = 1e-12
GN_MAX_ITERATIONS = 50
GN_CONDITION_LIMIT = 1e12
_COPLANAR_SINGULAR_RATIO = 1e-9


class NoConvergence(RuntimeError):
    """Gauss-Newton failed to reach the step tolerance."""


class DegenerateGeometry(RuntimeError):
    """Anchor geometry cannot support a 3D fix (rank-deficient or
    ill-conditioned normal equations, or the point sits on an anchor)."""


@dataclass(frozen=True)
class TrackerNoise:
    """Standard deviations of the raw tracker channels: distance in metres,
    both encoder angles in radians. Zero is accepted for degenerate/testing
    setups; instrument configurations require strictly positive values."""

    sigma_d: float
    sigma_az: float
    sigma_el: float

    def __post_init__(self) -> None:
        for name in ("sigma_d", "sigma_az", "sigma_el"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class SphericalReading:
    """d >= 0 metres, az in (-pi, pi], el in [-pi/2, pi/2]."""

    d: float
    az: float
    el: float

    def __post_init__(self) -> None:
        if not (self.d >= 0):
            raise ValueError(f"distance must be >= 0, got {self.d!r}")
        if not (-math.pi < self.az <= math.pi):
            raise ValueError(f"azimuth out of (-pi, pi]: {self.az!r}")
        if not (-math.pi / 2 <= self.el <= math.pi / 2):
            raise ValueError(f"elevation out of [-pi/2, pi/2]: {self.el!r}")


def spherical_to_cartesian(r: SphericalReading) -> np.ndarray:
    ce = math.cos(r.el)
    return np.array(
        [r.d * ce * math.cos(r.az), r.d * ce * math.sin(r.az), r.d * math.sin(r.el)]
    )


def cartesian_to_spherical(p) -> SphericalReading:
    x, y, z = (float(v) for v in p)
    d = math.sqrt(x * x + y * y + z * z)
    if d == 0.0:
        return SphericalReading(0.0, 0.0, 0.0)
    az = math.atan2(y, x)
    if az <= -math.pi:  # atan2 returns -pi for (-r, -0.0); canonical range is (-pi, pi]
        az = math.pi
    el = math.asin(max(-1.0, min(1.0, z / d)))
    return SphericalReading(d, az, el)


def spherical_jacobian(r: SphericalReading) -> np.ndarray:
    """d(x,y,z)/d(d,az,el) of :func:`spherical_to_cartesian`."""
    caz, saz = math.cos(r.az), math.sin(r.az)
    cel, sel = math.cos(r.el), math.sin(r.el)
    return np.array(
        [
            [cel * caz, -r.d * cel * saz, -r.d * sel * caz],
            [cel * saz, r.d * cel * caz, -r.d * sel * saz],
            [sel, 0.0, r.d * cel],
        ]
    )


def covariance_propagate(r: SphericalReading, noise: TrackerNoise) -> np.ndarray:
    jac = spherical_jacobian(r)
    diag = np.array([noise.sigma_d**2, noise.sigma_az**2, noise.sigma_el**2])
    cov = (jac * diag) @ jac.T
    return 0.5 * (cov + cov.T)  # exact symmetry despite floating-point products


def tracker_search(last_known, true_pos, radius: float) -> bool:
    """Search succeeds when the target lies within the (inclusive) search
    radius of the position the beam is pointed at."""
    if not radius > 0:
        raise ValueError(f"search radius must be > 0, got {radius!r}")
    return float(np.linalg.norm(np.asarray(true_pos, float) - np.asarray(last_known, float))) <= radius


def mlat_residual_jacobian(anchors, x, ranges) -> tuple[np.ndarray, np.ndarray]:
    """Range residuals ||x - a_i|| - range_i and their Jacobian rows
    (x - a_i)^T / ||x - a_i||."""
    a = np.asarray(anchors, dtype=float)
    xx = np.asarray(x, dtype=float)
    rr = np.asarray(ranges, dtype=float)
    diff = xx - a
    dist = np.linalg.norm(diff, axis=1)
    if np.any(dist == 0.0):
        raise DegenerateGeometry("point coincides with an anchor")
    return dist - rr, diff / dist[:, None]


def _check_anchor_rank(anchors: np.ndarray) -> None:
    centered = anchors - anchors.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] == 0.0 or s[-1] / s[0] < _COPLANAR_SINGULAR_RATIO:
        raise DegenerateGeometry("anchors are coplanar (rank-deficient geometry)")


def gauss_newton_solve(anchors, ranges, x0, sigma_r: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Undamped Gauss-Newton on the range residuals.

    Iterates x <- x - (J^T J)^-1 J^T r until the step norm drops below 1e-12
    or 50 iterations, then returns the solution and sigma_r^2 (J^T J)^-1.
    Raises DegenerateGeometry for coplanar anchors or a normal-equation
    condition number beyond 1e12, NoConvergence when the loop runs out.
    """
    a = np.asarray(anchors, dtype=float)
    if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] < 4:
        raise ValueError("need at least 4 anchors of dimension 3")
    if len(ranges) != a.shape[0]:
        raise ValueError("one range per anchor required")
    _check_anchor_rank(a)

    x = np.asarray(x0, dtype=float).copy()
    for _ in range(GN_MAX_ITERATIONS):
        res, jac = mlat_residual_jacobian(a, x, ranges)
        normal = jac.T @ jac
        if np.linalg.cond(normal) > GN_CONDITION_LIMIT:
            raise DegenerateGeometry("normal equations ill-conditioned")
        step = np.linalg.solve(normal, jac.T @ res)
        x -= step
        if float(np.linalg.norm(step)) < GN_STEP_TOL:
            _, jac = mlat_residual_jacobian(a, x, ranges)
            normal = jac.T @ jac
            cov = sigma_r**2 * np.linalg.inv(normal)
            return x, 0.5 * (cov + cov.T)
    raise NoConvergence(f"no fix after {GN_MAX_ITERATIONS} iterations")


def quat_multiply(q1, q2) -> tuple[float, float, float, float]:
    """Hamilton product of (w, x, y, z) quaternions."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return (
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    )


def quat_about_axis(angle: float, axis: str) -> tuple[float, float, float, float]:
    half = 0.5 * angle
    c, s = math.cos(half), math.sin(half)
    if axis == "x":
        return (c, s, 0.0, 0.0)
    if axis == "y":
        return (c, 0.0, s, 0.0)
    if axis == "z":
        return (c, 0.0, 0.0, s)
    raise ValueError(f"unknown axis {axis!r}")
