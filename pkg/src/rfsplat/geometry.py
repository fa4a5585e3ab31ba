"""Angular and projective math for splatting onto a receiver-centered sphere.

Everything in this module is a pure function of its inputs: spherical
coordinates, deterministic tangent frames, anisotropic spherical Gaussian
(ASG) gating weights, the Jacobian of the spherical projection (and its
derivative, needed by the analytic backward pass), covariance projection
with near-field compensation, and coverage radii.

Scalar entry points validate their inputs and mirror the vectorized
``*_vec`` helpers used by the renderer; both share the same formulas.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

# Diagonal floor applied to projected 2D covariances (rad^2). Keeps the
# 2x2 inverses used by the opacity kernel well conditioned.
COV_FLOOR = 1e-8

# Elevation is clamped to +-(pi/2 - POLE_MARGIN) before Jacobian
# evaluation: the azimuth is undefined at the poles.
POLE_MARGIN = 1e-4

_UNIT_TOL = 1e-9


class GeometryError(ValueError):
    """Raised on degenerate geometric input."""


class AngularCoord(NamedTuple):
    """Azimuth/elevation pair in radians; phi in [-pi, pi), theta in [-pi/2, pi/2]."""

    phi: float
    theta: float


class TangentFrame(NamedTuple):
    """Right-handed orthonormal tangent basis (x_axis, y_axis) for a lobe direction."""

    x_axis: np.ndarray
    y_axis: np.ndarray


class ProjectedGaussian(NamedTuple):
    """One primitive splatted onto the angular domain.

    ``sigma2d`` is the compensated 2D covariance (rad^2), ``depth`` the
    center-to-receiver distance (m) and ``coverage_radius`` the 3-sigma
    footprint radius 3*sqrt(lambda_max(sigma2d)) (rad).
    """

    mu2d: AngularCoord
    sigma2d: np.ndarray
    depth: float
    coverage_radius: float
    primitive_index: int


def as_unit(v, tol: float = _UNIT_TOL) -> np.ndarray:
    """Validate that ``v`` is a unit 3-vector and return it as float64."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise GeometryError(f"expected 3-vector, got shape {v.shape}")
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > tol:
        raise GeometryError(f"direction is not unit length (|v| = {n!r})")
    return v


def normalize(v) -> np.ndarray:
    """Normalize a 3-vector; raises on (near-)zero input."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise GeometryError("degenerate direction")
    return v / n


def wrap_angle(phi):
    """Wrap angle(s) to [-pi, pi)."""
    return np.mod(np.asarray(phi, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi


def spherical_coords(point, r_rx: float = 1.0) -> AngularCoord:
    """Azimuth/elevation of a point as seen from the sphere center.

    phi = atan2(y, x); theta = pi/2 - arccos(z / |point|), with the arccos
    argument clamped to [-1, 1]. ``r_rx`` only fixes the sphere
    parameterization (the point is radially projected), it must be > 0.
    """
    if r_rx <= 0.0:
        raise GeometryError("r_rx must be positive")
    point = np.asarray(point, dtype=np.float64)
    n = float(np.linalg.norm(point))
    if n < 1e-12:
        raise GeometryError("degenerate direction")
    phi = float(np.arctan2(point[1], point[0]))
    zc = min(1.0, max(-1.0, point[2] / n))
    theta = np.pi / 2.0 - float(np.arccos(zc))
    return AngularCoord(float(wrap_angle(phi)), theta)


def spherical_coords_vec(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``spherical_coords`` over (..., 3) points; returns (phi, theta)."""
    points = np.asarray(points, dtype=np.float64)
    n = np.linalg.norm(points, axis=-1)
    phi = wrap_angle(np.arctan2(points[..., 1], points[..., 0]))
    zc = np.clip(points[..., 2] / n, -1.0, 1.0)
    theta = np.pi / 2.0 - np.arccos(zc)
    return phi, theta


def _seed_axis_vec(v: np.ndarray) -> np.ndarray:
    """Index of the world axis with smallest |component| along each v."""
    return np.argmin(np.abs(v), axis=-1)


def tangent_frames_vec(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic tangent frames for (..., 3) unit directions.

    Seeds with the world axis of smallest |component| along v, Gram-Schmidt
    orthogonalizes, and closes the frame with y = v x x, so x cross y = v.
    """
    v = np.asarray(v, dtype=np.float64)
    axis = np.asarray(_seed_axis_vec(v))
    a = np.zeros_like(v)
    np.put_along_axis(a, axis[..., None], 1.0, axis=-1)
    g = a - (np.sum(a * v, axis=-1, keepdims=True)) * v
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    x = g / gn
    y = np.cross(v, x)
    return x, y


def tangent_frame(v) -> TangentFrame:
    """Deterministic right-handed tangent frame orthogonal to a unit vector."""
    v = as_unit(v)
    x, y = tangent_frames_vec(v)
    return TangentFrame(x, y)


def asg_weight(lobe_dir, lambda_x: float, lambda_y: float, d) -> float:
    """Anisotropic spherical Gaussian gating weight of a query direction.

    Returns exp(-(lambda_x * dx^2 + lambda_y * dy^2)) where (dx, dy) are the
    components of ``d`` in the lobe's tangent frame. Directions in the back
    hemisphere (d . v <= 0) gate to exactly zero, which prevents spurious
    rear lobes.
    """
    if lambda_x <= 0.0 or lambda_y <= 0.0:
        raise GeometryError("ASG spreads must be positive")
    v = as_unit(lobe_dir)
    d = as_unit(d)
    if float(np.dot(d, v)) <= 0.0:
        return 0.0
    x, y = tangent_frames_vec(v)
    dx = float(np.dot(d, x))
    dy = float(np.dot(d, y))
    return float(np.exp(-(lambda_x * dx * dx + lambda_y * dy * dy)))


def _clamped_plane_radius(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(u, rho) with rho = sqrt(x^2 + y^2) floored by the pole clamp."""
    u = p[..., 0] ** 2 + p[..., 1] ** 2
    d2 = u + p[..., 2] ** 2
    floor = np.sqrt(d2) * np.sin(POLE_MARGIN)
    rho = np.maximum(np.sqrt(u), floor)
    return rho * rho, rho


def projection_jacobian_vec(p: np.ndarray) -> np.ndarray:
    """Jacobian d(phi, theta)/d(x, y, z) at receiver-centered offsets (..., 3).

    Elevation is pole-clamped (see ``POLE_MARGIN``) by flooring the in-plane
    radius, keeping the entries finite on the polar axis.
    """
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    u, rho = _clamped_plane_radius(p)
    w = x * x + y * y + z * z
    J = np.zeros(p.shape[:-1] + (2, 3), dtype=np.float64)
    J[..., 0, 0] = -y / u
    J[..., 0, 1] = x / u
    A = w * rho
    J[..., 1, 0] = -x * z / A
    J[..., 1, 1] = -y * z / A
    J[..., 1, 2] = rho / w
    return J


def projection_jacobian(mu, receiver) -> np.ndarray:
    """2x3 Jacobian of the receiver-centered spherical map at ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    receiver = np.asarray(receiver, dtype=np.float64)
    p = mu - receiver
    if float(np.linalg.norm(p)) < 1e-12:
        raise GeometryError("zero depth")
    return projection_jacobian_vec(p)


def projection_jacobian_grad_vec(p: np.ndarray) -> np.ndarray:
    """dJ/dp as a (..., 2, 3, 3) tensor, consistent with the clamped Jacobian.

    Entry [..., r, c, i] is the derivative of J[..., r, c] with respect to
    p_i. Used by the backward pass to propagate covariance gradients into
    primitive centers.
    """
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    u, rho = _clamped_plane_radius(p)
    w = x * x + y * y + z * z
    G = np.zeros(p.shape[:-1] + (2, 3, 3), dtype=np.float64)
    u2 = u * u
    # phi row: (-y/u, x/u, 0)
    G[..., 0, 0, 0] = 2.0 * x * y / u2
    G[..., 0, 0, 1] = (y * y - x * x) / u2
    G[..., 0, 1, 0] = (y * y - x * x) / u2
    G[..., 0, 1, 1] = -2.0 * x * y / u2
    # theta row: (-xz/A, -yz/A, rho/w) with A = w * rho
    A = w * rho
    A2 = A * A
    k = (2.0 * u + w) / rho  # dA/dx = x*k, dA/dy = y*k
    G[..., 1, 0, 0] = -z / A + x * x * z * k / A2
    G[..., 1, 0, 1] = x * y * z * k / A2
    G[..., 1, 0, 2] = -x / A + 2.0 * x * z * z * rho / A2
    G[..., 1, 1, 0] = x * y * z * k / A2
    G[..., 1, 1, 1] = -z / A + y * y * z * k / A2
    G[..., 1, 1, 2] = -y / A + 2.0 * y * z * z * rho / A2
    w2 = w * w
    G[..., 1, 2, 0] = x * (w - 2.0 * u) / (rho * w2)
    G[..., 1, 2, 1] = y * (w - 2.0 * u) / (rho * w2)
    G[..., 1, 2, 2] = -2.0 * z * rho / w2
    return G


def project_covariance(sigma3d: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Project a 3D covariance to the angular domain: J Sigma J^T (+ floor).

    The result is symmetrized and a diagonal floor of ``COV_FLOOR`` rad^2 is
    added so downstream inverses stay well conditioned.
    """
    sigma3d = np.asarray(sigma3d, dtype=np.float64)
    if sigma3d.shape != (3, 3):
        raise GeometryError("sigma3d must be 3x3")
    if not np.allclose(sigma3d, sigma3d.T, atol=1e-9):
        raise GeometryError("sigma3d must be symmetric")
    ev = np.linalg.eigvalsh(sigma3d)
    if ev[0] <= 0.0:
        raise GeometryError("sigma3d must be positive definite")
    c = J @ sigma3d @ np.swapaxes(J, -1, -2)
    c = 0.5 * (c + np.swapaxes(c, -1, -2))
    return c + COV_FLOOR * np.eye(2)


def compensate_covariance(sigma2d: np.ndarray, depth: float, eta: float) -> np.ndarray:
    """Near-field covariance compensation: sigma2d * (1 + eta^2 / D^2)."""
    if depth <= 0.0:
        raise GeometryError("depth must be positive")
    if eta < 0.0:
        raise GeometryError("eta must be nonnegative")
    return np.asarray(sigma2d, dtype=np.float64) * (1.0 + (eta * eta) / (depth * depth))


def eigmax_2x2_vec(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of symmetric [[a, b], [b, c]] matrices."""
    half = 0.5 * (a + c)
    return half + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))


def coverage_radius(sigma2d: np.ndarray) -> float:
    """3-sigma angular footprint radius: 3 * sqrt(lambda_max(sigma2d))."""
    s = np.asarray(sigma2d, dtype=np.float64)
    if not np.allclose(s, s.T, atol=1e-12):
        raise GeometryError("sigma2d must be symmetric")
    lam = eigmax_2x2_vec(s[0, 0], s[0, 1], s[1, 1])
    lam_min = s[0, 0] + s[1, 1] - lam
    if lam_min <= 0.0:
        raise GeometryError("sigma2d must be positive definite")
    return float(3.0 * np.sqrt(lam))
