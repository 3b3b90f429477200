"""Pure-numpy render kernels (fallback backend).

The compiled backend in ``_core.pyx`` mirrors these formulas expression by
expression; the bilinear kernels are pure +/* arithmetic and agree with the
compiled versions bit for bit, the flow kernels only up to libm rounding.

Coordinate conventions: flow coordinates are continuous ERP (row m, col n)
positions; rows clamp at the poles, columns wrap around the seam.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def flow_forward(phi_c: float, theta_c: float, r: float,
                 u: np.ndarray, v: np.ndarray,
                 erp_height: int, erp_width: int) -> np.ndarray:
    """ERP (m, n) coordinates of viewport pixels with plane offsets (u, v).

    The world ray of a pixel is ``r * gaze + u * east - v * north`` for the
    frame centered at (phi_c, theta_c).
    """
    a = np.cos(theta_c)
    b = np.sin(theta_c)
    c = np.cos(phi_c)
    d = np.sin(phi_c)
    wx = r * c * a - u * b + v * d * a
    wy = r * c * b + u * a + v * d * b
    wz = r * d - v * c
    rho = np.sqrt(wx * wx + wy * wy + wz * wz)
    phi = np.arcsin(wz / rho)
    theta = np.arctan2(wy, wx)
    m = (0.5 - phi / np.pi) * erp_height - 0.5
    n = (theta / (2.0 * np.pi) + 0.5) * erp_width - 0.5
    return np.stack([m, n], axis=-1)


def flow_backward(phi_c: float, theta_c: float, r: float,
                  u: np.ndarray, v: np.ndarray,
                  erp_height: int, erp_width: int,
                  grad_mn: np.ndarray) -> np.ndarray:
    """Adjoint of ``flow_forward`` with respect to the center viewpoint.

    Returns ``[d/dphi_c, d/dtheta_c]`` accumulated over all pixels.
    """
    a = np.cos(theta_c)
    b = np.sin(theta_c)
    c = np.cos(phi_c)
    d = np.sin(phi_c)
    wx = r * c * a - u * b + v * d * a
    wy = r * c * b + u * a + v * d * b
    wz = r * d - v * c
    rho2 = wx * wx + wy * wy + wz * wz
    rxy2 = wx * wx + wy * wy
    rxy = np.sqrt(rxy2)

    g_phi = grad_mn[..., 0] * (-erp_height / np.pi)
    g_theta = grad_mn[..., 1] * (erp_width / (2.0 * np.pi))

    # d(phi)/dw and d(theta)/dw; pixel rays through a pole have no defined
    # longitude direction, so their contribution is zeroed
    safe = rxy > 1e-12 * np.sqrt(rho2)
    inv = np.where(safe, 1.0 / np.where(safe, rxy2, 1.0), 0.0)
    gwx = g_phi * (-wz * wx) * inv * rxy / rho2 + g_theta * (-wy) * inv
    gwy = g_phi * (-wz * wy) * inv * rxy / rho2 + g_theta * wx * inv
    gwz = g_phi * rxy / rho2

    # dw/dphi_c = (a*(v*c - r*d), b*(v*c - r*d), r*c + v*d)
    # dw/dtheta_c = (-b*(r*c + v*d) - u*a, a*(r*c + v*d) - u*b, 0)
    s = v * c - r * d
    t = r * c + v * d
    dphi = np.sum(gwx * (a * s) + gwy * (b * s) + gwz * t)
    dtheta = np.sum(gwx * (-b * t - u * a) + gwy * (a * t - u * b))
    return np.array([dphi, dtheta])


def _bilinear_setup(frame: np.ndarray, coords: np.ndarray):
    he, we = frame.shape[0], frame.shape[1]
    m_raw = coords[..., 0]
    n_raw = coords[..., 1]
    m = np.clip(m_raw, 0.0, he - 1.0)
    n = np.mod(n_raw, we)
    m0 = np.floor(m).astype(np.intp)
    n0 = np.floor(n).astype(np.intp)
    # floor of values in [0, we) can still yield we-1 + eps edge; clamp
    m0 = np.minimum(m0, he - 1)
    n0 = np.minimum(n0, we - 1)
    m1 = np.minimum(m0 + 1, he - 1)
    n1 = np.mod(n0 + 1, we)
    fm = m - m0
    fn = n - n0
    return m_raw, m0, m1, fm, n0, n1, fn


def bilinear_forward(frame: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample an ERP frame at continuous (m, n) coordinates.

    Rows clamp to the frame, columns wrap; output shape is
    ``coords.shape[:-1] + (channels,)``.
    """
    _, m0, m1, fm, n0, n1, fn = _bilinear_setup(frame, coords)
    p00 = frame[m0, n0]
    p01 = frame[m0, n1]
    p10 = frame[m1, n0]
    p11 = frame[m1, n1]
    fm = fm[..., None]
    fn = fn[..., None]
    row0 = p00 + fn * (p01 - p00)
    row1 = p10 + fn * (p11 - p10)
    return row0 + fm * (row1 - row0)


def bilinear_backward(frame: np.ndarray, coords: np.ndarray,
                      grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of ``bilinear_forward`` with respect to the coordinates.

    Uses the one-sided interior derivative at lattice points; rows clamped
    outside [0, He-1] contribute zero gradient.
    """
    he = frame.shape[0]
    m_raw, m0, m1, fm, n0, n1, fn = _bilinear_setup(frame, coords)
    p00 = frame[m0, n0]
    p01 = frame[m0, n1]
    p10 = frame[m1, n0]
    p11 = frame[m1, n1]
    fm = fm[..., None]
    fn = fn[..., None]
    row0 = p00 + fn * (p01 - p00)
    row1 = p10 + fn * (p11 - p10)
    dm = np.sum(grad_out * (row1 - row0), axis=-1)
    dn_core = (p01 - p00) + fm * ((p11 - p10) - (p01 - p00))
    dn = np.sum(grad_out * dn_core, axis=-1)
    inside = (m_raw >= 0.0) & (m_raw <= he - 1.0)
    dm = dm * inside
    return np.stack([dm, dn], axis=-1)
