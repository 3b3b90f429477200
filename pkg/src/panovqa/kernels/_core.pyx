# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled render kernels.

Expression-by-expression mirror of ``_numpy.py``: the bilinear kernels are
bit-identical to the fallback (pure +/* arithmetic, same evaluation order),
the flow kernels agree up to libm rounding of the transcendentals.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport atan2, asin, cos, floor, fmod, sin, sqrt

cnp.import_array()

BACKEND_NAME = "compiled"


def flow_forward(double phi_c, double theta_c, double r,
                 object u_obj, object v_obj, int erp_height, int erp_width):
    u_arr = np.ascontiguousarray(u_obj, dtype=np.float64)
    v_arr = np.ascontiguousarray(v_obj, dtype=np.float64)
    cdef double[::1] u = u_arr.ravel()
    cdef double[::1] v = v_arr.ravel()
    cdef Py_ssize_t n_pix = u.shape[0]
    out_arr = np.empty(u_arr.shape + (2,), dtype=np.float64)
    cdef double[:, ::1] out = out_arr.reshape(-1, 2)

    cdef double a = cos(theta_c)
    cdef double b = sin(theta_c)
    cdef double c = cos(phi_c)
    cdef double d = sin(phi_c)
    cdef double pi = np.pi
    cdef double wx, wy, wz, rho, phi, theta
    cdef Py_ssize_t i
    for i in range(n_pix):
        wx = r * c * a - u[i] * b + v[i] * d * a
        wy = r * c * b + u[i] * a + v[i] * d * b
        wz = r * d - v[i] * c
        rho = sqrt(wx * wx + wy * wy + wz * wz)
        phi = asin(wz / rho)
        theta = atan2(wy, wx)
        out[i, 0] = (0.5 - phi / pi) * erp_height - 0.5
        out[i, 1] = (theta / (2.0 * pi) + 0.5) * erp_width - 0.5
    return out_arr


def flow_backward(double phi_c, double theta_c, double r,
                  object u_obj, object v_obj, int erp_height, int erp_width,
                  object grad_obj):
    u_arr = np.ascontiguousarray(u_obj, dtype=np.float64)
    v_arr = np.ascontiguousarray(v_obj, dtype=np.float64)
    grad_arr = np.ascontiguousarray(grad_obj, dtype=np.float64)
    cdef double[::1] u = u_arr.ravel()
    cdef double[::1] v = v_arr.ravel()
    cdef double[:, ::1] grad = grad_arr.reshape(-1, 2)
    cdef Py_ssize_t n_pix = u.shape[0]

    cdef double a = cos(theta_c)
    cdef double b = sin(theta_c)
    cdef double c = cos(phi_c)
    cdef double d = sin(phi_c)
    cdef double pi = np.pi
    cdef double wx, wy, wz, rho2, rxy2, rxy, g_phi, g_theta
    cdef double inv, gwx, gwy, gwz, s, t
    cdef double dphi = 0.0, dtheta = 0.0
    cdef Py_ssize_t i
    for i in range(n_pix):
        wx = r * c * a - u[i] * b + v[i] * d * a
        wy = r * c * b + u[i] * a + v[i] * d * b
        wz = r * d - v[i] * c
        rho2 = wx * wx + wy * wy + wz * wz
        rxy2 = wx * wx + wy * wy
        rxy = sqrt(rxy2)
        g_phi = grad[i, 0] * (-erp_height / pi)
        g_theta = grad[i, 1] * (erp_width / (2.0 * pi))
        if rxy > 1e-12 * sqrt(rho2):
            inv = 1.0 / rxy2
        else:
            inv = 0.0
        gwx = g_phi * (-wz * wx) * inv * rxy / rho2 + g_theta * (-wy) * inv
        gwy = g_phi * (-wz * wy) * inv * rxy / rho2 + g_theta * wx * inv
        gwz = g_phi * rxy / rho2
        s = v[i] * c - r * d
        t = r * c + v[i] * d
        dphi += gwx * (a * s) + gwy * (b * s) + gwz * t
        dtheta += gwx * (-b * t - u[i] * a) + gwy * (a * t - u[i] * b)
    return np.array([dphi, dtheta])


def bilinear_forward(object frame_obj, object coords_obj):
    frame_arr = np.ascontiguousarray(frame_obj, dtype=np.float64)
    coords_arr = np.ascontiguousarray(coords_obj, dtype=np.float64)
    cdef double[:, :, ::1] frame = frame_arr
    cdef double[:, ::1] coords = coords_arr.reshape(-1, 2)
    cdef Py_ssize_t he = frame.shape[0]
    cdef Py_ssize_t we = frame.shape[1]
    cdef Py_ssize_t nc = frame.shape[2]
    cdef Py_ssize_t n_pix = coords.shape[0]
    out_arr = np.empty(coords_arr.shape[:-1] + (frame_arr.shape[2],),
                       dtype=np.float64)
    cdef double[:, ::1] out = out_arr.reshape(-1, nc)

    cdef double m, n, fm, fn, row0, row1, p00, p01, p10, p11
    cdef Py_ssize_t i, ch, m0, m1, n0, n1
    for i in range(n_pix):
        m = coords[i, 0]
        if m < 0.0:
            m = 0.0
        elif m > he - 1.0:
            m = he - 1.0
        n = fmod(coords[i, 1], <double>we)
        if n != 0.0 and n < 0.0:
            n += we
        m0 = <Py_ssize_t>floor(m)
        n0 = <Py_ssize_t>floor(n)
        if m0 > he - 1:
            m0 = he - 1
        if n0 > we - 1:
            n0 = we - 1
        m1 = m0 + 1
        if m1 > he - 1:
            m1 = he - 1
        n1 = n0 + 1
        if n1 > we - 1:
            n1 = 0
        fm = m - m0
        fn = n - n0
        for ch in range(nc):
            p00 = frame[m0, n0, ch]
            p01 = frame[m0, n1, ch]
            p10 = frame[m1, n0, ch]
            p11 = frame[m1, n1, ch]
            row0 = p00 + fn * (p01 - p00)
            row1 = p10 + fn * (p11 - p10)
            out[i, ch] = row0 + fm * (row1 - row0)
    return out_arr


def bilinear_backward(object frame_obj, object coords_obj, object grad_obj):
    frame_arr = np.ascontiguousarray(frame_obj, dtype=np.float64)
    coords_arr = np.ascontiguousarray(coords_obj, dtype=np.float64)
    grad_arr = np.ascontiguousarray(grad_obj, dtype=np.float64)
    cdef double[:, :, ::1] frame = frame_arr
    cdef double[:, ::1] coords = coords_arr.reshape(-1, 2)
    cdef Py_ssize_t nc = frame.shape[2]
    cdef double[:, ::1] grad = grad_arr.reshape(-1, nc)
    cdef Py_ssize_t he = frame.shape[0]
    cdef Py_ssize_t we = frame.shape[1]
    cdef Py_ssize_t n_pix = coords.shape[0]
    out_arr = np.empty(coords_arr.shape, dtype=np.float64)
    cdef double[:, ::1] out = out_arr.reshape(-1, 2)

    cdef double m_raw, m, n, fm, fn, row0, row1, p00, p01, p10, p11
    cdef double dm, dn, dn_core
    cdef Py_ssize_t i, ch, m0, m1, n0, n1
    for i in range(n_pix):
        m_raw = coords[i, 0]
        m = m_raw
        if m < 0.0:
            m = 0.0
        elif m > he - 1.0:
            m = he - 1.0
        n = fmod(coords[i, 1], <double>we)
        if n != 0.0 and n < 0.0:
            n += we
        m0 = <Py_ssize_t>floor(m)
        n0 = <Py_ssize_t>floor(n)
        if m0 > he - 1:
            m0 = he - 1
        if n0 > we - 1:
            n0 = we - 1
        m1 = m0 + 1
        if m1 > he - 1:
            m1 = he - 1
        n1 = n0 + 1
        if n1 > we - 1:
            n1 = 0
        fm = m - m0
        fn = n - n0
        dm = 0.0
        dn = 0.0
        for ch in range(nc):
            p00 = frame[m0, n0, ch]
            p01 = frame[m0, n1, ch]
            p10 = frame[m1, n0, ch]
            p11 = frame[m1, n1, ch]
            row0 = p00 + fn * (p01 - p00)
            row1 = p10 + fn * (p11 - p10)
            dm += grad[i, ch] * (row1 - row0)
            dn_core = (p01 - p00) + fm * ((p11 - p10) - (p01 - p00))
            dn += grad[i, ch] * dn_core
        if m_raw < 0.0 or m_raw > he - 1.0:
            dm = 0.0
        out[i, 0] = dm
        out[i, 1] = dn
    return out_arr
