# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled face-loop kernels; same contracts as ``mfgtomo._kernels_py``."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline double _neg(double q) nogil:
    return q if q < 0.0 else 0.0


cdef inline double _pos(double q) nogil:
    return q if q > 0.0 else 0.0


def eo_hamiltonian(const double[:, ::1] u, double dx, double dy, bint periodic):
    cdef Py_ssize_t ny = u.shape[0], nx = u.shape[1], i, j, jr, ir
    cdef double q
    out_arr = np.zeros((ny, nx))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(ny):
            for j in range(nx):
                jr = j + 1
                if jr == nx:
                    if not periodic:
                        continue
                    jr = 0
                q = (u[i, jr] - u[i, j]) / dx
                out[i, j] += 0.5 * _neg(q) * _neg(q)
                out[i, jr] += 0.5 * _pos(q) * _pos(q)
        for i in range(ny):
            ir = i + 1
            if ir == ny:
                if not periodic:
                    continue
                ir = 0
            for j in range(nx):
                q = (u[ir, j] - u[i, j]) / dy
                out[i, j] += 0.5 * _neg(q) * _neg(q)
                out[ir, j] += 0.5 * _pos(q) * _pos(q)
    return out_arr


def eo_hamiltonian_vjp(const double[:, ::1] u, const double[:, ::1] g, double dx, double dy, bint periodic):
    cdef Py_ssize_t ny = u.shape[0], nx = u.shape[1], i, j, jr, ir
    cdef double q, qbar
    out_arr = np.zeros((ny, nx))
    cdef double[:, ::1] ubar = out_arr
    with nogil:
        for i in range(ny):
            for j in range(nx):
                jr = j + 1
                if jr == nx:
                    if not periodic:
                        continue
                    jr = 0
                q = (u[i, jr] - u[i, j]) / dx
                qbar = (g[i, j] * _neg(q) + g[i, jr] * _pos(q)) / dx
                ubar[i, jr] += qbar
                ubar[i, j] -= qbar
        for i in range(ny):
            ir = i + 1
            if ir == ny:
                if not periodic:
                    continue
                ir = 0
            for j in range(nx):
                q = (u[ir, j] - u[i, j]) / dy
                qbar = (g[i, j] * _neg(q) + g[ir, j] * _pos(q)) / dy
                ubar[ir, j] += qbar
                ubar[i, j] -= qbar
    return out_arr


def upwind_divergence(const double[:, ::1] m, const double[:, ::1] u, double dx, double dy, bint periodic):
    cdef Py_ssize_t ny = m.shape[0], nx = m.shape[1], i, j, jr, ir
    cdef double q, flux
    out_arr = np.zeros((ny, nx))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(ny):
            for j in range(nx):
                jr = j + 1
                if jr == nx:
                    if not periodic:
                        continue
                    jr = 0
                q = (u[i, jr] - u[i, j]) / dx
                flux = (-_neg(q) * m[i, j] - _pos(q) * m[i, jr]) / dx
                out[i, j] += flux
                out[i, jr] -= flux
        for i in range(ny):
            ir = i + 1
            if ir == ny:
                if not periodic:
                    continue
                ir = 0
            for j in range(nx):
                q = (u[ir, j] - u[i, j]) / dy
                flux = (-_neg(q) * m[i, j] - _pos(q) * m[ir, j]) / dy
                out[i, j] += flux
                out[ir, j] -= flux
    return out_arr


def upwind_divergence_vjp(const double[:, ::1] lam, const double[:, ::1] m, const double[:, ::1] u,
                          double dx, double dy, bint periodic):
    cdef Py_ssize_t ny = m.shape[0], nx = m.shape[1], i, j, jr, ir
    cdef double q, fbar, qbar
    mbar_arr = np.zeros((ny, nx))
    ubar_arr = np.zeros((ny, nx))
    cdef double[:, ::1] mbar = mbar_arr
    cdef double[:, ::1] ubar = ubar_arr
    with nogil:
        for i in range(ny):
            for j in range(nx):
                jr = j + 1
                if jr == nx:
                    if not periodic:
                        continue
                    jr = 0
                q = (u[i, jr] - u[i, j]) / dx
                fbar = (lam[i, j] - lam[i, jr]) / dx
                mbar[i, j] -= _neg(q) * fbar
                mbar[i, jr] -= _pos(q) * fbar
                if q < 0.0:
                    qbar = -fbar * m[i, j] / dx
                elif q > 0.0:
                    qbar = -fbar * m[i, jr] / dx
                else:
                    qbar = 0.0
                ubar[i, jr] += qbar
                ubar[i, j] -= qbar
        for i in range(ny):
            ir = i + 1
            if ir == ny:
                if not periodic:
                    continue
                ir = 0
            for j in range(nx):
                q = (u[ir, j] - u[i, j]) / dy
                fbar = (lam[i, j] - lam[ir, j]) / dy
                mbar[i, j] -= _neg(q) * fbar
                mbar[ir, j] -= _pos(q) * fbar
                if q < 0.0:
                    qbar = -fbar * m[i, j] / dy
                elif q > 0.0:
                    qbar = -fbar * m[ir, j] / dy
                else:
                    qbar = 0.0
                ubar[ir, j] += qbar
                ubar[i, j] -= qbar
    return mbar_arr, ubar_arr


def max_outflow_rate(const double[:, ::1] u, double dx, double dy, bint periodic):
    cdef Py_ssize_t ny = u.shape[0], nx = u.shape[1], i, j, jr, ir
    cdef double q, best = 0.0
    rate_arr = np.zeros((ny, nx))
    cdef double[:, ::1] rate = rate_arr
    with nogil:
        for i in range(ny):
            for j in range(nx):
                jr = j + 1
                if jr == nx:
                    if not periodic:
                        continue
                    jr = 0
                q = (u[i, jr] - u[i, j]) / dx
                rate[i, j] -= _neg(q) / dx
                rate[i, jr] += _pos(q) / dx
        for i in range(ny):
            ir = i + 1
            if ir == ny:
                if not periodic:
                    continue
                ir = 0
            for j in range(nx):
                q = (u[ir, j] - u[i, j]) / dy
                rate[i, j] -= _neg(q) / dy
                rate[ir, j] += _pos(q) / dy
        for i in range(ny):
            for j in range(nx):
                if rate[i, j] > best:
                    best = rate[i, j]
    return best
