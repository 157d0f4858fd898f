# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled stance integrator; same algorithm and operation order as ``_stance_py``."""
from libc.math cimport cos, sin, pow, fabs

cdef double EVENT_TOL = 1e-12

cdef double C_A21 = 1.0 / 5
cdef double C_A31 = 3.0 / 40, C_A32 = 9.0 / 40
cdef double C_A41 = 44.0 / 45, C_A42 = -56.0 / 15, C_A43 = 32.0 / 9
cdef double C_A51 = 19372.0 / 6561, C_A52 = -25360.0 / 2187, C_A53 = 64448.0 / 6561, C_A54 = -212.0 / 729
cdef double C_A61 = 9017.0 / 3168, C_A62 = -355.0 / 33, C_A63 = 46732.0 / 5247, C_A64 = 49.0 / 176
cdef double C_A65 = -5103.0 / 18656
cdef double C_B1 = 35.0 / 384, C_B3 = 500.0 / 1113, C_B4 = 125.0 / 192, C_B5 = -2187.0 / 6784, C_B6 = 11.0 / 84
cdef double C_E1 = 71.0 / 57600, C_E3 = -71.0 / 16695, C_E4 = 71.0 / 1920, C_E5 = -17253.0 / 339200
cdef double C_E6 = 22.0 / 525, C_E7 = -1.0 / 40


cdef struct Model:
    double r_max
    double kappa
    double g


cdef inline void rhs(const double* y, double* out, Model* m) noexcept nogil:
    out[0] = y[2]
    out[1] = y[3]
    out[2] = y[0] * y[3] * y[3] - m.g * cos(y[1]) + m.kappa * (m.r_max - y[0])
    out[3] = (m.g * sin(y[1]) - 2.0 * y[2] * y[3]) / y[0]


cdef void dp_step(const double* y, const double* k1, double h, Model* m,
                  double* y_new, double* k7, double* err) noexcept nogil:
    cdef double k2[4], k3[4], k4[4], k5[4], k6[4], tmp[4]
    cdef int i
    for i in range(4):
        tmp[i] = y[i]
        tmp[i] += h * C_A21 * k1[i]
    rhs(tmp, k2, m)
    for i in range(4):
        tmp[i] = y[i]
        tmp[i] += h * C_A31 * k1[i]
        tmp[i] += h * C_A32 * k2[i]
    rhs(tmp, k3, m)
    for i in range(4):
        tmp[i] = y[i]
        tmp[i] += h * C_A41 * k1[i]
        tmp[i] += h * C_A42 * k2[i]
        tmp[i] += h * C_A43 * k3[i]
    rhs(tmp, k4, m)
    for i in range(4):
        tmp[i] = y[i]
        tmp[i] += h * C_A51 * k1[i]
        tmp[i] += h * C_A52 * k2[i]
        tmp[i] += h * C_A53 * k3[i]
        tmp[i] += h * C_A54 * k4[i]
    rhs(tmp, k5, m)
    for i in range(4):
        tmp[i] = y[i]
        tmp[i] += h * C_A61 * k1[i]
        tmp[i] += h * C_A62 * k2[i]
        tmp[i] += h * C_A63 * k3[i]
        tmp[i] += h * C_A64 * k4[i]
        tmp[i] += h * C_A65 * k5[i]
    rhs(tmp, k6, m)
    for i in range(4):
        y_new[i] = y[i]
        y_new[i] += h * C_B1 * k1[i]
        y_new[i] += h * C_B3 * k3[i]
        y_new[i] += h * C_B4 * k4[i]
        y_new[i] += h * C_B5 * k5[i]
        y_new[i] += h * C_B6 * k6[i]
    rhs(y_new, k7, m)
    for i in range(4):
        err[i] = h * (C_E1 * k1[i] + C_E3 * k3[i] + C_E4 * k4[i] + C_E5 * k5[i] + C_E6 * k6[i] + C_E7 * k7[i])


cdef double err_norm(const double* y, const double* y_new, const double* err,
                     double rtol, double atol) noexcept nogil:
    cdef double worst = 0.0, sc, v
    cdef int i
    for i in range(4):
        sc = atol + rtol * max(fabs(y[i]), fabs(y_new[i]))
        v = fabs(err[i]) / sc
        if v > worst:
            worst = v
    return worst


cdef double locate(const double* y, const double* k1, double h, Model* m) noexcept nogil:
    cdef double lo = 0.0, hi = h, mid, f_lo, f_hi, f_mid
    cdef double yn[4], k7[4], err[4]
    f_lo = y[0] - m.r_max
    dp_step(y, k1, h, m, yn, k7, err)
    f_hi = yn[0] - m.r_max
    while hi - lo > EVENT_TOL:
        mid = 0.5 * (lo + hi)
        dp_step(y, k1, mid, m, yn, k7, err)
        f_mid = yn[0] - m.r_max
        if f_mid >= 0.0:
            hi = mid
            f_hi = f_mid
        else:
            lo = mid
            f_lo = f_mid
    if f_hi - f_lo > 0.0:
        return lo - f_lo * (hi - lo) / (f_hi - f_lo)
    return hi


def integrate_stance(double theta, double rdot, double thetadot, double r_max, double kappa,
                     double g, double rtol, double atol, double t_max, record=None):
    """See ``_stance_py.integrate_stance``; ``record`` is not supported here."""
    if record is not None:
        raise ValueError("the compiled kernel does not record traces")
    cdef Model m
    m.r_max = r_max
    m.kappa = kappa
    m.g = g
    cdef double y[4], y_new[4], k1[4], k7[4], err[4], y_ev[4]
    cdef double t = 0.0, h = 1e-3, e, s
    cdef int steps = 0, i
    y[0] = r_max
    y[1] = theta
    y[2] = rdot
    y[3] = thetadot
    if rdot >= 0.0:
        return 4, 0.0, y[0], y[1], y[2], y[3], 0
    rhs(y, k1, &m)
    while t < t_max:
        if h < 1e-14:
            return 3, t, y[0], y[1], y[2], y[3], steps
        h = min(h, t_max - t)
        dp_step(y, k1, h, &m, y_new, k7, err)
        e = err_norm(y, y_new, err, rtol, atol)
        if e > 1.0:
            h *= max(0.2, 0.9 * pow(e, -0.2))
            continue
        steps += 1
        if y_new[0] - r_max >= 0.0:
            s = locate(y, k1, h, &m)
            dp_step(y, k1, s, &m, y_ev, k7, err)
            return 0, t + s, y_ev[0], y_ev[1], y_ev[2], y_ev[3], steps
        if y_new[0] <= 0.0:
            return 1, t + h, y_new[0], y_new[1], y_new[2], y_new[3], steps
        t += h
        for i in range(4):
            y[i] = y_new[i]
            k1[i] = k7[i]
        if e > 0.0:
            h *= min(5.0, 0.9 * pow(e, -0.2))
        else:
            h *= 5.0
    return 2, t, y[0], y[1], y[2], y[3], steps
