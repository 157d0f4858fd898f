"""Pure-Python stance integrator; the compiled ``_stance_ext`` mirrors it line by line.

Dormand-Prince 5(4) with sup-norm error control, from touchdown (``r = r_max``)
to the liftoff event (``r`` back at ``r_max`` with ``r_dot > 0``). The event is
located by bisecting the step length of a single RK step from the last
accepted point, then polished with one regula-falsi step so the event time
is a smooth function of the initial state (finite differences need that).

Return codes: 0 liftoff, 1 leg collapsed (``r <= 0``), 2 no liftoff before
``t_max``, 3 step size underflow, 4 leg extending at touchdown.
"""
import math

OK, COLLAPSED, NO_LIFTOFF, UNDERFLOW, NOT_COMPRESSING = 0, 1, 2, 3, 4

# Dormand-Prince tableau
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1, E3, E4, E5, E6, E7 = 71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40

EVENT_TOL = 1e-12


def rhs(y, r_max, kappa, g):
    r, th, rd, thd = y
    return (rd, thd, r * thd * thd - g * math.cos(th) + kappa * (r_max - r),
            (g * math.sin(th) - 2.0 * rd * thd) / r)


def _comb(y, h, ks, coefs):
    out = list(y)
    for k, c in zip(ks, coefs):
        if c != 0.0:
            for i in range(4):
                out[i] += h * c * k[i]
    return out


def dp_step(y, k1, h, r_max, kappa, g):
    """One Dormand-Prince step; returns ``(y_new, k7, err_vector)``."""
    k2 = rhs(_comb(y, h, (k1,), (A21,)), r_max, kappa, g)
    k3 = rhs(_comb(y, h, (k1, k2), (A31, A32)), r_max, kappa, g)
    k4 = rhs(_comb(y, h, (k1, k2, k3), (A41, A42, A43)), r_max, kappa, g)
    k5 = rhs(_comb(y, h, (k1, k2, k3, k4), (A51, A52, A53, A54)), r_max, kappa, g)
    k6 = rhs(_comb(y, h, (k1, k2, k3, k4, k5), (A61, A62, A63, A64, A65)), r_max, kappa, g)
    y_new = _comb(y, h, (k1, k3, k4, k5, k6), (B1, B3, B4, B5, B6))
    k7 = rhs(y_new, r_max, kappa, g)
    err = [h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i])
           for i in range(4)]
    return y_new, k7, err


def _err_norm(y, y_new, err, rtol, atol):
    worst = 0.0
    for i in range(4):
        sc = atol + rtol * max(abs(y[i]), abs(y_new[i]))
        worst = max(worst, abs(err[i]) / sc)
    return worst


def _locate(y, k1, h, r_max, kappa, g):
    """Step length in ``(0, h]`` where ``r`` returns to ``r_max``."""
    lo, hi = 0.0, h
    f_lo = y[0] - r_max
    f_hi = dp_step(y, k1, h, r_max, kappa, g)[0][0] - r_max
    while hi - lo > EVENT_TOL:
        mid = 0.5 * (lo + hi)
        f_mid = dp_step(y, k1, mid, r_max, kappa, g)[0][0] - r_max
        if f_mid >= 0.0:
            hi, f_hi = mid, f_mid
        else:
            lo, f_lo = mid, f_mid
    if f_hi - f_lo > 0.0:
        return lo - f_lo * (hi - lo) / (f_hi - f_lo)
    return hi


def integrate_stance(theta, rdot, thetadot, r_max, kappa, g, rtol, atol, t_max, record=None):
    """Integrate one stance phase.

    Returns ``(code, t, r, theta, rdot, thetadot, n_steps)``. When ``record``
    is a list, ``(t, r, theta, rdot, thetadot)`` is appended at every
    accepted step (and at the event).
    """
    y = [r_max, theta, rdot, thetadot]
    if rdot >= 0.0:
        return NOT_COMPRESSING, 0.0, y[0], y[1], y[2], y[3], 0
    t = 0.0
    h = 1e-3
    k1 = rhs(y, r_max, kappa, g)
    steps = 0
    if record is not None:
        record.append((t, y[0], y[1], y[2], y[3]))
    while t < t_max:
        if h < 1e-14:
            return UNDERFLOW, t, y[0], y[1], y[2], y[3], steps
        h = min(h, t_max - t)
        y_new, k7, err = dp_step(y, k1, h, r_max, kappa, g)
        e = _err_norm(y, y_new, err, rtol, atol)
        if e > 1.0:
            h *= max(0.2, 0.9 * e ** -0.2)
            continue
        steps += 1
        if y_new[0] - r_max >= 0.0:
            s = _locate(y, k1, h, r_max, kappa, g)
            y_ev = dp_step(y, k1, s, r_max, kappa, g)[0]
            if record is not None:
                record.append((t + s, y_ev[0], y_ev[1], y_ev[2], y_ev[3]))
            return OK, t + s, y_ev[0], y_ev[1], y_ev[2], y_ev[3], steps
        if y_new[0] <= 0.0:
            return COLLAPSED, t + h, y_new[0], y_new[1], y_new[2], y_new[3], steps
        t += h
        y, k1 = y_new, k7
        if record is not None:
            record.append((t, y[0], y[1], y[2], y[3]))
        h *= min(5.0, 0.9 * e ** -0.2) if e > 0.0 else 5.0
    return NO_LIFTOFF, t, y[0], y[1], y[2], y[3], steps
