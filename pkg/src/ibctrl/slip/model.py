"""Planar spring-loaded inverted pendulum (SLIP) and its touchdown return map.

Stance runs in polar coordinates about the foot: the point mass sits at
``foot + r (-sin th, cos th)``, so ``th > 0`` means the foot is ahead of the
hip when travelling in +x. Flight is an exact parabola. The return map takes
the touchdown state ``[d, th, r_dot, th_dot]`` (``d`` = horizontal mass
position) and a touchdown-angle input ``dth`` to the next touchdown state.

Next touchdown angle. Two conventions are supported:

* ``"liftoff"`` (default): ``th_next = -th_liftoff + dth``, i.e. the leg is
  placed at the mirror image of the liftoff angle plus the input;
* ``"touchdown"``: ``th_next = th + dth``, relative to the previous touchdown.

The default is the one under which the nominal gait
``[0, 0.3927, -3.273, -6.788]`` is (to 1e-3) a fixed point of the map.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from . import _stance_py
from .kernel import integrate_stance

CONVENTIONS = ("liftoff", "touchdown")
NOMINAL_GAIT = (0.0, 0.3927, -3.273, -6.788)


class FailedHop(RuntimeError):
    """A hop that does not complete; ``phase`` is ``"stance"`` or ``"flight"``."""

    def __init__(self, phase: str, message: str):
        super().__init__(f"{phase}: {message}")
        self.phase = phase


@dataclass(frozen=True)
class SlipParams:
    mass: float = 1.0
    stiffness: float = 300.0
    gravity: float = 9.8
    r_max: float = 1.0
    convention: str = "liftoff"
    rtol: float = 1e-9
    atol: float = 1e-11
    max_stance_time: float = 5.0
    # optional touchdown-angle guard, see ``next_touchdown_angle``
    guard_clearance: float | None = None
    guard_width: float = 1e-3

    def __post_init__(self):
        for name in ("mass", "stiffness", "gravity", "r_max", "rtol", "atol", "max_stance_time"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")
        if self.guard_clearance is not None and not (self.guard_clearance > 0 and math.isfinite(self.guard_clearance)):
            raise ValueError("guard_clearance must be positive (or None to disable the guard)")
        if not (self.guard_width > 0 and math.isfinite(self.guard_width)):
            raise ValueError("guard_width must be positive")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}, got {self.convention!r}")

    def with_tolerances(self, rtol: float, atol: float) -> "SlipParams":
        d = asdict(self)
        d.update(rtol=rtol, atol=atol)
        return SlipParams(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SlipParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown SLIP parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TouchdownState:
    d: float
    theta: float
    r_dot: float
    theta_dot: float

    def __post_init__(self):
        vals = (self.d, self.theta, self.r_dot, self.theta_dot)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"touchdown state has non-finite entries: {vals}")
        if abs(self.theta) >= math.pi / 2:
            raise ValueError(f"touchdown angle {self.theta} is not within (-pi/2, pi/2)")

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.theta, self.r_dot, self.theta_dot])

    @classmethod
    def from_array(cls, x) -> "TouchdownState":
        x = np.asarray(x, dtype=float).ravel()
        if x.size != 4:
            raise ValueError("touchdown state has 4 entries: d, theta, r_dot, theta_dot")
        return cls(*map(float, x))


def stance_dynamics(params: SlipParams, state) -> np.ndarray:
    """Time derivative of the polar stance state ``(r, th, r_dot, th_dot)``."""
    r = float(state[0])
    if r <= 0:
        raise FailedHop("stance", f"leg length {r} is not positive")
    return np.array(_stance_py.rhs(tuple(map(float, state)), params.r_max,
                                   params.stiffness / params.mass, params.gravity))


def stance_energy(params: SlipParams, state) -> float:
    r, th, rd, thd = (float(v) for v in state)
    M = params.mass
    return (0.5 * M * (rd * rd + r * r * thd * thd) + M * params.gravity * r * math.cos(th)
            + 0.5 * params.stiffness * (params.r_max - r) ** 2)


_STANCE_ERRORS = {
    _stance_py.COLLAPSED: "leg collapsed to zero length",
    _stance_py.NO_LIFTOFF: "spring never re-extended (no liftoff)",
    _stance_py.UNDERFLOW: "integrator step size underflow",
    _stance_py.NOT_COMPRESSING: "leg is not compressing at touchdown",
}


def _stance(params: SlipParams, theta, rdot, thetadot, record=None, kernel=None):
    fn = kernel or (_stance_py.integrate_stance if record is not None else integrate_stance)
    code, t, r, th, rd, thd, _ = fn(theta, rdot, thetadot, params.r_max, params.stiffness / params.mass,
                                    params.gravity, params.rtol, params.atol, params.max_stance_time,
                                    record)
    if code != _stance_py.OK:
        raise FailedHop("stance", f"{_STANCE_ERRORS[code]} (t={t:.6g}, r={r:.6g})")
    return t, r, th, rd, thd


@dataclass(frozen=True)
class Liftoff:
    time: float
    theta: float
    x: float
    z: float
    vx: float
    vz: float


def liftoff(params: SlipParams, state: TouchdownState, kernel=None, record=None) -> Liftoff:
    t, r, th, rd, thd = _stance(params, state.theta, state.r_dot, state.theta_dot, record, kernel)
    foot = state.d + params.r_max * math.sin(state.theta)
    return Liftoff(t, th, foot - r * math.sin(th), r * math.cos(th),
                   -rd * math.sin(th) - r * thd * math.cos(th),
                   rd * math.cos(th) - r * thd * math.sin(th))


def _softplus(x: float, w: float) -> float:
    return w * float(np.logaddexp(0.0, x / w))


def _guard(params: SlipParams, lo: Liftoff, command: float, direction: float):
    """Guarded angle and its derivatives ``(theta, d/d command, d/d apex)``.

    Measured in the direction of travel, the angle is kept above the
    smallest one whose touchdown height ``r_max cos(theta)`` lies
    ``guard_clearance`` below the apex, through a softplus of width
    ``guard_width`` so the map stays smooth.
    """
    apex = lo.z + lo.vz * lo.vz / (2.0 * params.gravity)
    c_min = (apex - params.guard_clearance) / params.r_max
    if c_min >= 1.0:
        th_min, dmin = 0.0, 0.0
    elif c_min <= 0.0:
        raise FailedHop("flight", f"apex {apex:.6g} is below the guard clearance {params.guard_clearance:g}")
    else:
        th_min = math.acos(c_min)
        dmin = -1.0 / (params.r_max * math.sin(th_min))
    a = direction * command - th_min
    p = float(expit(a / params.guard_width))
    theta = direction * (th_min + _softplus(a, params.guard_width))
    return theta, p, direction * (1.0 - p) * dmin


def next_touchdown_angle(params: SlipParams, state: TouchdownState, lo: Liftoff, delta_theta: float) -> float:
    """Commanded angle: the convention's base angle plus ``delta_theta``.

    With ``guard_clearance`` set, the command is smoothly saturated so the
    apex always clears the touchdown height by at least that much (a leg
    placement reflex; without it, targets that need very short flights
    drive the optimum onto the grazing limit where the map is not smooth).
    """
    base = -lo.theta if params.convention == "liftoff" else state.theta
    command = base + delta_theta
    if params.guard_clearance is None:
        return command
    return _guard(params, lo, command, _direction(params, state))[0]


def touchdown_velocity(params: SlipParams, state: TouchdownState) -> tuple[float, float]:
    s, c = math.sin(state.theta), math.cos(state.theta)
    r = params.r_max
    return (-state.r_dot * s - r * state.theta_dot * c, state.r_dot * c - r * state.theta_dot * s)


def _direction(params, state) -> float:
    return math.copysign(1.0, touchdown_velocity(params, state)[0])


def flight_time(params: SlipParams, lo: Liftoff, theta_next: float, direction: float = 1.0) -> float:
    """Time until the mass descends to the touchdown height ``r_max cos(theta_next)``.

    ``direction`` is the sign of travel at the preceding touchdown; a flight
    whose horizontal velocity does not share it is a failed (backward) hop.
    """
    if abs(theta_next) >= math.pi / 2:
        raise FailedHop("flight", f"touchdown angle {theta_next:.4g} is not within (-pi/2, pi/2)")
    if lo.vx * direction <= 0:
        raise FailedHop("flight", f"backward flight (vx={lo.vx:.4g})")
    z_td = params.r_max * math.cos(theta_next)
    g = params.gravity
    disc = lo.vz * lo.vz + 2.0 * g * (lo.z - z_td)
    # disc / 2g is the clearance of the apex over the touchdown height
    if disc < 0.0:
        apex = lo.z + lo.vz * lo.vz / (2.0 * g)
        raise FailedHop("flight", f"apex {apex:.6g} is below the touchdown height {z_td:.6g}")
    return (lo.vz + math.sqrt(disc)) / g


def return_map(params: SlipParams, state, delta_theta: float = 0.0, kernel=None) -> TouchdownState:
    """Touchdown-to-touchdown map.

    Raises :class:`FailedHop` when the stance never ends in liftoff, the
    apex is too low for the requested touchdown angle, or the flight goes
    backwards.
    """
    if not isinstance(state, TouchdownState):
        state = TouchdownState.from_array(state)
    lo = liftoff(params, state, kernel)
    th = next_touchdown_angle(params, state, lo, float(delta_theta))
    tf = flight_time(params, lo, th, _direction(params, state))
    vz = lo.vz - params.gravity * tf
    x = lo.x + lo.vx * tf
    s, c = math.sin(th), math.cos(th)
    return TouchdownState(x, th, -lo.vx * s + vz * c, (-lo.vx * c - vz * s) / params.r_max)


def return_map_array(params: SlipParams, x, u) -> np.ndarray:
    """Array form for solvers: ``x`` is ``[d, th, r_dot, th_dot]``, ``u`` is ``[dth]``."""
    return return_map(params, x, float(np.ravel(u)[0])).as_array()


def _central_jacobian(params, x, u, hx, hu):
    n = x.size
    A = np.empty((n, n))
    B = np.empty((n, 1))
    for i in range(n):
        e = np.zeros(n)
        e[i] = hx[i]
        A[:, i] = (return_map_array(params, x + e, u) - return_map_array(params, x - e, u)) / (2 * hx[i])
    B[:, 0] = (return_map_array(params, x, u + hu) - return_map_array(params, x, u - hu)) / (2 * hu)
    return A, B


def _liftoff_array(params, x):
    """``(x_lo - d, z, vx, vz, th_lo)``; independent of ``d``."""
    lo = liftoff(params, TouchdownState(0.0, *map(float, x[1:])))
    return np.array([lo.x, lo.z, lo.vx, lo.vz, lo.theta])


def _stance_jacobian(params, x, hx):
    """Central differences of the liftoff vector in ``(th, r_dot, th_dot)``."""
    J = np.empty((5, 3))
    for i in range(1, 4):
        e = np.zeros(4)
        e[i] = hx[i]
        J[:, i - 1] = (_liftoff_array(params, x + e) - _liftoff_array(params, x - e)) / (2 * hx[i])
    return J


def flight_jacobian(params: SlipParams, lo: Liftoff, theta_next: float, direction: float = 1.0) -> np.ndarray:
    """Exact derivative of the next touchdown state in ``(x, z, vx, vz, theta_next)`` at liftoff.

    Shape ``(4, 5)``. The flight is a parabola, so no differencing is
    needed; this stays accurate right up to a grazing touchdown, where
    the flight time behaves like the square root of the apex clearance.
    """
    flight_time(params, lo, theta_next, direction)  # same failure checks as the map
    g, r = params.gravity, params.r_max
    s, c = math.sin(theta_next), math.cos(theta_next)
    sq = math.sqrt(lo.vz * lo.vz + 2.0 * g * (lo.z - r * c))
    tf = (lo.vz + sq) / g
    # rows of d(sq) and d(tf) over (x, z, vx, vz, th)
    dsq = np.array([0.0, g, 0.0, lo.vz, g * r * s]) / sq
    dtf = (np.array([0.0, 0.0, 0.0, 1.0, 0.0]) + dsq) / g
    J = np.empty((4, 5))
    J[0] = np.array([1.0, 0.0, tf, 0.0, 0.0]) + lo.vx * dtf
    J[1] = [0.0, 0.0, 0.0, 0.0, 1.0]
    J[2] = np.array([0.0, 0.0, -s, 0.0, -lo.vx * c + sq * s]) - c * dsq
    J[3] = (np.array([0.0, 0.0, -c, 0.0, lo.vx * s + sq * c]) + s * dsq) / r
    return J


def _hybrid_jacobian(params, x, u, hx):
    state = TouchdownState.from_array(x)
    lo = liftoff(params, state)
    direction = _direction(params, state)
    S = _stance_jacobian(params, x, hx)
    # liftoff vector and theta_next as functions of (d, th, r_dot, th_dot)
    L = np.zeros((5, 4))
    L[0, 0] = 1.0
    L[:4, 1:] = S[:4]
    L[4, 1:] = -S[4] if params.convention == "liftoff" else [1.0, 0.0, 0.0]
    command = (-lo.theta if params.convention == "liftoff" else state.theta) + u
    th, d_cmd = command, 1.0
    if params.guard_clearance is not None:
        th, d_cmd, d_apex = _guard(params, lo, command, direction)
        L[4] = d_cmd * L[4] + d_apex * (L[1] + lo.vz / params.gravity * L[3])
    F = flight_jacobian(params, lo, th, direction)
    return F @ L, d_cmd * F[:, 4:5]


def linearize_return_map(params: SlipParams, state, delta_theta: float = 0.0, step: float = 1e-6,
                         check: bool = True, rel_tol: float = 1e-4, flight: str = "exact"):
    """Jacobians ``(A 4x4, B 4x1)`` of the return map.

    The stance part has no closed form and is differenced centrally with
    steps ``max(step, step |x_i|)``. With ``flight="exact"`` (default) the
    differences stop at liftoff and the flight parabola is differentiated
    exactly, so the stencil never straddles the apex-clearance limit; with
    ``flight="difference"`` the whole map is differenced. With ``check``
    the differences are recomputed at half the step and must agree to
    ``rel_tol`` (relative to the largest entry); the half-step pair is then
    combined by Richardson extrapolation.
    """
    if flight not in ("exact", "difference"):
        raise ValueError(f"flight must be 'exact' or 'difference', got {flight!r}")
    x = state.as_array() if isinstance(state, TouchdownState) else np.asarray(state, float).ravel()
    u = float(delta_theta)
    hx = np.maximum(step, step * np.abs(x))
    hu = max(step, step * abs(u))
    if flight == "exact":
        def jac(scale):
            return _hybrid_jacobian(params, x, u, hx * scale)
    else:
        def jac(scale):
            return _central_jacobian(params, x, u, hx * scale, hu * scale)
    try:
        A1, B1 = jac(1.0)
        if not check:
            return A1, B1
        A2, B2 = jac(0.5)
    except FailedHop as exc:
        raise FailedHop(exc.phase, f"hop failed inside the difference stencil ({exc}); "
                                   "use a smaller step or a different nominal") from exc
    scale = max(1.0, float(np.max(np.abs(A2))), float(np.max(np.abs(B2))))
    gap = max(float(np.max(np.abs(A1 - A2))), float(np.max(np.abs(B1 - B2)))) / scale
    if gap > rel_tol:
        raise ArithmeticError(f"finite-difference Jacobian is not step-consistent (relative gap {gap:.3g})")
    return (4 * A2 - A1) / 3, (4 * B2 - B1) / 3


def hop_trace(params: SlipParams, state, delta_theta: float = 0.0, n_flight: int = 50, t0: float = 0.0):
    """Rows ``(t, phase, r, th, r_dot, th_dot, x, z)`` for one hop.

    Stance rows are the accepted integrator steps. Flight rows sample the
    parabola; their polar columns describe the leg held at the next
    touchdown angle (length ``r_max``, no motion).
    """
    if not isinstance(state, TouchdownState):
        state = TouchdownState.from_array(state)
    record = []
    lo = liftoff(params, state, kernel=_stance_py.integrate_stance, record=record)
    foot = state.d + params.r_max * math.sin(state.theta)
    rows = [(t0 + t, "stance", r, th, rd, thd, foot - r * math.sin(th), r * math.cos(th))
            for t, r, th, rd, thd in record]
    th_next = next_touchdown_angle(params, state, lo, float(delta_theta))
    tf = flight_time(params, lo, th_next, _direction(params, state))
    for s in np.linspace(0.0, tf, n_flight + 1)[1:]:
        rows.append((t0 + lo.time + s, "flight", params.r_max, th_next, 0.0, 0.0,
                     lo.x + lo.vx * s, lo.z + lo.vz * s - 0.5 * params.gravity * s * s))
    return rows


def write_trace_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "phase", "r", "theta", "r_dot", "theta_dot", "x", "z"])
        for row in rows:
            w.writerow([f"{row[0]:.12g}", row[1]] + [f"{v:.12g}" for v in row[2:]])
