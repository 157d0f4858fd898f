"""Information-bottleneck synthesis for linear-Gaussian systems with quadratic cost.

System ``x' = A_t x + B_t u + eps``, encoder ``xt = C_t x + a_t + eta`` and
policy ``u = K_t xt + h_t``. Every marginal stays Gaussian, the cost-to-go
stays quadratic ``nu_t(x) = 0.5 x'P_t x + b_t'x + const``, and the three
steps of the alternating scheme all have closed forms:

* forward: Gaussian propagation of the closed loop,
* encoder: the stationarity conditions

      inv(Sigma_eta) = inv(Sigma_xt) + beta K'(R + B'P'B)K
      C = -beta Sigma_eta K'B'P'A
      beta K'(R + B'P'B)K a = inv(Sigma_xt) C xbar - beta l0

  which are solved directly (see :func:`encoder_stage`),
* policy: an unconstrained convex QP in ``(K_t, h_t)``.

Arrays are stacked over time: ``A[t]`` is ``n x n``, ``C[t]`` is ``k x n``,
``K[t]`` is ``m x k``; ``P`` and state moments run over ``t = 0..T``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .probdist import PSD_TOL, symmetrize

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-10
CLIP_LIMIT = 1e-6


class LGError(RuntimeError):
    pass


def _stack(arr, T: int, shape: tuple, name: str) -> np.ndarray:
    """Broadcast a time-invariant array to ``(T,) + shape`` and check it."""
    a = np.asarray(arr, dtype=float)
    if a.shape == shape:
        a = np.broadcast_to(a, (T,) + shape)
    if a.shape != (T,) + shape:
        raise ValueError(f"{name} must have shape {shape} or {(T,) + shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    a = np.array(a)
    a.setflags(write=False)
    return a


def _check_psd_stack(arr: np.ndarray, name: str) -> None:
    for t, m in enumerate(arr):
        if np.max(np.abs(m - m.T), initial=0.0) > PSD_TOL * max(1.0, np.max(np.abs(m), initial=0.0)):
            raise ValueError(f"{name}[{t}] is not symmetric")
        if m.size and np.linalg.eigvalsh(m)[0] < -PSD_TOL * max(1.0, np.max(np.abs(m))):
            raise ValueError(f"{name}[{t}] is not positive semidefinite")


def clip_psd(m: np.ndarray, floor: float = 0.0, what: str = "covariance") -> np.ndarray:
    """Symmetrize and lift eigenvalues to ``floor``.

    Raises if a negative eigenvalue deeper than ``CLIP_LIMIT`` (relative)
    had to be removed, since that is a real error rather than round-off.
    """
    m = symmetrize(m)
    if m.size == 0:
        return m
    vals, vecs = np.linalg.eigh(m)
    scale = max(1.0, float(np.max(np.abs(vals))))
    if vals[0] < -CLIP_LIMIT * scale:
        raise LGError(f"{what} has eigenvalue {vals[0]:.3g}; clip exceeds tolerance")
    if vals[0] >= floor:
        return m
    vals = np.maximum(vals, floor)
    return symmetrize((vecs * vals) @ vecs.T)


def _arr(x) -> list:
    return np.asarray(x).tolist()


@dataclass(frozen=True)
class LGSystem:
    A: np.ndarray
    B: np.ndarray
    process_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    beta: float
    horizon: int | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.init_mean, dtype=float)).ravel()
        n = mean.size
        A = np.asarray(self.A, dtype=float)
        T = self.horizon if self.horizon is not None else (A.shape[0] if A.ndim == 3 else None)
        if T is None:
            raise ValueError("horizon is required for time-invariant matrices")
        T = int(T)
        if T <= 0:
            raise ValueError("horizon must be positive")
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        m = B.shape[-1]
        A = _stack(A, T, (n, n), "A")
        B = _stack(B, T, (n, m), "B")
        W = _stack(self.process_cov, T, (n, n), "process_cov")
        _check_psd_stack(W, "process_cov")
        S0 = np.atleast_2d(np.asarray(self.init_cov, dtype=float))
        if S0.shape != (n, n):
            raise ValueError(f"init_cov must be {n}x{n}")
        _check_psd_stack(S0[None], "init_cov")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        for name, val in (("A", A), ("B", B), ("process_cov", W), ("init_mean", mean),
                          ("init_cov", symmetrize(S0))):
            val = np.array(val)
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "horizon", T)
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def n_states(self) -> int:
        return self.init_mean.size

    @property
    def n_inputs(self) -> int:
        return self.B.shape[2]

    def with_beta(self, beta: float) -> "LGSystem":
        return LGSystem(self.A, self.B, self.process_cov, self.init_mean, self.init_cov, beta, self.horizon)

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "beta": self.beta, "A": _arr(self.A), "B": _arr(self.B),
                "process_cov": _arr(self.process_cov), "init_mean": _arr(self.init_mean),
                "init_cov": _arr(self.init_cov)}

    @classmethod
    def from_dict(cls, d: dict) -> "LGSystem":
        missing = [k for k in ("A", "B", "process_cov", "init_mean", "init_cov", "beta") if k not in d]
        if missing:
            raise KeyError(f"LG scenario is missing fields: {', '.join(missing)}")
        return cls(d["A"], d["B"], d["process_cov"], d["init_mean"], d["init_cov"], d["beta"], d.get("horizon"))


@dataclass(frozen=True)
class QuadCost:
    """``c_t = 0.5 (x-g)'Q(x-g) + 0.5 (u-w)'R(u-w)``, terminal ``0.5 (x-g_T)'Q_T(x-g_T)``."""

    Q: np.ndarray
    R: np.ndarray
    g: np.ndarray
    w: np.ndarray
    Q_T: np.ndarray
    g_T: np.ndarray

    @classmethod
    def build(cls, n: int, m: int, T: int, Q=None, R=None, g=None, w=None, Q_T=None, g_T=None) -> "QuadCost":
        """Fill in defaults (zeros) and broadcast time-invariant pieces."""
        Q = _stack(np.zeros((n, n)) if Q is None else np.atleast_2d(Q), T, (n, n), "Q")
        R = _stack(np.zeros((m, m)) if R is None else np.atleast_2d(R), T, (m, m), "R")
        g = _stack(np.zeros(n) if g is None else np.atleast_1d(g), T, (n,), "g")
        w = _stack(np.zeros(m) if w is None else np.atleast_1d(w), T, (m,), "w")
        Q_T = np.zeros((n, n)) if Q_T is None else np.atleast_2d(np.asarray(Q_T, float))
        g_T = np.zeros(n) if g_T is None else np.atleast_1d(np.asarray(g_T, float))
        return cls(Q, R, g, w, Q_T, g_T)

    def __post_init__(self):
        Q, R = np.asarray(self.Q, float), np.asarray(self.R, float)
        if Q.ndim != 3 or R.ndim != 3:
            raise ValueError("Q and R must be stacked over time; use QuadCost.build")
        T, n, m = Q.shape[0], Q.shape[1], R.shape[1]
        vals = {"Q": Q, "R": R, "g": _stack(self.g, T, (n,), "g"), "w": _stack(self.w, T, (m,), "w"),
                "Q_T": np.asarray(self.Q_T, float), "g_T": np.asarray(self.g_T, float).ravel()}
        if vals["Q_T"].shape != (n, n) or vals["g_T"].shape != (n,):
            raise ValueError("terminal cost dimensions do not match Q")
        _check_psd_stack(Q, "Q")
        _check_psd_stack(R, "R")
        _check_psd_stack(vals["Q_T"][None], "Q_T")
        for name, val in vals.items():
            val = np.array(val)
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def horizon(self) -> int:
        return self.Q.shape[0]

    def stage(self, t: int, x: np.ndarray, u: np.ndarray) -> float:
        dx, du = x - self.g[t], u - self.w[t]
        return 0.5 * float(dx @ self.Q[t] @ dx + du @ self.R[t] @ du)

    def terminal(self, x: np.ndarray) -> float:
        dx = x - self.g_T
        return 0.5 * float(dx @ self.Q_T @ dx)

    def to_dict(self) -> dict:
        return {"Q": _arr(self.Q), "R": _arr(self.R), "g": _arr(self.g), "w": _arr(self.w),
                "Q_T": _arr(self.Q_T), "g_T": _arr(self.g_T)}

    @classmethod
    def from_dict(cls, d: dict, n: int, m: int, T: int) -> "QuadCost":
        return cls.build(n, m, T, d.get("Q"), d.get("R"), d.get("g"), d.get("w"), d.get("Q_T"), d.get("g_T"))


@dataclass(frozen=True)
class AffineEncoder:
    C: np.ndarray          # (T, k, n)
    a: np.ndarray          # (T, k)
    noise_cov: np.ndarray  # (T, k, k)

    @property
    def n_trvs(self) -> int:
        return self.C.shape[1]


@dataclass(frozen=True)
class AffinePolicy:
    K: np.ndarray  # (T, m, k)
    h: np.ndarray  # (T, m)


@dataclass(frozen=True)
class QuadValue:
    P: np.ndarray  # (T+1, n, n)
    b: np.ndarray  # (T+1, n)


@dataclass(frozen=True)
class GaussianTrajectory:
    means: np.ndarray      # (T+1, n)
    covs: np.ndarray       # (T+1, n, n)
    trv_means: np.ndarray  # (T, k)
    trv_covs: np.ndarray   # (T, k, k)


@dataclass(frozen=True)
class LGOptions:
    max_iterations: int = 500
    tol: float = 1e-12
    param_tol: float = 1e-11
    seed: int = 0
    trv_dim: int | None = None
    init_scale: float = 1e-2
    warm_start_policy: bool = True

    def __post_init__(self):
        if int(self.max_iterations) <= 0:
            raise ValueError("max_iterations must be positive")
        if not self.tol > 0 or not self.param_tol > 0:
            raise ValueError("tolerances must be positive")
        if self.trv_dim is not None and int(self.trv_dim) <= 0:
            raise ValueError("trv_dim must be positive")


@dataclass
class LGSolution:
    encoder: AffineEncoder
    policy: AffinePolicy
    values: QuadValue
    gaussians: GaussianTrajectory
    objective_trace: list[float] = field(default_factory=list)
    status: str = "iteration_cap"
    iterations: int = 0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self) -> dict:
        e, p = self.encoder, self.policy
        return {"kind": "lg_solution", "status": self.status, "iterations": self.iterations,
                "objective_trace": list(self.objective_trace),
                "C": _arr(e.C), "a": _arr(e.a), "noise_cov": _arr(e.noise_cov),
                "K": _arr(p.K), "h": _arr(p.h), "P": _arr(self.values.P), "b": _arr(self.values.b),
                "means": _arr(self.gaussians.means), "covs": _arr(self.gaussians.covs)}


# ---------------------------------------------------------------- forward

def propagate_gaussians(sys: LGSystem, enc: AffineEncoder, pol: AffinePolicy) -> GaussianTrajectory:
    T, n, k = sys.horizon, sys.n_states, enc.n_trvs
    means = np.empty((T + 1, n))
    covs = np.empty((T + 1, n, n))
    tm = np.empty((T, k))
    tc = np.empty((T, k, k))
    means[0], covs[0] = sys.init_mean, sys.init_cov
    for t in range(T):
        A, B, C, K = sys.A[t], sys.B[t], enc.C[t], pol.K[t]
        S = covs[t]
        tm[t] = C @ means[t] + enc.a[t]
        tc[t] = symmetrize(C @ S @ C.T + enc.noise_cov[t])
        M = A + B @ K @ C
        BK = B @ K
        means[t + 1] = M @ means[t] + B @ (K @ enc.a[t] + pol.h[t])
        covs[t + 1] = clip_psd(M @ S @ M.T + BK @ enc.noise_cov[t] @ BK.T + sys.process_cov[t],
                               what=f"state covariance at t={t + 1}")
    return GaussianTrajectory(means, covs, tm, tc)


def _inv_psd(S: np.ndarray, what: str) -> np.ndarray:
    try:
        c = linalg.cho_factor(S)
    except linalg.LinAlgError as exc:
        raise LGError(f"{what} is singular") from exc
    return linalg.cho_solve(c, np.eye(S.shape[0]))


# ---------------------------------------------------------------- values

def value_stage(sys: LGSystem, cost: QuadCost, t: int, C, a, noise, K, h, xbar, Sx, Pn, bn):
    """One backward step of the quadratic cost-to-go; returns ``(P_t, b_t)``."""
    A, B = sys.A[t], sys.B[t]
    Q, R = cost.Q[t], cost.R[t]
    Sinv = _inv_psd(symmetrize(C @ Sx @ C.T + noise), f"TRV covariance at t={t}")
    G = C.T @ Sinv @ C
    M = A + B @ K @ C
    off = K @ a + h
    KC = K @ C
    P = Q + KC.T @ R @ KC + M.T @ Pn @ M + G / sys.beta
    b = (-Q @ cost.g[t] + KC.T @ R @ (off - cost.w[t]) + M.T @ Pn @ B @ off + M.T @ bn
         - G @ xbar / sys.beta)
    return symmetrize(P), b


def backward_value(sys: LGSystem, cost: QuadCost, enc: AffineEncoder, pol: AffinePolicy,
                   gauss: GaussianTrajectory) -> QuadValue:
    T, n = sys.horizon, sys.n_states
    P = np.empty((T + 1, n, n))
    b = np.empty((T + 1, n))
    P[T], b[T] = cost.Q_T, -cost.Q_T @ cost.g_T
    for t in range(T - 1, -1, -1):
        P[t], b[t] = value_stage(sys, cost, t, enc.C[t], enc.a[t], enc.noise_cov[t], pol.K[t], pol.h[t],
                                 gauss.means[t], gauss.covs[t], P[t + 1], b[t + 1])
    return QuadValue(P, b)


# ---------------------------------------------------------------- encoder

def _encoder_terms(sys, cost, t, K, h, Pn, bn):
    A, B, R = sys.A[t], sys.B[t], cost.R[t]
    W0 = R + B.T @ Pn @ B
    W = symmetrize(K.T @ W0 @ K)
    L = K.T @ B.T @ Pn @ A
    l0 = K.T @ R @ (h - cost.w[t]) + K.T @ B.T @ (Pn @ B @ h + bn)
    return W, L, l0


def encoder_stage(sys: LGSystem, cost: QuadCost, t: int, K, h, xbar, Sx, Pn, bn, noise_prev, a_prev):
    """Solve the encoder stationarity conditions at one stage.

    Substituting ``C = -beta E L`` (``E = Sigma_eta``) into the first
    condition reduces it to ``N E W = N / beta - W / beta**2`` with
    ``N = L Sx L'``. In the basis ``Z`` of generalized eigenvectors of
    ``(N, W)`` on the range of ``W`` (completed by the null space of ``W``)
    both are diagonal and ``E = Z diag(e) Z'`` with
    ``e_i = 1/beta - 1/(beta**2 nu_i)`` wherever ``beta nu_i > 1``.

    The remaining directions carry no information at this beta. They get no
    share of ``C`` and keep their previous noise; the next policy QP then
    gives them zero gain, after which they lie in the null space of ``W``
    and the conditions hold there for any noise and offset.
    """
    beta = sys.beta
    k = K.shape[1]
    W, L, l0 = _encoder_terms(sys, cost, t, K, h, Pn, bn)
    wv, wvec = np.linalg.eigh(W)
    active = wv > 1e-12 * max(1.0, float(np.max(np.abs(wv), initial=0.0)))
    V, U = wvec[:, active], wvec[:, ~active]
    if not V.shape[1]:
        return np.zeros((k, Sx.shape[0])), np.array(a_prev, float), clip_psd(noise_prev, NOISE_FLOOR)
    N = symmetrize(L @ Sx @ L.T)
    nu, Y = linalg.eigh(V.T @ N @ V, V.T @ W @ V)
    Z = np.hstack([V @ Y, U])
    info = np.concatenate([nu * beta > 1.0, np.zeros(U.shape[1], bool)])
    Zinv = np.linalg.inv(Z)
    rest = ~info
    Et = np.zeros((k, k))
    Et[np.ix_(rest, rest)] = (Zinv @ noise_prev @ Zinv.T)[np.ix_(rest, rest)]
    nu_i = nu[info[:nu.size]]
    Et[info, info] = 1.0 / beta - 1.0 / (beta * beta * nu_i)
    E = clip_psd(Z @ Et @ Z.T, NOISE_FLOOR, what=f"encoder noise at t={t}")
    Zi = Z[:, info]
    C = -beta * Zi @ (Et[np.ix_(info, info)] @ (Zi.T @ L))
    # offset: informative part from the third condition, the rest kept
    a_t = Zinv @ np.asarray(a_prev, float)
    if np.any(info):
        S = symmetrize(C @ Sx @ C.T + E)
        rhs = np.linalg.solve(S, C @ xbar) - beta * l0
        # Zi' W Zi = I, so the informative coordinates solve directly
        a_t[info] = Zi.T @ rhs / beta
    return C, Z @ a_t, E


def update_encoders(sys: LGSystem, cost: QuadCost, enc: AffineEncoder, pol: AffinePolicy,
                    gauss: GaussianTrajectory):
    """Backward sweep of encoder updates; returns ``(encoder, values)``."""
    T = sys.horizon
    C, a, E = np.array(enc.C), np.array(enc.a), np.array(enc.noise_cov)
    P = np.empty((T + 1, sys.n_states, sys.n_states))
    b = np.empty((T + 1, sys.n_states))
    P[T], b[T] = cost.Q_T, -cost.Q_T @ cost.g_T
    for t in range(T - 1, -1, -1):
        C[t], a[t], E[t] = encoder_stage(sys, cost, t, pol.K[t], pol.h[t], gauss.means[t], gauss.covs[t],
                                         P[t + 1], b[t + 1], E[t], a[t])
        P[t], b[t] = value_stage(sys, cost, t, C[t], a[t], E[t], pol.K[t], pol.h[t],
                                 gauss.means[t], gauss.covs[t], P[t + 1], b[t + 1])
    return AffineEncoder(C, a, E), QuadValue(P, b)


# ---------------------------------------------------------------- policy

def stage_objective(sys: LGSystem, cost: QuadCost, t: int, K, h, C, a, noise, xbar, Sx, Pn, bn) -> float:
    """Expected input cost plus expected cost-to-go at one stage.

    This is the per-stage policy objective ``J(K, h)``; terms that do not
    depend on ``(K, h)`` (state cost, information) are omitted.
    """
    A, B, R, w = sys.A[t], sys.B[t], cost.R[t], cost.w[t]
    S = C @ Sx @ C.T + noise
    ubar = K @ (C @ xbar + a) + h
    xn = A @ xbar + B @ ubar
    AxC = A @ Sx @ C.T @ K.T @ B.T
    Sn = A @ Sx @ A.T + AxC + AxC.T + B @ K @ S @ K.T @ B.T + sys.process_cov[t]
    du = ubar - w
    return 0.5 * float(np.trace(R @ K @ S @ K.T) + du @ R @ du + np.trace(Pn @ Sn) + xn @ Pn @ xn) + float(bn @ xn)


def stage_gradient(sys: LGSystem, cost: QuadCost, t: int, K, h, C, a, noise, xbar, Sx, Pn, bn):
    """Gradient of :func:`stage_objective` in ``(K, h)``."""
    A, B, R, w = sys.A[t], sys.B[t], cost.R[t], cost.w[t]
    S = C @ Sx @ C.T + noise
    xt = C @ xbar + a
    ubar = K @ xt + h
    W0 = R + B.T @ Pn @ B
    gh = W0 @ ubar + B.T @ Pn @ A @ xbar + B.T @ bn - R @ w
    gK = W0 @ K @ S + B.T @ Pn @ A @ Sx @ C.T + np.outer(gh, xt)
    return gK, gh


def policy_stage(sys: LGSystem, cost: QuadCost, t: int, C, a, noise, xbar, Sx, Pn, bn):
    """Exact minimizer of the stage QP (minimum-norm when ``R + B'P'B`` is singular)."""
    A, B, R = sys.A[t], sys.B[t], cost.R[t]
    W0 = symmetrize(R + B.T @ Pn @ B)
    lo = np.linalg.eigvalsh(W0)[0] if W0.size else 0.0
    if lo < -1e-9 * max(1.0, float(np.max(np.abs(W0)))):
        raise LGError(f"policy QP at t={t} is not convex: min eigenvalue of R + B'P'B is {lo:.3g}")
    S = symmetrize(C @ Sx @ C.T + noise)
    Sinv = _inv_psd(S, f"TRV covariance at t={t}")
    pinv = np.linalg.pinv(W0, rcond=1e-13, hermitian=True)
    K = -pinv @ B.T @ Pn @ A @ Sx @ C.T @ Sinv
    h = pinv @ (R @ cost.w[t] - B.T @ Pn @ A @ xbar - B.T @ bn) - K @ (C @ xbar + a)
    return K, h


def update_policies(sys: LGSystem, cost: QuadCost, enc: AffineEncoder, gauss: GaussianTrajectory):
    """Backward sweep of policy QPs; returns ``(policy, values)``."""
    T, n, m, k = sys.horizon, sys.n_states, sys.n_inputs, enc.n_trvs
    K = np.empty((T, m, k))
    h = np.empty((T, m))
    P = np.empty((T + 1, n, n))
    b = np.empty((T + 1, n))
    P[T], b[T] = cost.Q_T, -cost.Q_T @ cost.g_T
    for t in range(T - 1, -1, -1):
        args = (enc.C[t], enc.a[t], enc.noise_cov[t], gauss.means[t], gauss.covs[t])
        K[t], h[t] = policy_stage(sys, cost, t, *args, P[t + 1], b[t + 1])
        P[t], b[t] = value_stage(sys, cost, t, enc.C[t], enc.a[t], enc.noise_cov[t], K[t], h[t],
                                 gauss.means[t], gauss.covs[t], P[t + 1], b[t + 1])
    return AffinePolicy(K, h), QuadValue(P, b)


# ---------------------------------------------------------------- objective

def stage_informations(enc: AffineEncoder, gauss: GaussianTrajectory) -> np.ndarray:
    out = np.empty(enc.C.shape[0])
    for t in range(out.size):
        _, ld_out = np.linalg.slogdet(gauss.trv_covs[t])
        _, ld_n = np.linalg.slogdet(enc.noise_cov[t])
        out[t] = max(0.0, 0.5 * (ld_out - ld_n))
    return out


def expected_stage_costs(cost: QuadCost, enc: AffineEncoder, pol: AffinePolicy,
                         gauss: GaussianTrajectory) -> np.ndarray:
    """``E c_t`` for ``t = 0..T-1`` followed by ``E c_T``."""
    T = cost.horizon
    out = np.empty(T + 1)
    for t in range(T):
        xbar, Sx = gauss.means[t], gauss.covs[t]
        K = pol.K[t]
        ubar = K @ gauss.trv_means[t] + pol.h[t]
        Su = K @ gauss.trv_covs[t] @ K.T
        dx, du = xbar - cost.g[t], ubar - cost.w[t]
        out[t] = 0.5 * (np.trace(cost.Q[t] @ Sx) + dx @ cost.Q[t] @ dx
                        + np.trace(cost.R[t] @ Su) + du @ cost.R[t] @ du)
    dx = gauss.means[T] - cost.g_T
    out[T] = 0.5 * (np.trace(cost.Q_T @ gauss.covs[T]) + dx @ cost.Q_T @ dx)
    return out


def evaluate_objective(sys: LGSystem, cost: QuadCost, enc: AffineEncoder, pol: AffinePolicy) -> float:
    gauss = propagate_gaussians(sys, enc, pol)
    return float(expected_stage_costs(cost, enc, pol, gauss).sum()
                 + stage_informations(enc, gauss).sum() / sys.beta)


def expected_cost(sys: LGSystem, cost: QuadCost, sol: LGSolution) -> float:
    """Expected task cost without the information term."""
    gauss = propagate_gaussians(sys, sol.encoder, sol.policy)
    return float(expected_stage_costs(cost, sol.encoder, sol.policy, gauss).sum())


# ---------------------------------------------------------------- solver

def initial_encoder(sys: LGSystem, k: int, rng: np.random.Generator, scale: float = 1e-2) -> AffineEncoder:
    T, n = sys.horizon, sys.n_states
    return AffineEncoder(scale * rng.standard_normal((T, k, n)), np.zeros((T, k)),
                         np.broadcast_to(np.eye(k), (T, k, k)).copy())


def closed_loop(enc: AffineEncoder, pol: AffinePolicy):
    """Coordinate-free description of the controller: ``(K C, K a + h, K Sigma_eta K')``."""
    K = pol.K
    return (K @ enc.C, np.einsum("tmk,tk->tm", K, enc.a) + pol.h,
            K @ enc.noise_cov @ np.swapaxes(K, 1, 2))


def _rel_change(new, old) -> float:
    return float(np.max(np.abs(new - old)) / max(1.0, np.max(np.abs(old), initial=0.0)))


def solve_lg(sys: LGSystem, cost: QuadCost, opts: LGOptions | None = None) -> LGSolution:
    """Alternate Gaussian propagation, encoder and policy updates.

    Stops when the objective change is below ``tol`` (relative to its
    magnitude) and the closed loop moved by less than ``param_tol``. The
    closed loop is measured through ``K C``, ``K a + h`` and ``K Sigma_eta K'``,
    which do not change under an invertible change of TRV coordinates
    (``xt -> T xt``), so drift along that equal-cost family is not mistaken
    for progress.
    """
    opts = opts or LGOptions()
    if cost.horizon != sys.horizon:
        raise ValueError(f"cost horizon {cost.horizon} differs from system horizon {sys.horizon}")
    if cost.R.shape[1] != sys.n_inputs or cost.Q.shape[1] != sys.n_states:
        raise ValueError("cost dimensions do not match the system")
    k = sys.n_states if opts.trv_dim is None else int(opts.trv_dim)
    rng = np.random.default_rng(opts.seed)
    T, m = sys.horizon, sys.n_inputs
    enc = initial_encoder(sys, k, rng, opts.init_scale)
    pol = AffinePolicy(np.zeros((T, m, k)), np.zeros((T, m)))
    trace = [evaluate_objective(sys, cost, enc, pol)]
    if opts.warm_start_policy:
        # with K = 0 the encoder update returns C = 0 and information never
        # recovers, so fit the policy to the random encoder first
        pol, _ = update_policies(sys, cost, enc, propagate_gaussians(sys, enc, pol))
    status, it = "iteration_cap", 0
    for it in range(1, opts.max_iterations + 1):
        gauss = propagate_gaussians(sys, enc, pol)
        new_enc, _ = update_encoders(sys, cost, enc, pol, gauss)
        new_pol, _ = update_policies(sys, cost, new_enc, propagate_gaussians(sys, new_enc, pol))
        change = max(_rel_change(a, b) for a, b in zip(closed_loop(new_enc, new_pol), closed_loop(enc, pol)))
        enc, pol = new_enc, new_pol
        trace.append(evaluate_objective(sys, cost, enc, pol))
        if not np.isfinite(trace[-1]):
            raise FloatingPointError(f"objective became non-finite at iteration {it}")
        log.debug("lg iteration %d objective %.12g change %.3g", it, trace[-1], change)
        if abs(trace[-1] - trace[-2]) < opts.tol * max(1.0, abs(trace[-1])) and change < opts.param_tol:
            status = "converged"
            break
    gauss = propagate_gaussians(sys, enc, pol)
    values = backward_value(sys, cost, enc, pol, gauss)
    return LGSolution(enc, pol, values, gauss, trace, status, it)


# ---------------------------------------------------------------- diagnostics

def _scaled(resid: np.ndarray, *terms) -> float:
    scale = max([1.0] + [float(np.max(np.abs(x), initial=0.0)) for x in terms])
    return float(np.max(np.abs(resid), initial=0.0)) / scale


def fonc_residuals(sys: LGSystem, cost: QuadCost, sol: LGSolution) -> np.ndarray:
    """Scaled residuals of the three encoder conditions, shape ``(T, 3)``.

    Each residual is the largest entrywise violation divided by the largest
    entry among the terms of that condition (at least 1), so a noise
    covariance resting on the floor does not register as a violation.
    """
    enc, pol = sol.encoder, sol.policy
    gauss = propagate_gaussians(sys, enc, pol)
    vals = backward_value(sys, cost, enc, pol, gauss)
    beta = sys.beta
    out = np.empty((sys.horizon, 3))
    for t in range(sys.horizon):
        W, L, l0 = _encoder_terms(sys, cost, t, pol.K[t], pol.h[t], vals.P[t + 1], vals.b[t + 1])
        C, a, E = enc.C[t], enc.a[t], enc.noise_cov[t]
        Einv = np.linalg.inv(E)
        Sinv = np.linalg.inv(gauss.trv_covs[t])
        out[t, 0] = _scaled(Einv - Sinv - beta * W, Einv, Sinv, beta * W)
        out[t, 1] = _scaled(C + beta * E @ L, C, beta * E @ L)
        lhs, r1 = beta * W @ a, Sinv @ C @ gauss.means[t]
        out[t, 2] = _scaled(lhs - r1 + beta * l0, lhs, r1, beta * l0)
    return out


def policy_gradient_norm(sys: LGSystem, cost: QuadCost, sol: LGSolution) -> float:
    """Largest stage-QP gradient entry at the returned policies, scaled like
    :func:`fonc_residuals` by the largest term of the stationarity equation."""
    enc, pol = sol.encoder, sol.policy
    gauss = propagate_gaussians(sys, enc, pol)
    vals = backward_value(sys, cost, enc, pol, gauss)
    worst = 0.0
    for t in range(sys.horizon):
        A, B, R, Pn, bn = sys.A[t], sys.B[t], cost.R[t], vals.P[t + 1], vals.b[t + 1]
        C, a, E, xbar, Sx = enc.C[t], enc.a[t], enc.noise_cov[t], gauss.means[t], gauss.covs[t]
        gK, gh = stage_gradient(sys, cost, t, pol.K[t], pol.h[t], C, a, E, xbar, Sx, Pn, bn)
        W0 = R + B.T @ Pn @ B
        S = C @ Sx @ C.T + E
        ubar = pol.K[t] @ (C @ xbar + a) + pol.h[t]
        h_terms = (W0 @ ubar, B.T @ Pn @ A @ xbar, B.T @ bn, R @ cost.w[t])
        K_terms = (W0 @ pol.K[t] @ S, B.T @ Pn @ A @ Sx @ C.T)
        worst = max(worst, _scaled(gh, *h_terms), _scaled(gK, *K_terms))
    return worst


def trv_singular_values(sol: LGSolution) -> np.ndarray:
    return np.array([np.linalg.svd(C, compute_uv=False) for C in sol.encoder.C])


# ---------------------------------------------------------------- IO

def problem_to_dict(sys: LGSystem, cost: QuadCost) -> dict:
    d = {"kind": "lg", **sys.to_dict()}
    d["cost"] = cost.to_dict()
    return d


def problem_from_dict(d: dict) -> tuple[LGSystem, QuadCost]:
    if d.get("kind", "lg") != "lg":
        raise ValueError(f"expected an 'lg' scenario, got kind={d.get('kind')!r}")
    sys = LGSystem.from_dict(d)
    if "cost" not in d:
        raise KeyError("LG scenario is missing fields: cost")
    return sys, QuadCost.from_dict(d["cost"], sys.n_states, sys.n_inputs, sys.horizon)


def load_problem(path) -> tuple[LGSystem, QuadCost]:
    return problem_from_dict(json.loads(Path(path).read_text()))


def save_problem(path, sys: LGSystem, cost: QuadCost) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(sys, cost), indent=1))
