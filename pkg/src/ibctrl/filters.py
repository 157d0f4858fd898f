"""Online filters that track only the TRVs, plus the controls applied from them.

Discrete case: the encoder and the state marginals induce a TRV chain
``q_t(xt' | xt, u)`` and a TRV sensor ``sigma_t(y | xt)``; a plain Bayes
filter runs on those tables.

Linear-Gaussian case: the same construction gives a linear-Gaussian system
on the TRVs (``InducedTRVSystem``) and the filter is a Kalman filter on it.
The induced system treats its process and measurement noises as
independent, which holds for the marginals but not jointly (both depend on
the unobserved ``x_t | xt_t``); see ``induced_cross_covariance``.

Timeline used throughout: the belief over ``xt_0`` starts at the encoder
marginal, each stage first folds in ``y_t`` and then the policy acts on the
most likely TRV; the next stage begins with a process update using the
input just applied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lg import AffinePolicy, GaussianTrajectory, LGSolution, LGSystem
from .probdist import Categorical, Gaussian, LinearGaussianChannel, symmetrize

ROW_TOL = 1e-10


class FilterError(RuntimeError):
    pass


# ---------------------------------------------------------------- discrete

@dataclass(frozen=True)
class InducedDiscrete:
    """TRV-space tables; ``process[t]`` maps stage ``t`` to ``t + 1``."""

    process: np.ndarray      # (T-1, k, m, k)
    sensor: np.ndarray       # (T, k, l)
    prior: np.ndarray        # (k,) marginal of xt_0
    unreachable: np.ndarray  # (T, k) TRVs with zero marginal mass


def _sensor_stack(sensor, T: int, n: int) -> np.ndarray:
    s = np.asarray(sensor, float)
    if s.ndim == 2:
        s = np.broadcast_to(s, (T,) + s.shape)
    if s.ndim != 3 or s.shape[:2] != (T, n):
        raise ValueError(f"sensor table must have shape ({n}, l) or ({T}, {n}, l), got {np.shape(sensor)}")
    if np.any(s < 0) or np.max(np.abs(s.sum(axis=2) - 1.0)) > ROW_TOL:
        raise ValueError("sensor rows must be probability distributions")
    return s


def posterior_states(encoder: np.ndarray, marginal: np.ndarray):
    """``p_t(x | xt)`` as a ``(k, n)`` table and the mask of zero-mass TRVs."""
    joint = marginal[:, None] * encoder              # (n, k)
    mass = joint.sum(axis=0)
    dead = mass <= 0.0
    post = np.where(dead[:, None], 1.0 / encoder.shape[0], joint.T / np.where(dead, 1.0, mass)[:, None])
    return post, dead


def precompute_induced_discrete(sys, solution, sensor) -> InducedDiscrete:
    """Build the TRV chain and TRV sensor from a discrete solution.

    ``sensor[x, y]`` (or ``sensor[t, x, y]``) is ``sigma_t(y | x)``. TRVs
    that the encoder never emits get a uniform placeholder posterior and
    are reported in ``unreachable``.
    """
    T, n, m, k = sys.horizon, sys.n_states, sys.n_inputs, sys.n_trvs
    sig = _sensor_stack(sensor, T, n)
    enc, marg = np.asarray(solution.encoders), np.asarray(solution.marginals)
    proc = np.empty((max(T - 1, 0), k, m, k))
    meas = np.empty((T, k, sig.shape[2]))
    dead = np.zeros((T, k), bool)
    for t in range(T):
        post, dead[t] = posterior_states(enc[t], marg[t])
        meas[t] = post @ sig[t]
        if t + 1 < T:
            nxt = np.einsum("ax,xuy->auy", post, sys.transitions[t])   # p(x' | xt, u)
            proc[t] = nxt @ enc[t + 1]
    return InducedDiscrete(proc, meas, marg[0] @ enc[0], dead)


def bayes_step(belief, u_prev, y: int, process, sensor):
    """One filter step; returns ``(belief, impossible)``.

    ``process`` is a ``(k, m, k)`` table (or ``None`` on the first step,
    which skips the process update) and ``sensor`` a ``(k, l)`` table. When
    the observation has zero probability under the predicted belief the
    predicted belief is returned unchanged and ``impossible`` is True.
    """
    b = belief.probs if isinstance(belief, Categorical) else np.asarray(belief, float)
    prior = b if process is None else b @ np.asarray(process)[:, int(u_prev), :]
    post = prior * np.asarray(sensor)[:, int(y)]
    mass = post.sum()
    if mass <= 0.0:
        return Categorical(prior / prior.sum()), True
    return Categorical(post / mass), False


def mle_control(belief, policy_t, rng: np.random.Generator | None = None):
    """Input from the maximum-likelihood TRV.

    Discrete: ``u ~ pi_t(. | argmax bel)`` (lowest index wins ties); a
    one-hot policy row returns its action without touching ``rng``.
    Gaussian: ``policy_t`` is ``(K, h)`` and the input is ``K mean + h``.
    """
    if isinstance(belief, Gaussian):
        K, h = policy_t
        return np.asarray(K) @ belief.mean + np.asarray(h)
    row = np.asarray(policy_t, float)[belief.argmax()]
    return _draw(row, rng)


def sampled_control(belief: Categorical, policy_t, rng: np.random.Generator) -> int:
    """Input from a TRV drawn from the belief rather than its mode."""
    xt = int(rng.choice(belief.size, p=belief.probs))
    return _draw(np.asarray(policy_t, float)[xt], rng)


def _draw(row: np.ndarray, rng) -> int:
    best = int(np.argmax(row))
    if row[best] >= 1.0 - 1e-12:
        return best
    if rng is None:
        raise ValueError("a stochastic policy row needs a random generator")
    return int(rng.choice(row.size, p=row / row.sum()))


# ---------------------------------------------------------------- linear-Gaussian

@dataclass(frozen=True)
class InducedTRVSystem:
    """``xt' = A xt + B u + r + eps``, ``y = D xt + offset + omega``.

    Process arrays are indexed by the stage they leave (``T - 1`` entries);
    measurement arrays by the stage they observe (``T`` entries). The
    conditional moments of the state given the TRV,
    ``x | xt ~ N(cond_gain (xt - xt_bar) + x_bar, cond_cov)``, are kept
    for inspection.
    """

    A: np.ndarray
    B: np.ndarray
    r: np.ndarray
    process_cov: np.ndarray
    D: np.ndarray
    offset: np.ndarray
    meas_cov: np.ndarray
    prior: Gaussian
    cond_gain: np.ndarray | None = None
    cond_cov: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.D.shape[0]

    def to_dict(self) -> dict:
        d = {name: np.asarray(getattr(self, name)).tolist()
             for name in ("A", "B", "r", "process_cov", "D", "offset", "meas_cov")}
        d["prior"] = {"mean": self.prior.mean.tolist(), "cov": self.prior.cov.tolist()}
        return d


def _channels(sensor, T: int) -> list[LinearGaussianChannel]:
    if isinstance(sensor, LinearGaussianChannel):
        return [sensor] * T
    sensor = list(sensor)
    if len(sensor) != T:
        raise ValueError(f"need one sensor channel per stage ({T}), got {len(sensor)}")
    return sensor


def build_induced_lg(sol: LGSolution, sys: LGSystem, sensor, gauss: GaussianTrajectory | None = None):
    """Induced TRV system for a solved LG problem and sensor ``y = D x + omega``.

    ``sensor`` is one :class:`LinearGaussianChannel` or one per stage; a
    channel offset is added to the measurement offset.
    """
    enc = sol.encoder
    gauss = gauss or sol.gaussians
    T, k = enc.C.shape[0], enc.C.shape[1]
    chans = _channels(sensor, T)
    l = chans[0].C.shape[0]
    A_ = np.empty((max(T - 1, 0), k, k))
    B_ = np.empty((max(T - 1, 0), k, sys.n_inputs))
    r_ = np.empty((max(T - 1, 0), k))
    W_ = np.empty((max(T - 1, 0), k, k))
    D_ = np.empty((T, l, k))
    o_ = np.empty((T, l))
    V_ = np.empty((T, l, l))
    G = np.empty((T, sys.n_states, k))
    S = np.empty((T, sys.n_states, sys.n_states))
    for t in range(T):
        C, Sx, xbar = enc.C[t], gauss.covs[t], gauss.means[t]
        Sxt = gauss.trv_covs[t]
        try:
            G[t] = np.linalg.solve(Sxt, C @ Sx).T          # Sigma_x C' Sigma_xt^-1
        except np.linalg.LinAlgError as exc:
            raise FilterError(f"TRV covariance is singular at t={t}") from exc
        S[t] = symmetrize(Sx - G[t] @ C @ Sx)
        ch = chans[t]
        D_[t] = ch.C @ G[t]
        o_[t] = ch.C @ xbar + ch.offset - D_[t] @ gauss.trv_means[t]
        V_[t] = symmetrize(ch.C @ S[t] @ ch.C.T + ch.noise_cov)
        if t + 1 < T:
            Cn = enc.C[t + 1]
            A_[t] = Cn @ sys.A[t] @ G[t]
            B_[t] = Cn @ sys.B[t]
            r_[t] = Cn @ sys.A[t] @ xbar + enc.a[t + 1] - A_[t] @ gauss.trv_means[t]
            Sn = sys.A[t] @ S[t] @ sys.A[t].T + sys.process_cov[t]
            W_[t] = symmetrize(Cn @ Sn @ Cn.T + enc.noise_cov[t + 1])
    prior = Gaussian(gauss.trv_means[0], gauss.trv_covs[0])
    return InducedTRVSystem(A_, B_, r_, W_, D_, o_, V_, prior, G, S)


def plain_filter_model(sys: LGSystem, sensor) -> InducedTRVSystem:
    """The system itself in filter form (TRV = state, no encoder noise)."""
    T = sys.horizon
    chans = _channels(sensor, T)
    return InducedTRVSystem(
        np.array(sys.A[:T - 1]), np.array(sys.B[:T - 1]), np.zeros((T - 1, sys.n_states)),
        np.array(sys.process_cov[:T - 1]),
        np.array([c.C for c in chans]), np.array([c.offset for c in chans]),
        np.array([c.noise_cov for c in chans]), Gaussian(sys.init_mean, sys.init_cov))


def induced_cross_covariance(model: InducedTRVSystem, sys: LGSystem, sol: LGSolution, sensor, t: int):
    """Cov(xt_{t+1}, y_t | xt_t) of the true pipeline; the induced model sets it to zero."""
    ch = _channels(sensor, model.horizon)[t]
    return sol.encoder.C[t + 1] @ sys.A[t] @ model.cond_cov[t] @ ch.C.T


def kalman_predict(belief: Gaussian, u, model: InducedTRVSystem, t: int) -> Gaussian:
    """Process update from stage ``t`` to ``t + 1``."""
    A = model.A[t]
    mean = A @ belief.mean + model.B[t] @ np.atleast_1d(u) + model.r[t]
    return Gaussian(mean, symmetrize(A @ belief.cov @ A.T + model.process_cov[t]))


def kalman_update(belief: Gaussian, y, model: InducedTRVSystem, t: int):
    """Measurement update at stage ``t``; returns ``(belief, innovation, innovation_cov)``.

    The covariance uses the Joseph form ``(I - L D) P (I - L D)' + L V L'``.
    """
    D, V, P = model.D[t], model.meas_cov[t], belief.cov
    nu = np.asarray(y, float) - D @ belief.mean - model.offset[t]
    S = symmetrize(D @ P @ D.T + V)
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise FilterError(f"innovation covariance is singular at t={t}") from exc
    # L = P D' S^-1 via two triangular solves
    L = np.linalg.solve(chol.T, np.linalg.solve(chol, D @ P)).T
    I_LD = np.eye(P.shape[0]) - L @ D
    cov = symmetrize(I_LD @ P @ I_LD.T + L @ V @ L.T)
    return Gaussian(belief.mean + L @ nu, cov), nu, S


def kalman_step(belief: Gaussian, u_prev, y, model: InducedTRVSystem, t: int) -> Gaussian:
    """Predict from ``t - 1`` with ``u_prev`` (skipped when ``u_prev`` is None), then fold in ``y_t``."""
    if u_prev is not None:
        belief = kalman_predict(belief, u_prev, model, t - 1)
    return kalman_update(belief, y, model, t)[0]


def nis(innovation, innovation_cov) -> float:
    """Normalized innovation squared."""
    return float(innovation @ np.linalg.solve(innovation_cov, innovation))


def lg_policy(policy: AffinePolicy, t: int):
    return policy.K[t], policy.h[t]


# ---------------------------------------------------------------- nonlinear (EKF on perturbations)

@dataclass(frozen=True)
class PerturbationFilter:
    """Kalman filter on ``delta xt`` around a nominal trajectory.

    Measurements are shifted by ``D x_hat_t`` (nominal state) before the
    update, so the induced model of the perturbation LG problem applies.
    """

    model: InducedTRVSystem
    nominal_states: np.ndarray
    sensor_D: np.ndarray   # (T, l, n)

    def start(self) -> Gaussian:
        return self.model.prior

    def step(self, belief: Gaussian, u_delta_prev, y, t: int):
        if u_delta_prev is not None:
            belief = kalman_predict(belief, u_delta_prev, self.model, t - 1)
        return kalman_update(belief, np.asarray(y) - self.sensor_D[t] @ self.nominal_states[t], self.model, t)


def perturbation_filter(nlg_solution, sensor, full_state: bool = False) -> PerturbationFilter:
    """EKF for an NLG solution; ``full_state`` filters ``delta x`` instead of ``delta xt``."""
    sys, sol, traj = nlg_solution.lg_system, nlg_solution.lg_solution, nlg_solution.trajectory
    T = traj.horizon
    chans = _channels(sensor, T)
    model = plain_filter_model(sys, chans) if full_state else build_induced_lg(sol, sys, chans)
    return PerturbationFilter(model, traj.states, np.array([c.C for c in chans]))
