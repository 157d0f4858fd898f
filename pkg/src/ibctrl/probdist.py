"""Probability and information-theory primitives.

All information quantities are in nats (natural logarithm).

Zero-probability conventions: ``0 * log(0 / q) = 0`` and ``p * log(p / 0)``
for ``p > 0`` yields ``math.inf`` (returned, not raised), so callers can treat
an infinite divergence as a barrier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import logsumexp

PROB_TOL = 1e-12
PSD_TOL = 1e-10


class InformationError(ValueError):
    """Raised when an information quantity is undefined (singular covariances)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def check_psd(m: np.ndarray, name: str = "matrix", tol: float = PSD_TOL) -> np.ndarray:
    """Symmetrize ``m`` and verify its eigenvalues are >= -tol."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    if np.max(np.abs(m - m.T), initial=0.0) > tol * max(1.0, np.max(np.abs(m), initial=0.0)):
        raise ValueError(f"{name} is not symmetric")
    m = symmetrize(m)
    if m.size and np.linalg.eigvalsh(m)[0] < -tol * max(1.0, np.max(np.abs(m))):
        raise ValueError(f"{name} is not positive semidefinite")
    return m


@dataclass(frozen=True)
class Categorical:
    """Distribution over ``len(probs)`` symbols."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).ravel()
        if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > PROB_TOL * max(1, p.size):
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def size(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        """Most likely symbol; ties go to the lowest index."""
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).ravel()
        cov = check_psd(np.atleast_2d(self.cov), "covariance")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class CondTable:
    """Row-stochastic matrix; row ``i`` is the distribution conditioned on symbol ``i``."""

    table: np.ndarray

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.table, dtype=float))
        if t.ndim != 2 or np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValueError("conditional table must be a finite nonnegative matrix")
        bad = np.abs(t.sum(axis=1) - 1.0) > PROB_TOL * max(1, t.shape[1])
        if np.any(bad):
            raise ValueError(f"rows {np.flatnonzero(bad).tolist()} are not normalized")
        object.__setattr__(self, "table", _frozen(t))

    @property
    def shape(self) -> tuple[int, int]:
        return self.table.shape


@dataclass(frozen=True)
class LinearGaussianChannel:
    """Channel ``y = C x + offset + noise`` with ``noise ~ N(0, noise_cov)``."""

    C: np.ndarray
    noise_cov: np.ndarray
    offset: np.ndarray | None = None

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        noise = check_psd(self.noise_cov, "noise covariance")
        if noise.shape != (C.shape[0], C.shape[0]):
            raise ValueError("noise covariance does not match channel output dimension")
        off = np.zeros(C.shape[0]) if self.offset is None else np.asarray(self.offset, float).ravel()
        object.__setattr__(self, "C", _frozen(C))
        object.__setattr__(self, "noise_cov", _frozen(noise))
        object.__setattr__(self, "offset", _frozen(off))


def _as_probs(p) -> np.ndarray:
    return p.probs if isinstance(p, Categorical) else np.asarray(p, dtype=float)


def kl_categorical(p, q) -> float:
    p, q = _as_probs(p), _as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        return math.inf
    return max(0.0, float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


def kl_gaussian(p: Gaussian, q: Gaussian) -> float:
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    sign_q, logdet_q = np.linalg.slogdet(q.cov)
    if sign_q <= 0 or not np.isfinite(logdet_q):
        raise InformationError("KL undefined: reference covariance is singular")
    sign_p, logdet_p = np.linalg.slogdet(p.cov)
    if sign_p <= 0:
        return math.inf
    diff = q.mean - p.mean
    trace = np.trace(np.linalg.solve(q.cov, p.cov))
    maha = diff @ np.linalg.solve(q.cov, diff)
    return max(0.0, 0.5 * float(trace + maha - p.dim + logdet_q - logdet_p))


def kl_divergence(p: Union[Categorical, Gaussian], q: Union[Categorical, Gaussian]) -> float:
    """KL(p || q) in nats.

    Categorical pairs return ``math.inf`` when ``p`` puts mass where ``q`` has
    none. Gaussian pairs raise :class:`InformationError` if ``q.cov`` is singular.
    """
    if isinstance(p, Gaussian) and isinstance(q, Gaussian):
        return kl_gaussian(p, q)
    if isinstance(p, Gaussian) or isinstance(q, Gaussian):
        raise TypeError("both distributions must be the same kind")
    return kl_categorical(p, q)


def joint_table(marginal, conditional) -> np.ndarray:
    p = _as_probs(marginal)
    table = conditional.table if isinstance(conditional, CondTable) else np.asarray(conditional, float)
    if table.shape[0] != p.size:
        raise ValueError(f"conditional has {table.shape[0]} rows, marginal has {p.size} entries")
    return p[:, None] * table


def mutual_information_discrete(marginal, conditional) -> float:
    joint = joint_table(marginal, conditional)
    table = conditional.table if isinstance(conditional, CondTable) else np.asarray(conditional, float)
    out = joint.sum(axis=0)
    mask = joint > 0
    ratio = np.log(table[mask]) - np.log(np.broadcast_to(out, joint.shape)[mask])
    return max(0.0, float(np.sum(joint[mask] * ratio)))


def mutual_information_gaussian(marginal: Gaussian, channel: LinearGaussianChannel) -> float:
    C = channel.C
    if C.shape[1] != marginal.dim:
        raise ValueError("channel input dimension does not match marginal")
    sign_n, logdet_n = np.linalg.slogdet(channel.noise_cov)
    if sign_n <= 0 or not np.isfinite(logdet_n):
        raise InformationError("noise covariance is singular: information is infinite")
    out_cov = C @ marginal.cov @ C.T + channel.noise_cov
    _, logdet_out = np.linalg.slogdet(out_cov)
    return max(0.0, 0.5 * float(logdet_out - logdet_n))


def mutual_information(marginal, conditional) -> float:
    """I(x; x~) in nats for a marginal over x and a channel x -> x~."""
    if isinstance(marginal, Gaussian):
        if not isinstance(conditional, LinearGaussianChannel):
            raise TypeError("Gaussian marginals need a LinearGaussianChannel")
        return mutual_information_gaussian(marginal, conditional)
    return mutual_information_discrete(marginal, conditional)


def entropic_risk(cost_values, weights) -> float:
    """``log E_w exp(c)``; always >= the weighted mean of the costs."""
    c = np.asarray(cost_values, dtype=float).ravel()
    w = _as_probs(weights).ravel()
    if c.shape != w.shape:
        raise ValueError("costs and weights differ in size")
    mask = w > 0
    return float(logsumexp(c[mask], b=w[mask]))


def normalize_log_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of log-weights, with ``-inf`` entries mapping to 0."""
    logits = np.asarray(logits, dtype=float)
    lse = logsumexp(logits, axis=-1, keepdims=True)
    return np.exp(logits - lse)
