"""Closed-form analytics of the threshold birth-death chain of one pair.

Under threshold ``l`` the flagged server idles in states ``0..l`` (down rate
``mu_hat``) and serves in states above ``l`` (down rate ``mu_hat + mu_k``);
arrivals occur at rate ``Lambda`` everywhere. Only rate ratios matter, so the
uniformized rates of :class:`PairParameters` are used directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PairParameters

DEFAULT_N_TRUNC = 500


class UnstableChainError(ValueError):
    """The threshold chain is not positive recurrent."""


@dataclass(frozen=True)
class ThresholdChain:
    params: PairParameters
    threshold: int

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        p = self.params
        if p.lambda_arr > 0 and not p.lambda_arr < p.mu_hat + p.mu_k:
            raise UnstableChainError(
                f"unstable chain: Lambda={p.lambda_arr:g} >= mu_hat + mu_k={p.mu_hat + p.mu_k:g}"
            )


@dataclass(frozen=True)
class StationaryDistribution:
    probabilities: np.ndarray
    tail_mass: float
    threshold: int

    @property
    def total(self) -> float:
        return float(self.probabilities.sum() + self.tail_mass)

    def expectation(self, values: np.ndarray) -> float:
        """``sum_i values[i] * pi(i)`` over the finite part."""
        return float(np.dot(self.probabilities, values[: len(self.probabilities)]))


def _ratios(chain: ThresholdChain) -> tuple[float, float]:
    p = chain.params
    active = p.lambda_arr / (p.mu_hat + p.mu_k)
    # passive ratio Lambda/mu_hat is infinite when mu_hat == 0
    passive = np.inf if p.mu_hat == 0 else p.lambda_arr / p.mu_hat
    return passive, active


def _geometric_sum(q: float, n: int) -> float:
    """``sum_{k=0}^{n-1} q**k``, using the count at ``q == 1``."""
    if n <= 0:
        return 0.0
    if q == 1.0:
        return float(n)
    if q == 0.0:
        return 1.0
    # expm1/log1p keep the ratio accurate when q is within rounding of 1
    return float(np.expm1(n * np.log1p(q - 1.0)) / (q - 1.0))


def stationary_distribution(chain: ThresholdChain, n_trunc: int = DEFAULT_N_TRUNC) -> StationaryDistribution:
    """Stationary law on ``0..n_trunc`` plus the analytic mass above ``n_trunc``.

    Weights are ``r**i`` up to the threshold and ``r**l * s**(i-l)`` above it,
    with ``r = Lambda/mu_hat`` and ``s = Lambda/(mu_hat + mu_k)``. When
    ``r > 1`` they are renormalized by ``r**l`` to avoid overflow, which also
    covers ``mu_hat == 0`` (all mass on ``l, l+1, ...``).
    """
    ell = chain.threshold
    if chain.params.lambda_arr == 0:
        probs = np.zeros(n_trunc + 1)
        probs[0] = 1.0
        return StationaryDistribution(probs, 0.0, ell)
    r, s = _ratios(chain)
    idx = np.arange(n_trunc + 1)
    tail_coef = s / (1.0 - s)
    if r <= 1.0:
        # weights relative to state 0
        head = np.where(idx <= ell, r ** np.minimum(idx, ell), 0.0)
        top = r**ell
        z_head = _geometric_sum(r, ell + 1)
    else:
        q = 1.0 / r
        head = np.where(idx <= ell, q ** np.maximum(ell - idx, 0), 0.0)
        top = 1.0
        z_head = _geometric_sum(q, ell + 1)
    above = np.where(idx > ell, top * s ** np.maximum(idx - ell, 0), 0.0)
    z = z_head + top * tail_coef
    probs = (head + above) / z
    if n_trunc >= ell:
        tail = top * s ** (n_trunc - ell + 1) / (1.0 - s) / z
    else:
        # rest of the passive stretch plus the whole active tail
        if r <= 1.0:
            rest = r ** (n_trunc + 1) * _geometric_sum(r, ell - n_trunc)
        else:
            rest = _geometric_sum(q, ell - n_trunc)
        tail = (rest + top * tail_coef) / z
    return StationaryDistribution(probs, float(tail), ell)


def cumulative_passive_mass(chain: ThresholdChain) -> float:
    """Stationary probability of the passive set ``{0, ..., l}``.

    Equals ``S / (S + r**l * s/(1-s))`` with ``S = sum_{i<=l} r**i``; written
    in terms of ``q = 1/r`` so it stays finite for ``mu_hat == 0``.
    """
    ell = chain.threshold
    if chain.params.lambda_arr == 0:
        return 1.0
    r, s = _ratios(chain)
    tail_coef = s / (1.0 - s)
    # S / r**l = sum_{k=0}^{l} q**k
    q = 0.0 if np.isinf(r) else 1.0 / r
    if q <= 1.0:
        head = _geometric_sum(q, ell + 1)
        return head / (head + tail_coef)
    # r < 1: S / r**l overflows for large l, so scale by r**l instead
    head = _geometric_sum(r, ell + 1)
    return head / (head + r**ell * tail_coef)


def kernels(params: PairParameters, n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Passive (``p1``) and active (``p2``) transition matrices on ``0..n_max``.

    At ``n_max`` the arrival probability is folded into the self-loop.
    """
    lam, mk, mh = params.lambda_arr, params.mu_k, params.mu_hat
    n = n_max + 1
    p1 = np.zeros((n, n))
    p2 = np.zeros((n, n))
    for p, down in ((p1, mh), (p2, mh + mk)):
        i = np.arange(n)
        up = np.where(i < n_max, lam, 0.0)
        dn = np.where(i > 0, down, 0.0)
        p[i[:-1], i[:-1] + 1] = up[:-1]
        p[i[1:], i[1:] - 1] = dn[1:]
        p[i, i] = 1.0 - up - dn
    return p1, p2
