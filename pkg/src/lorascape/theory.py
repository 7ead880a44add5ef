"""Closed-form rank thresholds, self-consistency maps, finite-size fits,
generalization bounds, and the trajectory-based PL-constant estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleRankError, UndefinedEstimateError
from .synthetic import FeatureOperator

PL_DENOM_GUARD = 1e-12


@dataclass
class ThresholdReport:
    m: int
    n: int
    K: int
    N: int
    old_min_rank: int
    old_min_rank_sqrt_approx: int
    new_min_rank: int
    cstar_used: float
    rho_at: dict[int, float] = field(default_factory=dict)


@dataclass
class PLEstimate:
    mu_hat: float
    l_star_used: float
    trajectory_length: int
    pairs_used: int


def capacity(m: int, n: int, r: int) -> int:
    """Gauge-mod-out dimension of the rank-r factored manifold."""
    return r * (m + n) - r * r


def rho(m: int, n: int, K: int, N: int, r: int) -> float:
    """Capacity per scalar target."""
    return capacity(m, n, r) / (K * N)


def old_min_rank(K: int, N: int) -> int:
    """Smallest r with r(r+1)/2 > KN (the symmetric-count condition)."""
    if K < 1 or N < 1:
        raise ValueError("K, N must be >= 1")
    kn = K * N
    r = 1
    while r * (r + 1) // 2 <= kn:
        r += 1
    return r


def old_min_rank_sqrt_approx(K: int, N: int) -> int:
    """ceil(sqrt(2 KN)), the rounding under which the old rule is often quoted."""
    return math.ceil(math.sqrt(2 * K * N))


def new_min_rank(m: int, n: int, K: int, N: int, cstar: float) -> int:
    """Smallest r with r(m+n) - r^2 > cstar * KN."""
    if cstar < 1:
        raise ValueError("cstar must be >= 1")
    required = cstar * K * N
    r_peak = (m + n) // 2
    max_cap = capacity(m, n, r_peak)
    if max_cap <= required:
        raise InfeasibleRankError(max_cap, required)
    for r in range(1, r_peak + 1):
        if capacity(m, n, r) > required:
            return r
    raise InfeasibleRankError(max_cap, required)   # unreachable


def threshold_report(m: int, n: int, K: int, N: int, cstar: float,
                     ranks: tuple[int, ...] = ()) -> ThresholdReport:
    report = ThresholdReport(
        m=m, n=n, K=K, N=N,
        old_min_rank=old_min_rank(K, N),
        old_min_rank_sqrt_approx=old_min_rank_sqrt_approx(K, N),
        new_min_rank=new_min_rank(m, n, K, N, cstar),
        cstar_used=cstar,
    )
    for r in ranks:
        report.rho_at[r] = rho(m, n, K, N, r)
    return report


def cstar_from_c(c: float) -> float:
    """Self-consistent threshold constant 1 / (1 - sqrt(c))^2 for c in [0, 1)."""
    if not 0 <= c < 1:
        raise ValueError("c must lie in [0, 1)")
    return 1.0 / (1.0 - math.sqrt(c)) ** 2


def c_from_cstar(cstar: float) -> float:
    """Inverse map (1 - 1/sqrt(cstar))^2 for cstar >= 1."""
    if cstar < 1:
        raise ValueError("cstar must be >= 1")
    return (1.0 - 1.0 / math.sqrt(cstar)) ** 2


def tracy_widom_fit(points: list[tuple[float, float]]) -> tuple[float, float, float]:
    """Least-squares fit of C*(KN) = C*_inf + b KN^(-2/3).

    Returns (cstar_inf, b, residual_norm).
    """
    if len(points) < 3:
        raise ValueError("need at least 3 (KN, Cstar) points")
    kn = np.array([float(k) for k, _ in points])
    cs = np.array([float(c) for _, c in points])
    if np.allclose(kn, kn[0]):
        raise ValueError("all KN values equal; design matrix is rank-deficient")
    design = np.column_stack([np.ones_like(kn), kn ** (-2.0 / 3.0)])
    coef, _, _, _ = np.linalg.lstsq(design, cs, rcond=None)
    resid = float(np.linalg.norm(design @ coef - cs))
    return float(coef[0]), float(coef[1]), resid


@dataclass
class RademacherBound:
    value: float
    operator_factor: float
    monotone_regime: bool


def rademacher_bound(B: float, m: int, n: int, r: int, N: int,
                     op: FeatureOperator | None = None) -> RademacherBound:
    """Capacity-based complexity bound (B / sqrt(N)) sqrt(r(m+n) - r^2).

    The absorbed constant (the largest slice operator norm) is reported
    as a separate factor when an operator is supplied, 1 otherwise.
    The bound grows in r only up to (m+n)/2; beyond that the regime
    flag is cleared.
    """
    if B <= 0 or N <= 0:
        raise ValueError("B and N must be positive")
    if not 1 <= r < m + n:
        raise ValueError("r must satisfy 1 <= r < m + n")
    value = (B / math.sqrt(N)) * math.sqrt(capacity(m, n, r))
    factor = 1.0
    if op is not None:
        factor = max(
            float(np.linalg.svd(op.jacobians[i, j], compute_uv=False)[0])
            for i in range(op.N) for j in range(op.K)
        )
    return RademacherBound(value, factor, r <= (m + n) / 2)


def pl_estimate(trajectory: np.ndarray, l_star: float) -> PLEstimate:
    """Gradient-domination constant along a recorded trajectory.

    trajectory rows are (loss, grad_norm) pairs; only pairs with
    loss > l_star + guard enter.  mu_hat is the minimum over pairs of
    (grad_norm^2 / 2) / (loss - l_star).
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] < 2:
        raise ValueError("trajectory must be an array of (loss, grad_norm) rows")
    losses, grads = traj[:, 0], traj[:, 1]
    mask = losses > l_star + PL_DENOM_GUARD
    if not np.any(mask):
        raise UndefinedEstimateError(
            "no trajectory pair lies above the loss floor denominator guard"
        )
    ratios = 0.5 * grads[mask] ** 2 / (losses[mask] - l_star)
    return PLEstimate(float(ratios.min()), float(l_star), len(traj), int(mask.sum()))
