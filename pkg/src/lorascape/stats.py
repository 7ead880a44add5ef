"""Entry-wise and spectral diagnostics of feature operators.

Reports, per parameter block: moments, distance to the moment-fitted
normal; globally: the spectrum of the KN x KN Gram matrix of flattened
slices (top eigenvalue, smallest nonzero, condition number, effective
rank at a relative threshold) and entry-wise cross-block correlations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .rng import make_rng
from .synthetic import FeatureOperator

DEFAULT_GRAM_CAP = 4096
DEFAULT_SUBSAMPLE = 10_000_000
DEFAULT_EFF_RANK_THRESHOLD = 0.01


@dataclass
class BlockStats:
    count: int
    mean: float
    std: float
    skewness: float
    excess_kurtosis: float
    ks_distance: float
    subsampled: bool


@dataclass
class GramStats:
    top_eig: float
    min_nonzero_eig: float
    condition_number: float
    effective_rank: int
    kn: int
    threshold: float


@dataclass
class StatsReport:
    blocks: dict[str, BlockStats]
    gram: GramStats | None
    cross_correlations: dict[tuple[str, str], tuple[float, float]]
    effective_rank_threshold: float
    gram_skipped_reason: str | None = None


def _moments(entries: np.ndarray) -> tuple[float, float, float, float]:
    mean = float(entries.mean())
    centered = entries - mean
    var = float(np.mean(centered ** 2))
    std = float(np.sqrt(var))
    skew = float(np.mean(centered ** 3) / std ** 3) if std > 0 else 0.0
    kurt = float(np.mean(centered ** 4) / var ** 2 - 3.0) if std > 0 else 0.0
    return mean, std, skew, kurt


def _block_stats(entries: np.ndarray, subsample: int, seed: int) -> BlockStats:
    flat = entries.ravel()
    sub = False
    if flat.size > subsample:
        idx = make_rng(seed, 4).choice(flat.size, size=subsample, replace=False)
        flat = flat[idx]
        sub = True
    mean, std, skew, kurt = _moments(flat)
    # KS distance against the moment-fitted normal, not a fixed N(0, 1).
    ks = float(scipy.stats.kstest(flat, "norm", args=(mean, std)).statistic)
    return BlockStats(flat.size, mean, std, skew, kurt, ks, sub)


def _cross_corr(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Per-position Pearson correlation across the KN axis, paired by index."""
    width = min(a.shape[1], b.shape[1])
    a = a[:, :width]
    b = b[:, :width]
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    denom = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
    good = denom > 0
    rho = np.zeros(width)
    rho[good] = (a * b).sum(axis=0)[good] / denom[good]
    return float(np.mean(np.abs(rho))), float(np.max(np.abs(rho)))


def jacobian_stats(op: FeatureOperator,
                   blocks: list[tuple[str, np.ndarray]] | None = None,
                   effective_rank_threshold: float = DEFAULT_EFF_RANK_THRESHOLD,
                   gram_cap: int = DEFAULT_GRAM_CAP,
                   subsample: int = DEFAULT_SUBSAMPLE,
                   seed: int = 0) -> StatsReport:
    """Diagnostics over an operator, optionally split by parameter blocks.

    blocks maps names to boolean masks over the (m, n) index set; the
    masks must partition it.  Without blocks a single "all" block is
    reported.
    """
    if blocks is None:
        blocks = [("all", np.ones((op.m, op.n), dtype=bool))]
    cover = np.zeros((op.m, op.n), dtype=int)
    for _, mask in blocks:
        if mask.shape != (op.m, op.n):
            raise ValueError("block masks must have shape (m, n)")
        cover += mask.astype(int)
    if not np.all(cover == 1):
        raise ValueError("blocks must partition the m x n index set")

    per_block: dict[str, BlockStats] = {}
    flats: dict[str, np.ndarray] = {}
    for bi, (name, mask) in enumerate(blocks):
        entries = op.jacobians[:, :, mask]          # (N, K, |mask|)
        per_block[name] = _block_stats(entries, subsample, seed + bi)
        flats[name] = entries.reshape(op.kn, -1)

    gram: GramStats | None = None
    skipped = None
    if op.kn <= gram_cap:
        rows = op.matrix
        eigs = np.linalg.eigvalsh(rows @ rows.T)
        top = float(eigs[-1])
        tol = op.kn * np.finfo(np.float64).eps * max(top, 0.0)
        nonzero = eigs[eigs > tol]
        min_nz = float(nonzero[0]) if nonzero.size else 0.0
        eff = int(np.sum(eigs > effective_rank_threshold * top)) if top > 0 else 0
        cond = top / min_nz if min_nz > 0 else np.inf
        gram = GramStats(top, min_nz, cond, eff, op.kn, effective_rank_threshold)
    else:
        skipped = f"KN = {op.kn} exceeds the dense Gram cap {gram_cap}"

    cross: dict[tuple[str, str], tuple[float, float]] = {}
    names = [name for name, _ in blocks]
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            cross[(names[i], names[j])] = _cross_corr(flats[names[i]], flats[names[j]])

    return StatsReport(per_block, gram, cross, effective_rank_threshold, skipped)


def row_split_blocks(op: FeatureOperator, split_row: int) -> list[tuple[str, np.ndarray]]:
    """Two-block partition at a row boundary (stacked weight matrices)."""
    if not 0 < split_row < op.m:
        raise ValueError("split_row must lie strictly inside [0, m]")
    top = np.zeros((op.m, op.n), dtype=bool)
    top[:split_row] = True
    return [("rows[0:%d]" % split_row, top), ("rows[%d:%d]" % (split_row, op.m), ~top)]
