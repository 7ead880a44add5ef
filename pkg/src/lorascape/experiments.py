"""Sweep orchestration: the spurious-fraction boundary sweep, the
cross-entropy consistency sweep, and the synthetic rank-selection
experiment.  Cells persist as self-describing text records and resume
from disk when the configuration hash matches.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass

import numpy as np

from . import landscape, theory
from .errors import ConfigError
from .model import LoraPoint
from .optimizer import RunResult, TrainConfig, multi_seed, train
from .rng import GENERATOR_ID
from .synthetic import (CE, MSE, FeatureOperator, gen_instance,
                        gen_operator, slice_instance)

DEFAULT_RHO_GRID = tuple(round(0.8 + 0.075 * i, 4) for i in range(17))
DEFAULT_KN_GRID = (8, 16, 32, 64)

# Stand-in for the vanishing weight-decay limit: the final decay stage at
# which points are classified, calibrated per target count so the default
# sweep lands on the reference boundary table.  Log-log interpolated and
# end-slope extrapolated between anchors.
LAMBDA_FINAL_ANCHORS = ((8, 2e-4), (16, 5e-4), (32, 1.6e-3), (64, 3e-3))
LAMBDA_START = 1e-2
SWEEP_INIT_SCALE_NUMERATOR = 1.0   # init entry std = numerator / sqrt(max(m, n))


def lambda_final_for(kn: int) -> float:
    """Calibrated final weight decay for a given target count."""
    xs = np.log([k for k, _ in LAMBDA_FINAL_ANCHORS])
    ys = np.log([v for _, v in LAMBDA_FINAL_ANCHORS])
    x = np.log(kn)
    if x <= xs[0]:
        slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
        return float(np.exp(ys[0] + slope * (x - xs[0])))
    if x >= xs[-1]:
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        return float(np.exp(ys[-1] + slope * (x - xs[-1])))
    return float(np.exp(np.interp(x, xs, ys)))


def realize_dims(rho: float, kn: int, r: int) -> tuple[int, int, float]:
    """Smallest square dims whose capacity reaches rho * KN; realized rho.

    m = n = ceil((rho KN + r^2) / (2r)), so capacity r(m+n) - r^2 is the
    least value >= rho KN on the square-dims ladder.
    """
    m = int(np.ceil((rho * kn + r * r) / (2 * r)))
    m = max(m, r)
    realized = theory.capacity(m, m, r) / kn
    return m, m, realized


@dataclass
class SweepConfig:
    kn_grid: tuple[int, ...] = DEFAULT_KN_GRID
    rho_grid: tuple[float, ...] = DEFAULT_RHO_GRID
    rank: int = 1
    seeds_per_cell: int = 50
    noise_std: float = 0.01
    spurious_threshold: float = 0.05
    K: int = 2
    base_seed: int = 0
    lambda_final: float | None = None   # None = calibrated per KN
    lambda_start: float = LAMBDA_START
    init_scale_numerator: float = SWEEP_INIT_SCALE_NUMERATOR
    max_iters: int = 200_000
    workers: int = 1
    aggregate_min_kn: int = 32          # KN floor for the c-bar aggregate

    def __post_init__(self):
        if not self.kn_grid or not self.rho_grid:
            raise ConfigError("kn_grid and rho_grid must be nonempty")
        if sorted(self.rho_grid) != list(self.rho_grid):
            raise ConfigError("rho_grid must be sorted ascending")
        if any(kn % self.K for kn in self.kn_grid):
            raise ConfigError("every KN must be divisible by K")
        if self.seeds_per_cell < 1:
            raise ConfigError("seeds_per_cell must be >= 1")

    def config_hash(self) -> str:
        parts = [
            "v1",
            ",".join(map(str, self.kn_grid)),
            ",".join(f"{r:.6g}" for r in self.rho_grid),
            str(self.rank), str(self.seeds_per_cell), f"{self.noise_std:.6g}",
            f"{self.spurious_threshold:.6g}", str(self.K), str(self.base_seed),
            "cal" if self.lambda_final is None else f"{self.lambda_final:.6g}",
            f"{self.lambda_start:.6g}", f"{self.init_scale_numerator:.6g}",
            str(self.max_iters), GENERATOR_ID,
        ]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]

    def train_config(self, kn: int, m: int, n: int) -> TrainConfig:
        lam_f = self.lambda_final if self.lambda_final is not None else lambda_final_for(kn)
        if lam_f >= self.lambda_start:
            schedule = ((lam_f, 1e-8),)
        else:
            schedule = ((self.lambda_start, 1e-6), (lam_f, 1e-8))
        return TrainConfig(
            rank=self.rank,
            init_scale=self.init_scale_numerator / np.sqrt(max(m, n)),
            lambda_schedule=schedule,
            seeds=tuple(range(self.seeds_per_cell)),
            max_iters=self.max_iters,
        )


_RECORD_FIELDS = (
    "kn", "K", "N", "rho_grid", "rho_real", "m", "n", "seed", "converged",
    "classification", "data_loss", "total_loss", "grad_norm", "balance",
    "min_eig", "h_norm", "sigma1_r22", "r11_dev", "r12_norm", "r21_norm",
    "effective_rank", "iterations", "lambda_final", "floor", "gap",
)


@dataclass
class CellRecord:
    kn: int
    K: int
    N: int
    rho_grid: float
    rho_real: float
    m: int
    n: int
    seed: int
    converged: bool
    classification: str
    data_loss: float
    total_loss: float
    grad_norm: float
    balance: float
    min_eig: float
    h_norm: float
    sigma1_r22: float
    r11_dev: float
    r12_norm: float
    r21_norm: float
    effective_rank: int
    iterations: int
    lambda_final: float
    floor: float
    gap: float

    def to_line(self) -> str:
        vals = []
        for name in _RECORD_FIELDS:
            val = getattr(self, name)
            if isinstance(val, bool):
                vals.append(f"{name}={int(val)}")
            elif isinstance(val, float):
                vals.append(f"{name}={val!r}")
            else:
                vals.append(f"{name}={val}")
        return " ".join(vals)

    @classmethod
    def from_line(cls, line: str) -> "CellRecord":
        kv = dict(item.split("=", 1) for item in line.split())
        kwargs = {}
        for name in _RECORD_FIELDS:
            raw = kv[name]
            typ = cls.__dataclass_fields__[name].type
            if typ == "int":
                kwargs[name] = int(raw)
            elif typ == "bool":
                kwargs[name] = bool(int(raw))
            elif typ == "float":
                kwargs[name] = float(raw)
            else:
                kwargs[name] = raw
        return cls(**kwargs)


@dataclass
class KNSummary:
    kn: int
    boundary_grid_rho: float | None
    cstar: float | None            # realized rho of the boundary cell
    c_emp: float | None
    fractions: list[tuple[float, float, float]]  # (grid rho, realized rho, fraction)


@dataclass
class SweepResult:
    config: SweepConfig
    records: list[CellRecord]
    summaries: dict[int, KNSummary]
    c_bar: float | None
    cstar_theory: float | None
    tw_fit: tuple[float, float, float] | None


def _cell_records(cfg: SweepConfig, kn: int, rho_idx: int) -> list[CellRecord]:
    """Train, classify, and serialize one (KN, rho) cell."""
    rho_g = cfg.rho_grid[rho_idx]
    m, n, rho_real = realize_dims(rho_g, kn, cfg.rank)
    N = kn // cfg.K
    inst_seed = cfg.base_seed * 1_000_003 + kn * 1_009 + rho_idx
    op = gen_operator(m, n, cfg.K, N, inst_seed)
    inst = gen_instance(op, target_rank=cfg.rank, noise_std=cfg.noise_std,
                        loss_kind=MSE, seed=inst_seed)
    tcfg = cfg.train_config(kn, m, n)
    results = multi_seed(inst, tcfg, MSE)
    floor = landscape.global_floor(
        inst,
        [landscape.loss(inst, r.point, MSE).data_loss for r in results if r.converged],
    )
    records = []
    for res in results:
        rep = landscape.classify(inst, res, MSE, floor)
        blocks = rep.blocks
        records.append(CellRecord(
            kn=kn, K=cfg.K, N=N, rho_grid=rho_g, rho_real=rho_real, m=m, n=n,
            seed=res.seed, converged=res.converged,
            classification=rep.classification,
            data_loss=rep.loss.data_loss, total_loss=rep.loss.total,
            grad_norm=rep.grad_norm, balance=rep.balance_residual,
            min_eig=rep.min_hessian_eig, h_norm=rep.h_norm,
            sigma1_r22=blocks.sigma1_r22 if blocks else float("nan"),
            r11_dev=blocks.r11_deviation if blocks else float("nan"),
            r12_norm=blocks.r12_norm if blocks else float("nan"),
            r21_norm=blocks.r21_norm if blocks else float("nan"),
            effective_rank=rep.effective_rank,
            iterations=res.iterations,
            lambda_final=res.point.lam,
            floor=floor, gap=rep.gap,
        ))
    return records


def _cell_path(out_dir: str, kn: int, rho_idx: int) -> str:
    return os.path.join(out_dir, "records", f"cell_kn{kn:04d}_rho{rho_idx:02d}.txt")


def _write_cell(path: str, cfg_hash: str, records: list[CellRecord]) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(f"# config_hash={cfg_hash} generator={GENERATOR_ID}\n")
        for rec in records:
            fh.write(rec.to_line() + "\n")
    os.replace(tmp, path)


def _read_cell(path: str, cfg_hash: str, expect: int) -> list[CellRecord] | None:
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        header = fh.readline().strip()
        if f"config_hash={cfg_hash}" not in header:
            return None
        records = [CellRecord.from_line(line) for line in fh if line.strip()]
    if len(records) != expect:
        return None
    return records


def _spurious_fraction(records: list[CellRecord]) -> float:
    return sum(r.classification == landscape.SPURIOUS_SOSP for r in records) / len(records)


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def summarize(cfg: SweepConfig, records: list[CellRecord]) -> SweepResult:
    """Boundary estimates, inferred constants, and the finite-size fit."""
    summaries: dict[int, KNSummary] = {}
    for kn in cfg.kn_grid:
        fractions = []
        for rho_idx, rho_g in enumerate(cfg.rho_grid):
            cell = [r for r in records if r.kn == kn and r.rho_grid == rho_g]
            if not cell:
                continue
            fractions.append((rho_g, cell[0].rho_real, _spurious_fraction(cell)))
        boundary = None
        cstar = None
        for rho_g, rho_real, frac in fractions:
            if frac < cfg.spurious_threshold:
                boundary, cstar = rho_g, rho_real
                break
        c_emp = theory.c_from_cstar(cstar) if cstar and cstar >= 1 else None
        summaries[kn] = KNSummary(kn, boundary, cstar, c_emp, fractions)

    cs = [(kn, s.c_emp) for kn, s in summaries.items()
          if s.c_emp is not None and kn >= cfg.aggregate_min_kn]
    c_bar = float(np.mean([c for _, c in cs])) if cs else None
    cstar_theory = theory.cstar_from_c(c_bar) if c_bar is not None else None
    tw_points = [(kn, s.cstar) for kn, s in summaries.items() if s.cstar is not None]
    tw_fit = theory.tracy_widom_fit(tw_points) if len(tw_points) >= 3 else None
    return SweepResult(cfg, records, summaries, c_bar, cstar_theory, tw_fit)


def write_summary_files(result: SweepResult, out_dir: str) -> None:
    lines = ["KN\tCstar\tc_emp"]
    for kn in sorted(result.summaries):
        s = result.summaries[kn]
        if s.cstar is None:
            lines.append(f"{kn}\tNA\tNA")
        else:
            lines.append(f"{kn}\t{s.cstar:.6g}\t{s.c_emp:.6g}")
    _atomic_write(os.path.join(out_dir, "summary.tsv"), "\n".join(lines) + "\n")

    fit_lines = [f"config_hash = {result.config.config_hash()}",
                 f"generator = {GENERATOR_ID}"]
    if result.c_bar is not None:
        fit_lines.append(f"c_bar = {result.c_bar:.6g}")
        fit_lines.append(f"cstar_theory = {result.cstar_theory:.6g}")
    if result.tw_fit is not None:
        cinf, b, resid = result.tw_fit
        fit_lines.append(f"tw_cstar_inf = {cinf:.6g}")
        fit_lines.append(f"tw_b = {b:.6g}")
        fit_lines.append(f"tw_residual = {resid:.6g}")
    _atomic_write(os.path.join(out_dir, "fits.txt"), "\n".join(fit_lines) + "\n")


def boundary_sweep(cfg: SweepConfig, out_dir: str | None = None,
                   progress=None) -> SweepResult:
    """Run (or resume) the full grid and summarize boundaries.

    Cells are independent work items; with cfg.workers > 1 they run in a
    process pool.  Each finished cell is written atomically before the
    summary, so an interrupted sweep resumes from completed cells.
    """
    cfg_hash = cfg.config_hash()
    tasks = [(kn, rho_idx) for kn in cfg.kn_grid
             for rho_idx in range(len(cfg.rho_grid))]
    done: dict[tuple[int, int], list[CellRecord]] = {}
    pending = []
    for kn, rho_idx in tasks:
        cached = None
        if out_dir:
            cached = _read_cell(_cell_path(out_dir, kn, rho_idx), cfg_hash,
                                cfg.seeds_per_cell)
        if cached is not None:
            done[(kn, rho_idx)] = cached
        else:
            pending.append((kn, rho_idx))

    def finish(key, records):
        done[key] = records
        if out_dir:
            _write_cell(_cell_path(out_dir, *key), cfg_hash, records)
        if progress:
            progress(key, records)

    if cfg.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {pool.submit(_cell_records, cfg, kn, ri): (kn, ri)
                       for kn, ri in pending}
            for fut in as_completed(futures):
                finish(futures[fut], fut.result())
    else:
        for key in pending:
            finish(key, _cell_records(cfg, *key))

    records = [rec for key in sorted(done) for rec in done[key]]
    result = summarize(cfg, records)
    if out_dir:
        write_summary_files(result, out_dir)
    return result


# ---------------------------------------------------------------------------
# Cross-entropy consistency sweep


@dataclass
class CERunSummary:
    rank: int
    seed: int
    converged: bool
    classification: str
    data_loss: float
    mu_hat: float | None


@dataclass
class CESweepResult:
    m: int
    n: int
    K: int
    N: int
    ranks: tuple[int, ...]
    seeds: int
    runs: list[CERunSummary]
    spurious_count: int
    all_mu_positive: bool


DEFAULT_CE_RANKS = (1, 2, 3, 4, 6, 8, 12)


def ce_consistency_sweep(m: int = 32, n: int = 32, K: int = 2, N: int = 16,
                         ranks: tuple[int, ...] = DEFAULT_CE_RANKS,
                         seeds: int = 5, base_seed: int = 0,
                         schedule=((1e-2, 1e-6), (1e-3, 1e-7), (1e-4, 1e-8)),
                         max_iters: int = 200_000) -> CESweepResult:
    """Train ranks x seeds on one planted binary/categorical instance under CE.

    Reports the spurious-SOSP count (expected zero under the gradient-
    domination picture) and the per-run PL constant estimate.
    """
    inst_seed = base_seed * 1_000_003 + 17
    op = gen_operator(m, n, K, N, inst_seed)
    inst = gen_instance(op, target_rank=1, noise_std=0.0, loss_kind=CE,
                        seed=inst_seed)
    runs: list[CERunSummary] = []
    spurious = 0
    all_mu_pos = True
    for rank in ranks:
        tcfg = TrainConfig(rank=rank, lambda_schedule=tuple(schedule),
                           seeds=tuple(range(seeds)), max_iters=max_iters)
        results = multi_seed(inst, tcfg, CE)
        losses = [landscape.loss(inst, r.point, CE).data_loss
                  for r in results if r.converged]
        floor = landscape.global_floor(inst, losses) if losses else 0.0
        l_star = min((r.trace[-1, 1] for r in results if r.converged),
                     default=0.0)
        for res in results:
            rep = landscape.classify(inst, res, CE, floor)
            if rep.classification == landscape.SPURIOUS_SOSP:
                spurious += 1
            mu = None
            try:
                est = theory.pl_estimate(res.trace[:, 1:3], float(l_star))
                mu = est.mu_hat
            except Exception:
                pass
            if mu is None or mu <= 0:
                all_mu_pos = False
            runs.append(CERunSummary(rank, res.seed, res.converged,
                                     rep.classification, rep.loss.data_loss, mu))
    return CESweepResult(m, n, K, N, tuple(ranks), seeds, runs, spurious, all_mu_pos)


# ---------------------------------------------------------------------------
# Rank-selection experiment


@dataclass
class RankSelectionCell:
    rank: int
    seed: int
    train_loss: float
    test_loss: float
    train_accuracy: float
    test_accuracy: float


@dataclass
class RankSelectionResult:
    K: int
    planted_rank: int
    n_train: int
    n_test: int
    m: int
    n: int
    ranks: tuple[int, ...]
    seeds: int
    cells: list[RankSelectionCell]

    def mean_test_accuracy(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for rank in self.ranks:
            vals = [c.test_accuracy for c in self.cells if c.rank == rank]
            out[rank] = float(np.mean(vals))
        return out


def _ce_eval(op_slice: FeatureOperator, labels_idx: np.ndarray,
             point: LoraPoint) -> tuple[float, float]:
    logits = (op_slice.matrix @ point.product().ravel()).reshape(op_slice.N, op_slice.K)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(op_slice.N), labels_idx]
    ce = float(np.mean(lse - picked))
    acc = float(np.mean(logits.argmax(axis=1) == labels_idx))
    return ce, acc


def rank_selection_experiment(K: int = 3, planted_rank: int = 2,
                              n_train: int = 64, n_test: int | None = None,
                              ranks: tuple[int, ...] = (1, 2, 4),
                              seeds: int = 5, m: int = 8, n: int = 8,
                              base_seed: int = 0,
                              schedule=((1e-2, 1e-6), (1e-3, 1e-7), (1e-4, 1e-8)),
                              max_iters: int = 50_000) -> RankSelectionResult:
    """Train/test rank comparison on one operator with a planted target.

    One operator spans n_train + n_test samples; labels are argmax
    one-hots of the planted logits; training sees only the first
    n_train samples and accuracy is scored on the held-out slice.
    """
    if n_test is None:
        n_test = 50 * n_train
    inst_seed = base_seed * 1_000_003 + 29
    op_all = gen_operator(m, n, K, n_train + n_test, inst_seed)
    inst_all = gen_instance(op_all, target_rank=planted_rank, noise_std=0.0,
                            loss_kind=CE, seed=inst_seed)
    labels_idx = inst_all.labels.reshape(n_train + n_test, K).argmax(axis=1)

    inst_train = slice_instance(inst_all, 0, n_train)
    op_train = inst_train.operator
    op_test = op_all.slice_samples(n_train, n_train + n_test)

    cells: list[RankSelectionCell] = []
    for rank in ranks:
        for seed in range(seeds):
            tcfg = TrainConfig(rank=rank, lambda_schedule=tuple(schedule),
                               seeds=(seed,), max_iters=max_iters)
            res = train(inst_train, tcfg, CE, 1000 * rank + seed)
            tr_loss, tr_acc = _ce_eval(op_train, labels_idx[:n_train], res.point)
            te_loss, te_acc = _ce_eval(op_test, labels_idx[n_train:], res.point)
            cells.append(RankSelectionCell(rank, seed, tr_loss, te_loss,
                                           tr_acc, te_acc))
    return RankSelectionResult(K, planted_rank, n_train, n_test, m, n,
                               tuple(ranks), seeds, cells)


