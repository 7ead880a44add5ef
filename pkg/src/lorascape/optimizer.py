"""Full-batch descent to critical points under a vanishing weight-decay schedule.

Each run anneals the weight decay through a strictly decreasing list of
(lambda, gradient tolerance) stages, carrying the point across stages.
The base method is gradient descent with Armijo backtracking.  Two
refinements keep runs on the continuous-flow trajectory at desk scale:

* periodic gauge rebalancing replaces (u, v) by the balanced factors of
  the same product, which never increases the loss and pins the
  balanced identity u^T u = v^T v to machine precision;
* once the gradient is small and the local Hessian is near positive
  semidefinite, damped Newton steps (line-searched on the same loss, so
  descent stays monotone) finish the crawl along nearly flat valleys
  that plain descent would traverse in millions of iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (DEFAULT_DENSE_CAP, LoraPoint, assemble_hessian, softmax)
from .rng import make_rng
from .synthetic import CE, LOSS_KINDS, MSE, ProblemInstance

DEFAULT_SCHEDULE = ((1e-2, 1e-6), (1e-3, 1e-7), (1e-4, 1e-8))


@dataclass
class TrainConfig:
    rank: int = 1
    init_scale: float | None = None  # default 1e-2 / sqrt(max(m, n))
    step_rule: str = "backtracking"  # "backtracking" | "fixed"
    base_step: float = 1.0
    max_iters: int = 200_000         # per stage
    lambda_schedule: tuple[tuple[float, float], ...] = DEFAULT_SCHEDULE
    seeds: tuple[int, ...] = tuple(range(50))
    grad_tol: float | None = None    # overrides the final stage tolerance
    record_every: int = 10
    rebalance_every: int = 32
    armijo: float = 1e-4
    polish: bool = True
    polish_check_every: int = 16
    polish_trigger_factor: float = 1e4   # trigger = factor * stage tolerance
    polish_gate: float = 1e-3            # require min eig >= -gate * |H|_op
    max_polish_steps: int = 50
    divergence_factor: float = 1e6
    dense_cap: int = DEFAULT_DENSE_CAP

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.step_rule not in ("backtracking", "fixed"):
            raise ValueError("step_rule must be 'backtracking' or 'fixed'")
        sched = tuple((float(l), float(t)) for l, t in self.lambda_schedule)
        if not sched:
            raise ValueError("lambda_schedule must be nonempty")
        lams = [l for l, _ in sched]
        if any(b >= a for a, b in zip(lams, lams[1:])):
            raise ValueError("lambda values must be strictly decreasing")
        if any(t <= 0 for _, t in sched):
            raise ValueError("stage tolerances must be positive")
        if self.grad_tol is not None:
            sched = sched[:-1] + ((sched[-1][0], float(self.grad_tol)),)
        self.lambda_schedule = sched
        if self.init_scale is not None and self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")

    @property
    def final_lambda(self) -> float:
        return self.lambda_schedule[-1][0]

    @property
    def final_tol(self) -> float:
        return self.lambda_schedule[-1][1]


@dataclass
class RunResult:
    point: LoraPoint
    grad_norm: float
    trace: np.ndarray            # rows (iteration, total_loss, grad_norm)
    iterations: int
    converged: bool
    stage_reached: int
    seed: int
    message: str = ""

    @property
    def final_lambda(self) -> float:
        return self.point.lam


def default_init_scale(m: int, n: int) -> float:
    return 1e-2 / np.sqrt(max(m, n))


def init_point(m: int, n: int, r: int, init_scale: float, seed: int) -> LoraPoint:
    """Gaussian factors with entrywise standard deviation init_scale."""
    if init_scale < 0:
        raise ValueError("init_scale must be >= 0")
    rng = make_rng(seed, 3)
    u = init_scale * rng.standard_normal((m, r))
    v = init_scale * rng.standard_normal((n, r))
    return LoraPoint(u, v, lam=0.0)


def rebalance(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Balanced factors of the same product u v^T.

    Minimizes the weight-decay term over the gauge orbit, so the total
    loss never increases; afterwards u^T u = v^T v exactly.
    """
    qu, ru = np.linalg.qr(u)
    qv, rv = np.linalg.qr(v)
    uw, s, vwt = np.linalg.svd(ru @ rv.T)
    sq = np.sqrt(s)
    return qu @ (uw * sq), qv @ (vwt.T * sq)


class _Objective:
    """Fast full-batch loss/gradient evaluations against the flattened operator."""

    def __init__(self, inst: ProblemInstance, kind: str):
        if kind not in LOSS_KINDS:
            raise ValueError(f"kind must be one of {LOSS_KINDS}")
        if kind == CE and inst.loss_kind != CE:
            raise ValueError("CE training requires a CE instance")
        self.inst = inst
        self.kind = kind
        self.A = inst.operator.matrix
        self.y = inst.labels
        self.baseline = inst.baseline
        self.N = inst.operator.N
        self.K = inst.operator.K
        self.m = inst.operator.m
        self.n = inst.operator.n

    def predictions(self, u, v):
        return self.baseline + self.A @ (u @ v.T).ravel()

    def data_loss(self, yhat):
        if self.kind == MSE:
            d = yhat - self.y
            return 0.5 * float(d @ d) / self.N
        logits = yhat.reshape(self.N, self.K)
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        onehot = self.y.reshape(self.N, self.K)
        return float(np.sum(lse - (onehot * z).sum(axis=1))) / self.N

    def output_residual(self, yhat):
        if self.kind == MSE:
            return yhat - self.y
        return softmax(yhat.reshape(self.N, self.K)).ravel() - self.y

    def pulled_back(self, yhat):
        return (self.A.T @ self.output_residual(yhat)).reshape(self.m, self.n) / self.N


def _reg(u, v, lam):
    return 0.5 * lam * (float(np.sum(u * u)) + float(np.sum(v * v)))


def _newton_polish(obj: _Objective, u, v, lam, tol, cfg: TrainConfig):
    """Damped Newton refinement toward the nearby critical point.

    Only engages when the dense Hessian certifies near-PSD curvature, so
    strict saddles are left to plain descent.  Returns the refined
    factors, the final gradient norm, the number of steps taken, and
    whether the stage tolerance was reached.
    """
    m, n, r = obj.m, obj.n, u.shape[1]
    d = r * (m + n)
    point = LoraPoint(u, v, lam)
    steps = 0
    for _ in range(cfg.max_polish_steps):
        H = assemble_hessian(obj.inst, point, obj.kind, dense_cap=cfg.dense_cap)
        w = np.linalg.eigvalsh(H)
        hnorm = max(abs(w[0]), abs(w[-1]))
        if hnorm == 0 or w[0] < -cfg.polish_gate * hnorm:
            break
        yhat = obj.predictions(point.u, point.v)
        R = obj.pulled_back(yhat)
        gu = R @ point.v + lam * point.u
        gv = R.T @ point.u + lam * point.v
        gn = float(np.sqrt(np.sum(gu * gu) + np.sum(gv * gv)))
        if gn <= tol:
            return point.u, point.v, gn, steps, True
        g = np.concatenate([gu.ravel(order="F"), gv.ravel(order="F")])
        tau = max(0.0, -w[0]) + 1e-9 * hnorm
        try:
            step = np.linalg.solve(H + tau * np.eye(d), -g)
        except np.linalg.LinAlgError:
            break
        du = step[:r * m].reshape(m, r, order="F")
        dv = step[r * m:].reshape(n, r, order="F")
        f0 = obj.data_loss(yhat) + _reg(point.u, point.v, lam)
        slope = float(g @ step)
        t = 1.0
        accepted = False
        for _ in range(40):
            cand = LoraPoint(point.u + t * du, point.v + t * dv, lam)
            f_new = obj.data_loss(obj.predictions(cand.u, cand.v)) + _reg(cand.u, cand.v, lam)
            if f_new <= f0 + cfg.armijo * t * min(slope, 0.0):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        point = cand
        steps += 1
    yhat = obj.predictions(point.u, point.v)
    R = obj.pulled_back(yhat)
    gu = R @ point.v + lam * point.u
    gv = R.T @ point.u + lam * point.v
    gn = float(np.sqrt(np.sum(gu * gu) + np.sum(gv * gv)))
    return point.u, point.v, gn, steps, gn <= tol


def train(inst: ProblemInstance, cfg: TrainConfig, kind: str, seed: int) -> RunResult:
    """Run the staged descent from the seed's random initialization."""
    obj = _Objective(inst, kind)
    m, n, r = obj.m, obj.n, cfg.rank
    scale = cfg.init_scale if cfg.init_scale is not None else default_init_scale(m, n)
    start = init_point(m, n, r, scale, seed)
    u, v = start.u.copy(), start.v.copy()

    trace: list[tuple[int, float, float]] = []
    total_iters = 0
    stage_reached = 0
    converged = False
    message = ""
    gn = np.inf
    step = cfg.base_step
    polish_allowed = cfg.polish and r * (m + n) <= cfg.dense_cap

    initial_total = obj.data_loss(obj.predictions(u, v)) + _reg(u, v, cfg.lambda_schedule[0][0])
    guard = cfg.divergence_factor * max(1.0, abs(initial_total))

    for stage_idx, (lam, tol) in enumerate(cfg.lambda_schedule):
        stage_reached = stage_idx
        converged = False
        trigger = cfg.polish_trigger_factor * tol
        yhat = obj.predictions(u, v)
        it = 0
        while it < cfg.max_iters:
            it += 1
            total_iters += 1
            if cfg.rebalance_every and it % cfg.rebalance_every == 1:
                u, v = rebalance(u, v)
                yhat = obj.predictions(u, v)
            R = obj.pulled_back(yhat)
            gu = R @ v + lam * u
            gv = R.T @ u + lam * v
            gn2 = float(np.sum(gu * gu) + np.sum(gv * gv))
            gn = np.sqrt(gn2)
            f0 = obj.data_loss(yhat) + _reg(u, v, lam)
            if cfg.record_every and (total_iters % cfg.record_every == 1 or it == 1):
                trace.append((total_iters, f0, gn))
            if not np.isfinite(f0) or f0 > guard:
                return RunResult(LoraPoint(u, v, lam), gn, np.array(trace),
                                 total_iters, False, stage_idx, seed,
                                 f"diverged: loss {f0:.3e} beyond guard {guard:.3e}")
            if gn <= tol:
                converged = True
                break
            if (polish_allowed and gn <= trigger
                    and it % cfg.polish_check_every == 0):
                u2, v2, gn2p, nsteps, done = _newton_polish(obj, u, v, lam, tol, cfg)
                total_iters += nsteps
                if done:
                    u, v = rebalance(u2, v2)
                    yhat = obj.predictions(u, v)
                    R = obj.pulled_back(yhat)
                    gu = R @ v + lam * u
                    gv = R.T @ u + lam * v
                    gn = float(np.sqrt(np.sum(gu * gu) + np.sum(gv * gv)))
                    if gn <= tol:
                        converged = True
                        f0 = obj.data_loss(yhat) + _reg(u, v, lam)
                        break
                elif nsteps > 0:
                    u, v = u2, v2
                    yhat = obj.predictions(u, v)
                    continue
            if cfg.step_rule == "fixed":
                u = u - cfg.base_step * gu
                v = v - cfg.base_step * gv
                yhat = obj.predictions(u, v)
                continue
            # Backtracking along the exact ray: predictions are quadratic in s.
            a1 = obj.A @ (gu @ v.T + u @ gv.T).ravel()
            a2 = obj.A @ (gu @ gv.T).ravel()
            ugu = float(np.sum(u * gu)); vgv = float(np.sum(v * gv))
            g2u = float(np.sum(gu * gu)); g2v = float(np.sum(gv * gv))
            uu = float(np.sum(u * u)); vv = float(np.sum(v * v))
            s = min(2.0 * step, cfg.base_step)
            accepted = False
            for _ in range(60):
                ys = yhat - s * a1 + (s * s) * a2
                reg_s = 0.5 * lam * (uu - 2 * s * ugu + s * s * g2u
                                     + vv - 2 * s * vgv + s * s * g2v)
                fs = obj.data_loss(ys) + reg_s
                if fs <= f0 - cfg.armijo * s * gn2:
                    accepted = True
                    break
                s *= 0.5
            if not accepted:
                message = "line search stalled"
                break
            step = s
            u = u - s * gu
            v = v - s * gv
            yhat = ys
        trace.append((total_iters, obj.data_loss(obj.predictions(u, v)) + _reg(u, v, lam), gn))
        if not converged and it >= cfg.max_iters:
            message = message or "stage iteration cap reached"

    lam_final = cfg.final_lambda
    return RunResult(LoraPoint(u, v, lam_final), float(gn), np.array(trace),
                     total_iters, converged, stage_reached, seed, message)


def multi_seed(inst: ProblemInstance, cfg: TrainConfig, kind: str) -> list[RunResult]:
    """One deterministic run per configured seed, in seed order."""
    if not cfg.seeds:
        raise ValueError("cfg.seeds must be nonempty")
    return [train(inst, cfg, kind, seed) for seed in cfg.seeds]
