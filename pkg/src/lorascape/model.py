"""Losses, gradients, and exact Hessians of the factored linearized model.

Predictions are affine in the update: baseline plus the operator applied
to u v^T.  Both the squared-error and softmax cross-entropy objectives
carry the weight-decay term (lambda/2)(|u|_F^2 + |v|_F^2).  Hessian
coordinates are ordered [vec(u); vec(v)] with each factor vectorized
column-major, fixed across the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError
from .synthetic import CE, LOSS_KINDS, MSE, ProblemInstance

DEFAULT_DENSE_CAP = 4096


@dataclass(eq=False)
class LoraPoint:
    """Factor pair (u, v) of rank r with weight-decay strength lam."""

    u: np.ndarray  # (m, r)
    v: np.ndarray  # (n, r)
    lam: float = 0.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise ValueError("u, v must be 2-d with a common column count")
        if u.shape[1] < 1:
            raise ValueError("rank must be >= 1")
        if u.shape[1] > min(u.shape[0], v.shape[0]):
            raise ValueError("rank exceeds min(m, n)")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("factors must be finite")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        self.u, self.v = u, v

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def product(self) -> np.ndarray:
        return self.u @ self.v.T


@dataclass
class LossReport:
    data_loss: float
    reg_loss: float
    total: float
    loss_kind: str


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-logit subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_kind(kind: str) -> None:
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}")


def predict(inst: ProblemInstance, p: LoraPoint) -> np.ndarray:
    """Baseline plus operator output at u v^T, as a flat KN vector."""
    op = inst.operator
    if p.u.shape[0] != op.m or p.v.shape[0] != op.n:
        raise ValueError("point dimensions do not match the operator")
    return inst.baseline + op.apply(p.product())


def _data_loss(inst: ProblemInstance, yhat: np.ndarray, kind: str) -> float:
    N = inst.operator.N
    if kind == MSE:
        diff = yhat - inst.labels
        return 0.5 * float(diff @ diff) / N
    if not np.all(np.isfinite(yhat)):
        raise FloatingPointError("non-finite logits")
    logits = yhat.reshape(N, inst.operator.K)
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    onehot = inst.labels.reshape(N, inst.operator.K)
    return float(np.sum(logsumexp - (onehot * z).sum(axis=1))) / N


def loss(inst: ProblemInstance, p: LoraPoint, kind: str) -> LossReport:
    _check_kind(kind)
    if kind == CE and inst.loss_kind != CE:
        raise ValueError("CE loss requires one-hot labels (CE instance)")
    data = _data_loss(inst, predict(inst, p), kind)
    reg = 0.5 * p.lam * (float(np.sum(p.u * p.u)) + float(np.sum(p.v * p.v)))
    return LossReport(data, reg, data + reg, kind)


def _output_residual(inst: ProblemInstance, yhat: np.ndarray, kind: str) -> np.ndarray:
    """Flat KN residual entering the pulled-back gradient: yhat - y, or p - y."""
    if kind == MSE:
        return yhat - inst.labels
    probs = softmax(yhat.reshape(inst.operator.N, inst.operator.K))
    return probs.ravel() - inst.labels


def residual_matrix(inst: ProblemInstance, p: LoraPoint, kind: str = MSE) -> np.ndarray:
    """Pulled-back residual (1/N) A*(yhat - y); softmax residual for CE."""
    _check_kind(kind)
    op = inst.operator
    res = _output_residual(inst, predict(inst, p), kind)
    return op.adjoint(res) / op.N


def gradient(inst: ProblemInstance, p: LoraPoint, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """(d/du, d/dv) of the regularized loss: (R v + lam u, R^T u + lam v)."""
    R = residual_matrix(inst, p, kind)
    return R @ p.v + p.lam * p.u, R.T @ p.u + p.lam * p.v


def hessian_quadratic_form(inst: ProblemInstance, p: LoraPoint,
                           du: np.ndarray, dv: np.ndarray, kind: str) -> float:
    """Second directional derivative of the regularized loss along (du, dv)."""
    _check_kind(kind)
    if du.shape != p.u.shape or dv.shape != p.v.shape:
        raise ValueError("direction shapes must match the point")
    op = inst.operator
    N = op.N
    yhat = predict(inst, p)
    a = op.apply(du @ p.v.T + p.u @ dv.T)
    cross = 2.0 * float(np.sum(residual_matrix(inst, p, kind) * (du @ dv.T)))
    reg = p.lam * (float(np.sum(du * du)) + float(np.sum(dv * dv)))
    if kind == MSE:
        data = float(a @ a) / N
    else:
        probs = softmax(yhat.reshape(N, op.K))
        a2 = a.reshape(N, op.K)
        pa = (probs * a2).sum(axis=1)
        data = float(np.sum(probs * a2 * a2) - pa @ pa) / N
    return data + cross + reg


def _prediction_jacobian(inst: ProblemInstance, p: LoraPoint) -> np.ndarray:
    """(KN, r(m+n)) Jacobian of predictions w.r.t. [vec(u); vec(v)]."""
    op = inst.operator
    r = p.rank
    # vec is column-major, so transpose puts the row index fastest.
    ju = np.einsum("ikab,bs->iksa", op.jacobians, p.v).reshape(op.kn, r * op.m)
    jv = np.einsum("ikab,as->iksb", op.jacobians, p.u).reshape(op.kn, r * op.n)
    return np.hstack([ju, jv])


def assemble_hessian(inst: ProblemInstance, p: LoraPoint, kind: str,
                     dense_cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Dense symmetric Hessian in [vec(u); vec(v)] coordinates."""
    _check_kind(kind)
    op = inst.operator
    m, n, r, N = op.m, op.n, p.rank, op.N
    d = r * (m + n)
    if d > dense_cap:
        raise CapacityError(
            f"Hessian dimension {d} exceeds dense cap {dense_cap}; "
            "use hessian_quadratic_form / iterative extremal analysis"
        )
    J = _prediction_jacobian(inst, p)
    if kind == MSE:
        H = J.T @ J / N
    else:
        probs = softmax(predict(inst, p).reshape(N, op.K))
        w = probs.ravel()
        J3 = J.reshape(N, op.K, d)
        b = np.einsum("ikd,ik->id", J3, probs)
        H = ((J * w[:, None]).T @ J - b.T @ b) / N
    R = residual_matrix(inst, p, kind)
    for k in range(r):
        H[k * m:(k + 1) * m, r * m + k * n:r * m + (k + 1) * n] += R
        H[r * m + k * n:r * m + (k + 1) * n, k * m:(k + 1) * m] += R.T
    H[np.diag_indices(d)] += p.lam
    asym = np.abs(H - H.T).max()
    if asym > 1e-12 * max(1.0, np.abs(H).max()):
        raise FloatingPointError(f"assembled Hessian asymmetry {asym:.2e}")
    return 0.5 * (H + H.T)


def hessian_vector_product(inst: ProblemInstance, p: LoraPoint,
                           du: np.ndarray, dv: np.ndarray,
                           kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Hessian action on (du, dv) without dense assembly."""
    _check_kind(kind)
    op = inst.operator
    N = op.N
    V = du @ p.v.T + p.u @ dv.T
    a = op.apply(V)
    if kind == MSE:
        core = op.adjoint(a) / N
    else:
        probs = softmax(predict(inst, p).reshape(N, op.K))
        a2 = a.reshape(N, op.K)
        sa = probs * a2 - probs * (probs * a2).sum(axis=1, keepdims=True)
        core = op.adjoint(sa.ravel()) / N
    R = residual_matrix(inst, p, kind)
    hu = core @ p.v + R @ dv + p.lam * du
    hv = core.T @ p.u + R.T @ du + p.lam * dv
    return hu, hv
