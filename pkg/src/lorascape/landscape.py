"""Critical-point structure checks and classification.

Verifies, at converged points: the balanced identity, the block form of
the pulled-back residual in the singular frame, the spectrum of the
indefinite cross-term, the operator-norm bound and nuclear-norm
subgradient certificate for rank-deficient points, and the singular
spectrum of the operator restricted to the factored-manifold tangent
space against the Marchenko-Pastur lower edge.  Points are classified
as global minima, spurious second-order stationary points, strict
saddles, or non-converged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import CapacityError, RankDeficientError
from .model import (DEFAULT_DENSE_CAP, LoraPoint, LossReport, assemble_hessian,
                    hessian_vector_product, loss, residual_matrix)
from .optimizer import RunResult
from .synthetic import MSE, ProblemInstance

GLOBAL_MIN = "GlobalMin"
SPURIOUS_SOSP = "SpuriousSOSP"
STRICT_SADDLE = "StrictSaddle"
NOT_CONVERGED = "NotConverged"


@dataclass
class Tolerances:
    """Analyzer tolerances, recorded in every report."""

    grad_tol_scale: float = 1e-8   # grad_tol = scale * (1 + data loss)
    eig_tol_scale: float = 1e-6    # eig_tol  = scale * |H|_op
    rank_tol_scale: float = 1e-8   # rank_tol = scale * sigma_max
    gap_tol_abs: float = 1e-6
    gap_tol_rel: float = 1e-3
    cert_tol: float = 1e-6


@dataclass
class AlignedFrame:
    u_basis: np.ndarray   # (m, r) orthonormal
    v_basis: np.ndarray   # (n, r) orthonormal
    sigma: np.ndarray     # (r,) descending, > 0
    balanced: LoraPoint   # same product, balanced factors


@dataclass
class ResidualBlocks:
    r11_deviation: float          # |U_u^T R U_v + lam I|_F
    r12_norm: float
    r21_norm: float
    r22: np.ndarray               # (m-r, n-r)
    sigma1_r22: float


@dataclass
class CertificateReport:
    op_norm_r: float
    op_norm_ok: bool
    subgrad_residuals: tuple[float, float, float]
    certified_global: bool
    effective_rank: int
    advisory: str | None = None


@dataclass
class MinEigReport:
    value: float
    h_norm: float
    method: str                    # "dense" | "iterative"
    residual_tol: float = 0.0


@dataclass
class CriticalPointReport:
    grad_norm: float
    balance_residual: float
    blocks: ResidualBlocks | None
    q_eigs: np.ndarray | None
    min_hessian_eig: float
    h_norm: float
    loss: LossReport
    classification: str
    certificate: CertificateReport | None
    floor: float
    gap: float
    effective_rank: int
    lam: float
    tolerances: Tolerances = field(default_factory=Tolerances)


def balancedness_residual(p: LoraPoint) -> float:
    """|u^T u - v^T v|_F, zero at every critical point with lam > 0."""
    return float(np.linalg.norm(p.u.T @ p.u - p.v.T @ p.v))


def _thin_svd(p: LoraPoint) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Singular triple of u v^T computed through the r x r core."""
    qu, ru = np.linalg.qr(p.u)
    qv, rv = np.linalg.qr(p.v)
    uc, s, vct = np.linalg.svd(ru @ rv.T)
    return qu @ uc, s, qv @ vct.T


def svd_align(p: LoraPoint, rank_tol_scale: float = 1e-8) -> AlignedFrame:
    """Orthonormal singular frame of u v^T, or RankDeficientError."""
    uu, s, vv = _thin_svd(p)
    if s.size == 0 or s[0] == 0.0:
        raise RankDeficientError(0, s)
    tol = rank_tol_scale * s[0]
    eff = int(np.sum(s > tol))
    if eff < p.rank:
        raise RankDeficientError(eff, s)
    sq = np.sqrt(s)
    balanced = LoraPoint(uu * sq, vv * sq, p.lam)
    return AlignedFrame(uu, vv, s, balanced)


def orthonormal_complement(basis: np.ndarray) -> np.ndarray:
    """Columns spanning the orthogonal complement of the given orthonormal columns."""
    return scipy.linalg.null_space(basis.T)


def residual_blocks(inst: ProblemInstance, p: LoraPoint, lam: float,
                    kind: str = MSE,
                    rank_tol_scale: float = 1e-8) -> ResidualBlocks:
    """Project the pulled-back residual onto the four singular-frame blocks."""
    frame = svd_align(p, rank_tol_scale)
    R = residual_matrix(inst, p, kind)
    uu, vv = frame.u_basis, frame.v_basis
    uperp = orthonormal_complement(uu)
    vperp = orthonormal_complement(vv)
    r = p.rank
    r11 = uu.T @ R @ vv
    r12 = uu.T @ R @ vperp
    r21 = uperp.T @ R @ vv
    r22 = uperp.T @ R @ vperp
    s1 = float(np.linalg.svd(r22, compute_uv=False)[0]) if min(r22.shape) else 0.0
    return ResidualBlocks(
        r11_deviation=float(np.linalg.norm(r11 + lam * np.eye(r))),
        r12_norm=float(np.linalg.norm(r12)),
        r21_norm=float(np.linalg.norm(r21)),
        r22=r22,
        sigma1_r22=s1,
    )


def q_spectrum(r22: np.ndarray, lam: float, r: int) -> np.ndarray:
    """Eigenvalues of the indefinite cross-term form on the off-space.

    The form acts on r independent copies of the block kernel
    [[lam I, R22], [R22^T, lam I]], so the spectrum is lam +- sigma_i(R22)
    with multiplicity r each, plus lam itself for the |rows - cols|
    unmatched dimensions (again r copies).
    """
    a, b = r22.shape
    if min(a, b) == 0:
        return np.full(r * (a + b), lam)
    svals = np.linalg.svd(r22, compute_uv=False)
    eigs = np.concatenate([lam + svals, lam - svals, np.full(abs(a - b), lam)])
    return np.sort(np.tile(eigs, r))


def min_hessian_eig(inst: ProblemInstance, p: LoraPoint, kind: str,
                    dense_cap: int = DEFAULT_DENSE_CAP) -> MinEigReport:
    """Smallest Hessian eigenvalue; dense within cap, else iterative."""
    d = p.rank * (inst.operator.m + inst.operator.n)
    if d <= dense_cap:
        w = np.linalg.eigvalsh(assemble_hessian(inst, p, kind, dense_cap))
        return MinEigReport(float(w[0]), float(max(abs(w[0]), abs(w[-1]))), "dense")
    m, n, r = inst.operator.m, inst.operator.n, p.rank

    def matvec(x):
        du = x[:r * m].reshape(m, r, order="F")
        dv = x[r * m:].reshape(n, r, order="F")
        hu, hv = hessian_vector_product(inst, p, du, dv, kind)
        return np.concatenate([hu.ravel(order="F"), hv.ravel(order="F")])

    lin = scipy.sparse.linalg.LinearOperator((d, d), matvec=matvec, dtype=np.float64)
    tol = 1e-8
    lo = scipy.sparse.linalg.eigsh(lin, k=1, which="SA", tol=tol,
                                   return_eigenvectors=False)
    hi = scipy.sparse.linalg.eigsh(lin, k=1, which="LA", tol=tol,
                                   return_eigenvectors=False)
    hnorm = float(max(abs(lo[0]), abs(hi[0])))
    return MinEigReport(float(lo[0]), hnorm, "iterative", residual_tol=tol)


def tangent_basis(p: LoraPoint, rank_tol_scale: float = 1e-8) -> np.ndarray:
    """Frobenius-orthonormal basis of {du v^T + u dv^T}, shape (dim, m, n).

    The span decomposes along the singular frame into the (1,1), (1,2),
    and (2,1) blocks, giving dimension r(m+n) - r^2 exactly.
    """
    frame = svd_align(p, rank_tol_scale)
    uu, vv = frame.u_basis, frame.v_basis
    uperp = orthonormal_complement(uu)
    vperp = orthonormal_complement(vv)
    m, n, r = uu.shape[0], vv.shape[0], p.rank
    dim = r * (m + n) - r * r
    basis = np.empty((dim, m, n))
    k = 0
    for i in range(r):
        for j in range(r):
            basis[k] = np.outer(uu[:, i], vv[:, j]); k += 1
    for i in range(r):
        for j in range(n - r):
            basis[k] = np.outer(uu[:, i], vperp[:, j]); k += 1
    for i in range(m - r):
        for j in range(r):
            basis[k] = np.outer(uperp[:, i], vv[:, j]); k += 1
    assert k == dim
    return basis


@dataclass
class TangentSpectrum:
    singular_values: np.ndarray   # descending
    min_nonzero: float
    dim_tangent: int
    kn: int
    edge_ratio: float             # min_nonzero^2 / dim_tangent


def tangent_operator_spectrum(inst: ProblemInstance, p: LoraPoint,
                              dense_cap: int = DEFAULT_DENSE_CAP) -> TangentSpectrum:
    """Singular values of the operator restricted to the tangent space.

    The restricted map in an orthonormal tangent basis is an iid-entry
    matrix for Gaussian operators; its squared smallest nonzero singular
    value, normalized by the tangent dimension (the sample-covariance
    convention), converges to the Marchenko-Pastur lower edge
    (1 - 1/sqrt(rho))^2 for rho = dim/KN > 1.
    """
    basis = tangent_basis(p)
    dim = basis.shape[0]
    if dim > dense_cap:
        raise CapacityError(f"tangent dimension {dim} exceeds cap {dense_cap}")
    op = inst.operator
    mat = op.matrix @ basis.reshape(dim, op.m * op.n).T   # (KN, dim)
    svals = np.linalg.svd(mat, compute_uv=False)
    tol = max(mat.shape) * np.finfo(np.float64).eps * (svals[0] if svals.size else 0.0)
    nonzero = svals[svals > tol]
    min_nz = float(nonzero[-1]) if nonzero.size else 0.0
    return TangentSpectrum(svals, min_nz, dim, op.kn, min_nz ** 2 / dim)


def mp_edge(rho: float, alpha: float = 1.0) -> float:
    """Marchenko-Pastur lower-edge value alpha (1 - 1/sqrt(rho))^2, rho > 1."""
    if rho <= 1:
        raise ValueError("mp_edge requires rho > 1")
    return alpha * (1.0 - 1.0 / np.sqrt(rho)) ** 2


def lstsq_floor(inst: ProblemInstance) -> float:
    """Unrestricted least-squares data-loss floor over all full m x n updates."""
    op = inst.operator
    b = inst.labels - inst.baseline
    sol, _, _, _ = np.linalg.lstsq(op.matrix, b, rcond=None)
    res = b - op.matrix @ sol
    return 0.5 * float(res @ res) / op.N


def global_floor(inst: ProblemInstance, data_losses: list[float]) -> float:
    """Certified-or-best lower bound for the global data loss."""
    best = min(data_losses) if data_losses else np.inf
    return float(min(best, lstsq_floor(inst)))


def nuclear_certificate(inst: ProblemInstance, p: LoraPoint, lam: float,
                        rank_tol_scale: float = 1e-8,
                        cert_tol: float = 1e-6,
                        kind: str = MSE) -> CertificateReport:
    """Global-optimality certificate for rank-deficient stationary points.

    Checks the residual operator-norm bound |R|_op <= lam (1 + tol),
    forms W = -R/lam - U0 V0^T from the thin SVD of the product, and
    verifies the three nuclear-norm subgradient residuals.
    """
    if lam <= 0:
        raise ValueError("certificate requires lam > 0")
    R = residual_matrix(inst, p, kind)
    op_norm = float(np.linalg.svd(R, compute_uv=False)[0])
    op_ok = op_norm <= lam * (1.0 + cert_tol)
    uu, s, vv = _thin_svd(p)
    eff = int(np.sum(s > rank_tol_scale * s[0])) if s.size and s[0] > 0 else 0
    u0, v0 = uu[:, :eff], vv[:, :eff]
    W = -R / lam - u0 @ v0.T
    res_u = float(np.linalg.norm(u0.T @ W))
    res_v = float(np.linalg.norm(W @ v0))
    w_op = float(np.linalg.svd(W, compute_uv=False)[0]) if min(W.shape) else 0.0
    res_op = max(0.0, w_op - 1.0)
    certified = op_ok and res_u <= cert_tol and res_v <= cert_tol and res_op <= cert_tol
    advisory = None
    if eff >= p.rank:
        advisory = ("point is not rank-deficient; the certificate applies to the "
                    "rank-deficient stationary-point hypothesis only")
    return CertificateReport(op_norm, op_ok, (res_u, res_v, res_op), certified,
                             eff, advisory)


def classify(inst: ProblemInstance, result: RunResult, kind: str, floor: float,
             tols: Tolerances | None = None,
             dense_cap: int = DEFAULT_DENSE_CAP) -> CriticalPointReport:
    """Full report for one run: diagnostics plus the four-way classification."""
    tols = tols or Tolerances()
    p = result.point
    report_loss = loss(inst, p, kind)
    gu, gv = (residual_matrix(inst, p, kind) @ p.v + p.lam * p.u,
              residual_matrix(inst, p, kind).T @ p.u + p.lam * p.v)
    grad_norm = float(np.sqrt(np.sum(gu * gu) + np.sum(gv * gv)))
    balance = balancedness_residual(p)

    blocks: ResidualBlocks | None = None
    q_eigs: np.ndarray | None = None
    certificate: CertificateReport | None = None
    effective_rank = p.rank
    try:
        blocks = residual_blocks(inst, p, p.lam, kind, tols.rank_tol_scale)
        q_eigs = q_spectrum(blocks.r22, p.lam, p.rank)
    except RankDeficientError as exc:
        effective_rank = exc.effective_rank
        if p.lam > 0:
            certificate = nuclear_certificate(inst, p, p.lam,
                                              tols.rank_tol_scale, tols.cert_tol,
                                              kind)

    eig = min_hessian_eig(inst, p, kind, dense_cap)
    grad_tol = tols.grad_tol_scale * (1.0 + abs(report_loss.data_loss))
    eig_tol = tols.eig_tol_scale * eig.h_norm
    gap = report_loss.data_loss - floor

    if not result.converged:
        classification = NOT_CONVERGED
    elif grad_norm <= grad_tol and eig.value >= -eig_tol:
        if gap > tols.gap_tol_abs + tols.gap_tol_rel * floor:
            classification = SPURIOUS_SOSP
        else:
            classification = GLOBAL_MIN
    elif grad_norm <= grad_tol:
        classification = STRICT_SADDLE
    else:
        classification = NOT_CONVERGED

    return CriticalPointReport(
        grad_norm=grad_norm,
        balance_residual=balance,
        blocks=blocks,
        q_eigs=q_eigs,
        min_hessian_eig=eig.value,
        h_norm=eig.h_norm,
        loss=report_loss,
        classification=classification,
        certificate=certificate,
        floor=floor,
        gap=gap,
        effective_rank=effective_rank,
        lam=p.lam,
        tolerances=tols,
    )
