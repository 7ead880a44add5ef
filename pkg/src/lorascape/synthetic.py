"""Synthetic feature operators and planted-target problem instances.

A feature operator is the linear map sending an m-by-n update matrix to
the KN-vector of per-sample, per-output inner products with a stack of
Jacobian slices.  This module generates Gaussian-iid operators, plants
low-rank targets, applies random orthogonal dimension reductions, and
owns the on-disk directory format for operators and instances.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, FormatError
from .rng import GENERATOR_ID, make_rng

# Refuse to materialize operators above this entry count (~512 MiB of float64).
DEFAULT_MAX_ENTRIES = 1 << 26

FORMAT_VERSION = 1

MSE = "mse"
CE = "ce"
LOSS_KINDS = (MSE, CE)


@dataclass(eq=False)
class FeatureOperator:
    """Stack of per-sample, per-output Jacobian slices.

    jacobians has shape (N, K, m, n); the flattened output index is
    sample-major: flat = i * K + j.
    """

    jacobians: np.ndarray
    entry_scale: float = 1.0
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        jac = np.ascontiguousarray(np.asarray(self.jacobians, dtype=np.float64))
        if jac.ndim != 4:
            raise ValueError(f"jacobians must be 4-d (N, K, m, n), got {jac.shape}")
        if not np.all(np.isfinite(jac)):
            raise ValueError("jacobian entries must be finite")
        jac.setflags(write=False)
        self.jacobians = jac

    @property
    def N(self) -> int:
        return self.jacobians.shape[0]

    @property
    def K(self) -> int:
        return self.jacobians.shape[1]

    @property
    def m(self) -> int:
        return self.jacobians.shape[2]

    @property
    def n(self) -> int:
        return self.jacobians.shape[3]

    @property
    def kn(self) -> int:
        return self.N * self.K

    @property
    def matrix(self) -> np.ndarray:
        """(KN, m*n) matrix view of the operator; row order sample-major."""
        if self._matrix is None:
            self._matrix = self.jacobians.reshape(self.kn, self.m * self.n)
        return self._matrix

    def apply(self, delta: np.ndarray) -> np.ndarray:
        """KN-vector of inner products of every slice with delta."""
        if delta.shape != (self.m, self.n):
            raise ValueError(f"delta must be {(self.m, self.n)}, got {delta.shape}")
        return self.matrix @ delta.ravel()

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        """Adjoint map: the m-by-n matrix sum_ij w_ij G_ij."""
        if w.shape != (self.kn,):
            raise ValueError(f"w must be flat of length {self.kn}, got {w.shape}")
        return (self.matrix.T @ w).reshape(self.m, self.n)

    def slice_samples(self, start: int, stop: int) -> "FeatureOperator":
        """Operator restricted to the sample range [start, stop)."""
        return FeatureOperator(self.jacobians[start:stop], self.entry_scale)


@dataclass(eq=False)
class ProblemInstance:
    """Operator plus baseline outputs, labels, planted target, and noise record."""

    operator: FeatureOperator
    baseline: np.ndarray       # (KN,)
    labels: np.ndarray         # (KN,); one-hot per sample for CE
    planted_target: np.ndarray  # (m, n)
    target_rank: int
    noise: np.ndarray          # (KN,) realized noise, zeros for CE
    noise_std: float
    loss_kind: str
    seed: int
    generator: str = GENERATOR_ID

    def __post_init__(self):
        kn = self.operator.kn
        for name in ("baseline", "labels", "noise"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (kn,):
                raise ValueError(f"{name} must have shape ({kn},), got {arr.shape}")
            arr.setflags(write=False)
            setattr(self, name, arr)
        tgt = np.asarray(self.planted_target, dtype=np.float64)
        if tgt.shape != (self.operator.m, self.operator.n):
            raise ValueError("planted_target shape mismatch")
        tgt.setflags(write=False)
        self.planted_target = tgt
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.loss_kind == CE:
            onehot = self.labels.reshape(self.operator.N, self.operator.K)
            if not (np.all((onehot == 0.0) | (onehot == 1.0))
                    and np.allclose(onehot.sum(axis=1), 1.0)):
                raise ValueError("CE labels must be one-hot per sample")


def gen_operator(m: int, n: int, K: int, N: int, seed: int,
                 max_entries: int = DEFAULT_MAX_ENTRIES) -> FeatureOperator:
    """Gaussian-iid operator with unit per-output variance for unit-Frobenius inputs."""
    if min(m, n, K, N) < 1:
        raise ValueError("all dimensions must be >= 1")
    entries = m * n * K * N
    if entries > max_entries:
        raise CapacityError(
            f"operator would hold {entries} entries "
            f"({entries * 8 / 2**20:.0f} MiB); cap is {max_entries}"
        )
    rng = make_rng(seed)
    jac = rng.standard_normal((N, K, m, n))
    return FeatureOperator(jac, entry_scale=1.0)


def _planted_target(m: int, n: int, rank: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-Frobenius rank-`rank` matrix with orthonormal factor columns."""
    qu, _ = np.linalg.qr(rng.standard_normal((m, rank)))
    qv, _ = np.linalg.qr(rng.standard_normal((n, rank)))
    return (qu @ qv.T) / np.sqrt(rank)


def gen_instance(op: FeatureOperator, target_rank: int, noise_std: float,
                 loss_kind: str, seed: int) -> ProblemInstance:
    """Plant a target and realize labels.

    MSE labels are the clean outputs plus Gaussian noise of the given
    standard deviation.  CE labels are hard one-hots at the argmax of
    the clean logits (ties resolve to the lower class index); the noise
    record is zero in that case.
    """
    if not 1 <= target_rank <= min(op.m, op.n):
        raise ValueError(f"target_rank must be in [1, {min(op.m, op.n)}]")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
    rng = make_rng(seed, 1)
    target = _planted_target(op.m, op.n, target_rank, rng)
    clean = op.apply(target)
    baseline = np.zeros(op.kn)
    if loss_kind == MSE:
        noise = noise_std * rng.standard_normal(op.kn)
        labels = clean + noise
    else:
        noise = np.zeros(op.kn)
        logits = clean.reshape(op.N, op.K)
        onehot = np.zeros_like(logits)
        onehot[np.arange(op.N), logits.argmax(axis=1)] = 1.0
        labels = onehot.ravel()
    return ProblemInstance(op, baseline, labels, target, target_rank,
                           noise, noise_std, loss_kind, seed)


def slice_instance(inst: ProblemInstance, start: int, stop: int) -> ProblemInstance:
    """Instance restricted to a sample range, keeping the planted data."""
    k = inst.operator.K
    return ProblemInstance(
        operator=inst.operator.slice_samples(start, stop),
        baseline=inst.baseline[start * k:stop * k],
        labels=inst.labels[start * k:stop * k],
        planted_target=inst.planted_target,
        target_rank=inst.target_rank,
        noise=inst.noise[start * k:stop * k],
        noise_std=inst.noise_std,
        loss_kind=inst.loss_kind,
        seed=inst.seed,
    )


def _haar_rows(dim_out: int, dim_in: int, rng: np.random.Generator) -> np.ndarray:
    """dim_out orthonormal rows drawn from the Haar measure on O(dim_in)."""
    q, r = np.linalg.qr(rng.standard_normal((dim_in, dim_in)))
    q = q * np.sign(np.diag(r))
    return q[:, :dim_out].T


def project_operator(op: FeatureOperator, D: int, seed: int) -> FeatureOperator:
    """Conjugate every slice by seeded Haar-orthonormal row projections to D x D."""
    if not 1 <= D <= min(op.m, op.n):
        raise ValueError(f"D must be in [1, {min(op.m, op.n)}]")
    rng = make_rng(seed, 2)
    p_left = _haar_rows(D, op.m, rng)
    p_right = _haar_rows(D, op.n, rng)
    projected = np.einsum("da,ikab,eb->ikde", p_left, op.jacobians, p_right,
                          optimize=True)
    return FeatureOperator(projected, op.entry_scale)


# ---------------------------------------------------------------------------
# Directory format: a plain-text manifest plus raw little-endian float64
# tensors in row-major [sample][output][row][col] order.

_MANIFEST = "manifest.txt"
_TENSOR = "jacobians.bin"


def _write_manifest(path: str, pairs: list[tuple[str, str]]) -> None:
    with open(os.path.join(path, _MANIFEST), "w") as fh:
        for key, value in pairs:
            fh.write(f"{key} = {value}\n")


def _read_manifest(path: str) -> dict[str, str]:
    mpath = os.path.join(path, _MANIFEST)
    if not os.path.exists(mpath):
        raise FormatError(f"no manifest at {mpath}")
    out: dict[str, str] = {}
    with open(mpath) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"malformed manifest line: {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _write_tensor(path: str, name: str, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype="<f8").tofile(os.path.join(path, name))


def _read_tensor(path: str, name: str, shape: tuple[int, ...]) -> np.ndarray:
    fpath = os.path.join(path, name)
    if not os.path.exists(fpath):
        raise FormatError(f"missing tensor file {fpath}")
    expected = int(np.prod(shape)) * 8
    actual = os.path.getsize(fpath)
    if actual != expected:
        raise FormatError(
            f"{fpath}: expected {expected} bytes for shape {shape}, found {actual}"
        )
    return np.fromfile(fpath, dtype="<f8").astype(np.float64).reshape(shape)


def _operator_manifest_pairs(op: FeatureOperator) -> list[tuple[str, str]]:
    return [
        ("version", str(FORMAT_VERSION)),
        ("m", str(op.m)),
        ("n", str(op.n)),
        ("K", str(op.K)),
        ("N", str(op.N)),
        ("entry_scale", repr(op.entry_scale)),
        ("endianness", "little"),
        ("order", "sample,output,row,col"),
    ]


def save_operator(op: FeatureOperator, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    _write_manifest(path, _operator_manifest_pairs(op))
    _write_tensor(path, _TENSOR, op.jacobians)


def _check_operator_manifest(man: dict[str, str]) -> tuple[int, int, int, int, float]:
    version = int(man.get("version", "-1"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unknown format version {man.get('version')!r}")
    if man.get("endianness", "little") != "little":
        raise FormatError(f"unsupported endianness {man.get('endianness')!r}")
    try:
        m, n, K, N = (int(man[k]) for k in ("m", "n", "K", "N"))
        entry_scale = float(man.get("entry_scale", "1.0"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"manifest missing or malformed dimension: {exc}") from exc
    return m, n, K, N, entry_scale


def load_operator(path: str) -> FeatureOperator:
    man = _read_manifest(path)
    m, n, K, N, entry_scale = _check_operator_manifest(man)
    jac = _read_tensor(path, _TENSOR, (N, K, m, n))
    return FeatureOperator(jac, entry_scale)


def save_instance(inst: ProblemInstance, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    op = inst.operator
    pairs = _operator_manifest_pairs(op)
    pairs += [
        ("loss_kind", inst.loss_kind),
        ("noise_std", repr(inst.noise_std)),
        ("seed", str(inst.seed)),
        ("target_rank", str(inst.target_rank)),
        ("generator", inst.generator),
    ]
    _write_manifest(path, pairs)
    _write_tensor(path, _TENSOR, op.jacobians)
    _write_tensor(path, "labels.bin", inst.labels)
    _write_tensor(path, "target.bin", inst.planted_target)
    _write_tensor(path, "baseline.bin", inst.baseline)
    _write_tensor(path, "noise.bin", inst.noise)


def load_instance(path: str) -> ProblemInstance:
    man = _read_manifest(path)
    m, n, K, N, entry_scale = _check_operator_manifest(man)
    try:
        loss_kind = man["loss_kind"]
        noise_std = float(man["noise_std"])
        seed = int(man["seed"])
        target_rank = int(man["target_rank"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"instance manifest incomplete: {exc}") from exc
    op = FeatureOperator(_read_tensor(path, _TENSOR, (N, K, m, n)), entry_scale)
    kn = K * N
    return ProblemInstance(
        operator=op,
        baseline=_read_tensor(path, "baseline.bin", (kn,)),
        labels=_read_tensor(path, "labels.bin", (kn,)),
        planted_target=_read_tensor(path, "target.bin", (m, n)),
        target_rank=target_rank,
        noise=_read_tensor(path, "noise.bin", (kn,)),
        noise_std=noise_std,
        loss_kind=loss_kind,
        seed=seed,
        generator=man.get("generator", GENERATOR_ID),
    )
