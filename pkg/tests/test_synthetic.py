import numpy as np
import pytest

import lorascape as L
from lorascape.errors import CapacityError, FormatError


def test_gen_operator_shape_contract():
    op = L.gen_operator(4, 4, 2, 3, seed=7)
    assert op.jacobians.shape == (3, 2, 4, 4)
    assert op.kn == 6
    assert np.all(np.isfinite(op.jacobians))


def test_gen_operator_entry_variance():
    # Moment check over >= 1e5 entries: unit in-distribution variance.
    op = L.gen_operator(64, 64, 2, 16, seed=1)
    var = op.jacobians.var()
    assert op.jacobians.size >= 10**5
    assert 0.95 <= var <= 1.05


def test_gen_operator_deterministic():
    a = L.gen_operator(5, 6, 2, 3, seed=9)
    b = L.gen_operator(5, 6, 2, 3, seed=9)
    assert np.array_equal(a.jacobians, b.jacobians)
    c = L.gen_operator(5, 6, 2, 3, seed=10)
    assert not np.array_equal(a.jacobians, c.jacobians)


def test_gen_operator_cap():
    with pytest.raises(CapacityError):
        L.gen_operator(1000, 1000, 8, 1000, seed=0, max_entries=10**6)


def test_adjoint_identity():
    op = L.gen_operator(9, 7, 3, 5, seed=3)
    rng = L.make_rng(77)
    for _ in range(100):
        delta = rng.standard_normal((9, 7))
        w = rng.standard_normal(op.kn)
        lhs = float(op.apply(delta) @ w)
        rhs = float(np.sum(delta * op.adjoint(w)))
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs), 1.0)


def test_instance_noiseless_interpolation():
    op = L.gen_operator(8, 8, 2, 6, seed=4)
    inst = L.gen_instance(op, target_rank=1, noise_std=0.0, loss_kind=L.MSE, seed=4)
    assert np.allclose(inst.labels, op.apply(inst.planted_target))
    assert np.linalg.norm(inst.noise) == 0.0


def test_instance_noise_concentration():
    # ||y - A(target)||^2 / KN concentrates around noise_std^2 for KN >= 64.
    op = L.gen_operator(10, 10, 2, 64, seed=5)
    inst = L.gen_instance(op, target_rank=1, noise_std=0.01, loss_kind=L.MSE, seed=5)
    ratio = np.sum((inst.labels - op.apply(inst.planted_target)) ** 2) / op.kn
    assert 0.5 * 0.01**2 <= ratio <= 1.5 * 0.01**2


def test_instance_planted_target_normalized():
    op = L.gen_operator(10, 8, 2, 4, seed=6)
    for rank in (1, 2, 3):
        inst = L.gen_instance(op, rank, 0.0, L.MSE, seed=6)
        assert np.isclose(np.linalg.norm(inst.planted_target), 1.0)
        assert np.linalg.matrix_rank(inst.planted_target) == rank


def test_instance_ce_one_hot():
    op = L.gen_operator(8, 8, 2, 10, seed=7)
    inst = L.gen_instance(op, 1, 0.0, L.CE, seed=7)
    onehot = inst.labels.reshape(10, 2)
    assert np.all((onehot == 0) | (onehot == 1))
    assert np.array_equal(onehot.sum(axis=1), np.ones(10))


def test_instance_target_rank_range():
    op = L.gen_operator(6, 4, 2, 3, seed=8)
    with pytest.raises(ValueError):
        L.gen_instance(op, 5, 0.0, L.MSE, seed=8)
    with pytest.raises(ValueError):
        L.gen_instance(op, 0, 0.0, L.MSE, seed=8)


def test_project_full_dim_is_isometry():
    op = L.gen_operator(8, 8, 2, 4, seed=11)
    proj = L.project_operator(op, 8, seed=12)
    for i in range(op.N):
        for j in range(op.K):
            s0 = np.linalg.svd(op.jacobians[i, j], compute_uv=False)
            s1 = np.linalg.svd(proj.jacobians[i, j], compute_uv=False)
            assert np.allclose(s0, s1, atol=1e-10)


def test_project_capacity_arithmetic():
    # Projecting 96 -> 32 leaves rank-1 capacity 2*32 - 1 = 63 < KN = 64.
    op = L.gen_operator(96, 96, 2, 32, seed=13)
    proj = L.project_operator(op, 32, seed=13)
    assert proj.m == proj.n == 32
    assert L.capacity(proj.m, proj.n, 1) == 63
    assert L.capacity(proj.m, proj.n, 1) < 64


def test_project_deterministic_and_range():
    op = L.gen_operator(10, 9, 2, 3, seed=14)
    a = L.project_operator(op, 5, seed=15)
    b = L.project_operator(op, 5, seed=15)
    assert np.array_equal(a.jacobians, b.jacobians)
    with pytest.raises(ValueError):
        L.project_operator(op, 0, seed=15)
    with pytest.raises(ValueError):
        L.project_operator(op, 10, seed=15)  # > min(m, n) = 9


def test_projection_preserves_projected_inner_products():
    op = L.gen_operator(9, 8, 2, 4, seed=16)
    D = 5
    proj = L.project_operator(op, D, seed=17)
    # Recover the projection frames from the linear action itself.
    from lorascape.rng import make_rng
    from lorascape.synthetic import _haar_rows
    rng = make_rng(17, 2)
    p_left = _haar_rows(D, op.m, rng)
    p_right = _haar_rows(D, op.n, rng)
    rng2 = L.make_rng(999)
    for _ in range(10):
        dprime = rng2.standard_normal((D, D))
        lifted = p_left.T @ dprime @ p_right
        assert np.allclose(proj.apply(dprime), op.apply(lifted), atol=1e-10)


def test_save_load_round_trip(tmp_path):
    op = L.gen_operator(4, 4, 2, 3, seed=7)
    path = tmp_path / "op"
    L.save_operator(op, str(path))
    loaded = L.load_operator(str(path))
    assert np.array_equal(op.jacobians, loaded.jacobians)
    assert loaded.entry_scale == op.entry_scale


def test_load_truncated_tensor(tmp_path):
    op = L.gen_operator(4, 4, 2, 3, seed=7)
    path = tmp_path / "op"
    L.save_operator(op, str(path))
    tensor = path / "jacobians.bin"
    data = tensor.read_bytes()
    tensor.write_bytes(data[:-16])
    with pytest.raises(FormatError, match="bytes"):
        L.load_operator(str(path))


def test_load_unknown_version(tmp_path):
    op = L.gen_operator(4, 4, 2, 3, seed=7)
    path = tmp_path / "op"
    L.save_operator(op, str(path))
    man = path / "manifest.txt"
    man.write_text(man.read_text().replace("version = 1", "version = 99"))
    with pytest.raises(FormatError, match="version"):
        L.load_operator(str(path))


def test_manifest_consistency_succeeds(tmp_path):
    op = L.gen_operator(3, 5, 2, 4, seed=20)
    path = tmp_path / "op"
    L.save_operator(op, str(path))
    assert (path / "jacobians.bin").stat().st_size == 3 * 5 * 2 * 4 * 8
    L.load_operator(str(path))


def test_instance_round_trip(tmp_path):
    op = L.gen_operator(6, 5, 2, 4, seed=21)
    inst = L.gen_instance(op, 2, 0.1, L.MSE, seed=22)
    path = tmp_path / "inst"
    L.save_instance(inst, str(path))
    loaded = L.load_instance(str(path))
    assert np.array_equal(loaded.labels, inst.labels)
    assert np.array_equal(loaded.planted_target, inst.planted_target)
    assert np.array_equal(loaded.noise, inst.noise)
    assert np.array_equal(loaded.operator.jacobians, op.jacobians)
    assert loaded.loss_kind == L.MSE
    assert loaded.noise_std == 0.1
    assert loaded.seed == 22
    assert loaded.target_rank == 2


def test_slice_instance():
    op = L.gen_operator(6, 5, 2, 10, seed=23)
    inst = L.gen_instance(op, 1, 0.0, L.CE, seed=23)
    part = L.slice_instance(inst, 2, 7)
    assert part.operator.N == 5
    assert np.array_equal(part.labels, inst.labels[4:14])
    assert np.array_equal(part.planted_target, inst.planted_target)
