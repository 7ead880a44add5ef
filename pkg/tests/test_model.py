import numpy as np
import pytest

import lorascape as L
from lorascape.model import softmax
from conftest import random_point


def total_loss(inst, p, kind):
    return L.loss(inst, p, kind).total


def test_predict_zero_update(small_mse_instance):
    inst = small_mse_instance
    p = L.LoraPoint(np.zeros((12, 2)), np.ones((10, 2)), 0.0)
    assert np.array_equal(L.predict(inst, p), inst.baseline)


def test_predict_planted_interpolation():
    op = L.gen_operator(8, 8, 2, 6, seed=31)
    inst = L.gen_instance(op, 1, 0.0, L.MSE, seed=31)
    u, s, vt = np.linalg.svd(inst.planted_target)
    p = L.LoraPoint(u[:, :1] * s[0], vt[:1].T, 0.0)
    assert np.allclose(L.predict(inst, p), inst.labels, atol=1e-12)
    assert L.loss(inst, p, L.MSE).data_loss < 1e-24


def test_predict_rank_padding(small_mse_instance):
    inst = small_mse_instance
    rng = L.make_rng(5)
    u = rng.standard_normal((12, 2)); v = rng.standard_normal((10, 2))
    u[:, 1] = 0.0; v[:, 1] = 0.0
    p2 = L.LoraPoint(u, v, 0.0)
    p1 = L.LoraPoint(u[:, :1], v[:, :1], 0.0)
    assert np.allclose(L.predict(inst, p2), L.predict(inst, p1), atol=1e-14)


def test_ce_uniform_logits_is_log2(small_ce_instance):
    inst = small_ce_instance
    p = L.LoraPoint(np.zeros((12, 1)), np.zeros((10, 1)), 0.0)
    rep = L.loss(inst, p, L.CE)
    assert np.isclose(rep.data_loss, np.log(2.0), atol=1e-12)


def test_reg_loss_arithmetic(small_mse_instance):
    # r unit columns in each factor: reg = (lam/2)(r + r) = lam * r.
    inst = small_mse_instance
    for r in (1, 2, 3):
        u = np.zeros((12, r)); v = np.zeros((10, r))
        for k in range(r):
            u[k, k] = 1.0; v[k, k] = 1.0
        rep = L.loss(inst, L.LoraPoint(u, v, 0.1), L.MSE)
        assert np.isclose(rep.reg_loss, 0.1 * r, atol=1e-14)
        assert np.isclose(rep.total, rep.data_loss + rep.reg_loss, rtol=1e-14)


def test_residual_noiseless_planted_zero():
    op = L.gen_operator(8, 8, 2, 6, seed=32)
    inst = L.gen_instance(op, 1, 0.0, L.MSE, seed=32)
    u, s, vt = np.linalg.svd(inst.planted_target)
    p = L.LoraPoint(u[:, :1] * s[0], vt[:1].T, 0.0)
    assert np.linalg.norm(L.residual_matrix(inst, p, L.MSE)) < 1e-12


def test_residual_matches_definition(small_mse_instance):
    # Oracle: direct entrywise sum over slices.
    inst = small_mse_instance
    p = random_point(12, 10, 2, 0.0, seed=6)
    resid = L.predict(inst, p) - inst.labels
    oracle = np.zeros((12, 10))
    for i in range(inst.operator.N):
        for j in range(inst.operator.K):
            oracle += resid[i * 2 + j] * inst.operator.jacobians[i, j]
    oracle /= inst.operator.N
    R = L.residual_matrix(inst, p, L.MSE)
    assert np.allclose(R, oracle, rtol=1e-12, atol=1e-14)


def test_residual_ce_saturated_margin(small_ce_instance):
    # Scale a correct predictor until every per-sample logit margin is >= 20:
    # the softmax residual then vanishes like exp(-margin).
    inst = small_ce_instance
    u, s, vt = np.linalg.svd(inst.planted_target)
    logits = inst.operator.apply(inst.planted_target).reshape(inst.operator.N, 2)
    min_gap = np.abs(logits[:, 0] - logits[:, 1]).min()
    scale = 20.0 / min_gap
    norms = []
    for mult in (1.0, scale):
        p = L.LoraPoint(u[:, :1] * (mult * s[0]), vt[:1].T, 0.0)
        norms.append(np.linalg.norm(L.residual_matrix(inst, p, L.CE)))
    assert norms[1] < 1e-6 * norms[0]


@pytest.mark.parametrize("kind", [L.MSE, L.CE])
def test_gradient_matches_finite_differences(kind, small_mse_instance, small_ce_instance):
    inst = small_ce_instance if kind == L.CE else small_mse_instance
    rng = L.make_rng(40)
    h = 1e-6
    for trial in range(20):
        p = random_point(12, 10, 2, 1e-3, seed=100 + trial)
        gu, gv = L.gradient(inst, p, kind)
        du = rng.standard_normal((12, 2)); dv = rng.standard_normal((10, 2))
        analytic = float(np.sum(gu * du) + np.sum(gv * dv))
        fp = total_loss(inst, L.LoraPoint(p.u + h * du, p.v + h * dv, p.lam), kind)
        fm = total_loss(inst, L.LoraPoint(p.u - h * du, p.v - h * dv, p.lam), kind)
        fd = (fp - fm) / (2 * h)
        assert abs(analytic - fd) <= 1e-6 * max(1.0, abs(analytic))


def test_gradient_zero_at_origin_without_decay(small_mse_instance):
    inst = small_mse_instance
    p = L.LoraPoint(np.zeros((12, 1)), np.zeros((10, 1)), 0.0)
    gu, gv = L.gradient(inst, p, L.MSE)
    assert np.linalg.norm(gu) == 0.0 and np.linalg.norm(gv) == 0.0


@pytest.mark.parametrize("kind", [L.MSE, L.CE])
def test_hessian_form_matches_finite_differences(kind, small_mse_instance, small_ce_instance):
    inst = small_ce_instance if kind == L.CE else small_mse_instance
    rng = L.make_rng(41)
    h = 1e-4
    for trial in range(20):
        p = random_point(12, 10, 2, 1e-3, seed=200 + trial)
        du = rng.standard_normal((12, 2)); dv = rng.standard_normal((10, 2))
        quad = L.hessian_quadratic_form(inst, p, du, dv, kind)
        f0 = total_loss(inst, p, kind)
        fp = total_loss(inst, L.LoraPoint(p.u + h * du, p.v + h * dv, p.lam), kind)
        fm = total_loss(inst, L.LoraPoint(p.u - h * du, p.v - h * dv, p.lam), kind)
        fd = (fp - 2 * f0 + fm) / (h * h)
        assert abs(quad - fd) <= 1e-5 * max(1.0, abs(quad))


def test_hessian_form_at_origin(small_mse_instance):
    # Data-fit term vanishes at u = v = 0: value is the pure cross term.
    inst = small_mse_instance
    p = L.LoraPoint(np.zeros((12, 1)), np.zeros((10, 1)), 0.0)
    rng = L.make_rng(42)
    du = rng.standard_normal((12, 1)); dv = rng.standard_normal((10, 1))
    R0 = -inst.operator.adjoint(inst.labels - inst.baseline) / inst.operator.N
    expected = 2.0 * float(np.sum(R0 * (du @ dv.T)))
    assert np.isclose(L.hessian_quadratic_form(inst, p, du, dv, L.MSE),
                      expected, rtol=1e-12, atol=1e-12)


def test_hessian_form_one_sided(small_mse_instance):
    inst = small_mse_instance
    p = random_point(12, 10, 2, 0.05, seed=43)
    rng = L.make_rng(44)
    du = rng.standard_normal((12, 2))
    dv = np.zeros((10, 2))
    val = L.hessian_quadratic_form(inst, p, du, dv, L.MSE)
    a = inst.operator.apply(du @ p.v.T)
    expected = float(a @ a) / inst.operator.N + p.lam * float(np.sum(du * du))
    assert np.isclose(val, expected, rtol=1e-12)


@pytest.mark.parametrize("kind", [L.MSE, L.CE])
def test_assembled_hessian_matches_form(kind, small_mse_instance, small_ce_instance):
    inst = small_ce_instance if kind == L.CE else small_mse_instance
    p = random_point(12, 10, 2, 1e-2, seed=45)
    H = L.assemble_hessian(inst, p, kind)
    assert np.abs(H - H.T).max() < 1e-12
    rng = L.make_rng(46)
    for _ in range(50):
        du = rng.standard_normal((12, 2)); dv = rng.standard_normal((10, 2))
        x = np.concatenate([du.ravel(order="F"), dv.ravel(order="F")])
        assert np.isclose(float(x @ H @ x),
                          L.hessian_quadratic_form(inst, p, du, dv, kind),
                          rtol=1e-10, atol=1e-12)


def test_assembled_hessian_pd_at_large_decay(small_mse_instance):
    inst = small_mse_instance
    p = random_point(12, 10, 1, 0.0, seed=47)
    R = L.residual_matrix(inst, p, L.MSE)
    lam = 10.0 * np.linalg.svd(R, compute_uv=False)[0]
    p_big = L.LoraPoint(p.u, p.v, lam)
    H = L.assemble_hessian(inst, p_big, L.MSE)
    assert np.linalg.eigvalsh(H)[0] > 0


def test_assemble_hessian_cap(small_mse_instance):
    from lorascape.errors import CapacityError
    p = random_point(12, 10, 2, 0.0, seed=48)
    with pytest.raises(CapacityError):
        L.assemble_hessian(small_mse_instance, p, L.MSE, dense_cap=10)


def test_hessian_vector_product_matches_dense(small_mse_instance, small_ce_instance):
    for inst, kind in ((small_mse_instance, L.MSE), (small_ce_instance, L.CE)):
        p = random_point(12, 10, 2, 1e-2, seed=49)
        H = L.assemble_hessian(inst, p, kind)
        rng = L.make_rng(50)
        du = rng.standard_normal((12, 2)); dv = rng.standard_normal((10, 2))
        x = np.concatenate([du.ravel(order="F"), dv.ravel(order="F")])
        from lorascape.model import hessian_vector_product
        hu, hv = hessian_vector_product(inst, p, du, dv, kind)
        hx = np.concatenate([hu.ravel(order="F"), hv.ravel(order="F")])
        assert np.allclose(hx, H @ x, rtol=1e-10, atol=1e-12)


def test_ce_shift_invariance(small_ce_instance):
    # Adding a constant to every logit of a sample leaves the CE loss fixed;
    # realized through a baseline shift since logits are affine in the update.
    inst = small_ce_instance
    p = random_point(12, 10, 1, 0.0, seed=51)
    base = L.loss(inst, p, L.CE).data_loss
    shift = np.repeat(L.make_rng(52).standard_normal(inst.operator.N), inst.operator.K)
    shifted = L.ProblemInstance(inst.operator, inst.baseline + shift, inst.labels,
                                inst.planted_target, inst.target_rank, inst.noise,
                                inst.noise_std, inst.loss_kind, inst.seed)
    assert np.isclose(L.loss(shifted, p, L.CE).data_loss, base, rtol=1e-12, atol=1e-12)


def test_mse_quadratic_along_linear_rays(small_mse_instance):
    # One-sided rays move linearly in the update, so the loss is exactly
    # quadratic in t: the second-order Taylor expansion is exact.
    inst = small_mse_instance
    p = random_point(12, 10, 2, 0.0, seed=53)
    rng = L.make_rng(54)
    for du, dv in ((rng.standard_normal((12, 2)), np.zeros((10, 2))),
                   (np.zeros((12, 2)), rng.standard_normal((10, 2)))):
        f0 = total_loss(inst, p, L.MSE)
        gu, gv = L.gradient(inst, p, L.MSE)
        slope = float(np.sum(gu * du) + np.sum(gv * dv))
        curv = L.hessian_quadratic_form(inst, p, du, dv, L.MSE)
        for t in (-1.0, -0.3, 0.2, 0.7, 1.0):
            ft = total_loss(inst, L.LoraPoint(p.u + t * du, p.v + t * dv, p.lam), L.MSE)
            taylor = f0 + t * slope + 0.5 * t * t * curv
            assert abs(ft - taylor) < 1e-10 * max(1.0, abs(ft))


def test_softmax_saturated_no_overflow():
    probs = softmax(np.array([[1000.0, 0.0], [0.0, -1000.0]]))
    assert np.all(np.isfinite(probs))
    assert np.allclose(probs.sum(axis=1), 1.0)
