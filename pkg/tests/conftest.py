import os

# Keep BLAS single-threaded: the suite's matrices are small and the worker
# pool in the acceptance sweep owns the parallelism.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

import lorascape as L
from lorascape.optimizer import TrainConfig


@pytest.fixture(scope="session")
def small_mse_instance():
    op = L.gen_operator(12, 10, 2, 8, seed=101)
    return L.gen_instance(op, target_rank=1, noise_std=0.05, loss_kind=L.MSE, seed=101)


@pytest.fixture(scope="session")
def small_ce_instance():
    op = L.gen_operator(12, 10, 2, 8, seed=102)
    return L.gen_instance(op, target_rank=1, noise_std=0.0, loss_kind=L.CE, seed=102)


@pytest.fixture(scope="session")
def converged_mse_run():
    """A well-converged rank-1 run on a mid-size noisy instance."""
    op = L.gen_operator(22, 22, 2, 16, seed=301)
    inst = L.gen_instance(op, target_rank=1, noise_std=0.01, loss_kind=L.MSE, seed=301)
    cfg = TrainConfig(rank=1, seeds=(0,), init_scale=1.0 / np.sqrt(22),
                      lambda_schedule=((1e-2, 1e-8), (1.6e-3, 1e-11)))
    res = L.train(inst, cfg, L.MSE, seed=0)
    assert res.converged
    return inst, res


def random_point(m, n, r, lam, seed, scale=0.5):
    rng = L.make_rng(seed, 99)
    return L.LoraPoint(scale * rng.standard_normal((m, r)),
                       scale * rng.standard_normal((n, r)), lam)
