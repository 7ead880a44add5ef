"""Landscape diagnostics for low-rank adapter training on linearized models."""

from .errors import (CapacityError, ConfigError, FormatError,
                     InfeasibleRankError, LorascapeError, RankDeficientError,
                     UndefinedEstimateError)
from .landscape import (CriticalPointReport, ResidualBlocks, Tolerances,
                        balancedness_residual, classify, global_floor, mp_edge,
                        min_hessian_eig, nuclear_certificate, q_spectrum,
                        residual_blocks, svd_align, tangent_basis,
                        tangent_operator_spectrum)
from .model import (LoraPoint, LossReport, assemble_hessian, gradient,
                    hessian_quadratic_form, loss, predict, residual_matrix)
from .optimizer import RunResult, TrainConfig, init_point, multi_seed, train
from .rng import GENERATOR_ID, make_rng
from .stats import StatsReport, jacobian_stats
from .synthetic import (CE, MSE, FeatureOperator, ProblemInstance,
                        gen_instance, gen_operator, load_instance,
                        load_operator, project_operator, save_instance,
                        save_operator, slice_instance)
from .theory import (PLEstimate, ThresholdReport, c_from_cstar, capacity,
                     cstar_from_c, new_min_rank, old_min_rank, pl_estimate,
                     rademacher_bound, threshold_report, tracy_widom_fit)

__version__ = "0.1.0"
