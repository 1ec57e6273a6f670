"""Matrix/tensor completion for gridded travel-time residuals.

Joint low-rank factorization and Laplacian smoothing under a hard data-misfit
constraint, plus FISTA, L-BFGS, smoothing-only, and low-rank-only baselines,
with a synthetic benchmark generator and a reproducible CLI pipeline.
"""

from .baselines import (FistaConfig, LbfgsConfig, fista_solve, lbfgs_objective_grad,
                        lbfgs_solve, smoothing_only_solve, svt)
from .grid import (DimensionError, MatricizedView, ReceiverGrid, ResidualTensor,
                   SamplingMask, SourceSet, compute_source_energy, dematricize,
                   matricize_block, matricize_receiver_by_source)
from .metrics import EvalReport, export_report, load_report, rms, sv_decay, terminal_feasibility
from .operators import (MaskedData, NormalSystem, SamplingOperator, SmoothingOperator,
                        apply_sampling, apply_sampling_adjoint, build_laplacian,
                        build_normal_system, spectral_norm)
from .relaxation import (FactorPair, RelaxConfig, SolveResult, dmisfit_dlambda,
                         lowrank_only_solve, misfit_gap, root_find_lambda,
                         solve_w_lambda, update_L, update_R, vr_solve)
from .synthetic import (FieldSpec, NoiseSpec, add_noise, generate_field, misfit_budget,
                        subsample_mask)

__version__ = "0.1.0"
