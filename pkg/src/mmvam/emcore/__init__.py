"""EM engine: E-step moments, M-steps, log-likelihood, score and the fitting loop."""

from .em import EMTrace, FitResult, em_iteration, run_em
from .estep import Assembly, PosteriorMoments, assemble, e_step, loglik, normal_matrix
from .mstep import (
    m_step_alpha,
    m_step_beta,
    m_step_gamma,
    m_step_gamma_stu,
    m_step_r,
    m_step_sigma_years,
)
from .params import EMConfig, ParamLayout, ParamState, check_params, initial_params
from .score import q_gradient, score_vector

__all__ = [
    "Assembly",
    "EMConfig",
    "EMTrace",
    "FitResult",
    "ParamLayout",
    "ParamState",
    "PosteriorMoments",
    "assemble",
    "check_params",
    "e_step",
    "em_iteration",
    "initial_params",
    "loglik",
    "m_step_alpha",
    "m_step_beta",
    "m_step_gamma",
    "m_step_gamma_stu",
    "m_step_r",
    "m_step_sigma_years",
    "normal_matrix",
    "q_gradient",
    "run_em",
    "score_vector",
]
