"""The EM loop."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..design import ModelDesign, ModelVariant
from ..errors import ConvergenceWarning
from .estep import PosteriorMoments, e_step
from .mstep import m_step_alpha, m_step_beta, m_step_gamma, m_step_gamma_stu, m_step_r, m_step_sigma_years
from .params import EMConfig, ParamState, check_params, initial_params
from .score import score_vector

log = logging.getLogger(__name__)


@dataclass
class EMTrace:
    """Per-iteration record of a fit.

    ``loglik[k]`` is the log-likelihood at the k-th iterate (k = 0 is the
    initial value); ``damping[k]`` is the largest lambda the sigma-grid Newton
    solve used when producing iterate k + 1.
    """

    loglik: list[float] = field(default_factory=list)
    rel_change: list[float] = field(default_factory=list)
    damping: list[float] = field(default_factory=list)
    min_eig: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    score_norm: float = float("nan")

    def rows(self):
        for k, ll in enumerate(self.loglik):
            yield {
                "iteration": k,
                "loglik": ll,
                "rel_change": self.rel_change[k] if k < len(self.rel_change) else float("nan"),
                "damping": self.damping[k] if k < len(self.damping) else 0.0,
                "min_eig": self.min_eig[k] if k < len(self.min_eig) else float("nan"),
            }

    def is_monotone(self, slack: float = 1e-8) -> bool:
        ll = np.asarray(self.loglik)
        return bool(np.all(ll[1:] >= ll[:-1] - slack * np.abs(ll[:-1])))


@dataclass(eq=False)
class FitResult:
    design: ModelDesign
    params: ParamState
    trace: EMTrace
    moments: PosteriorMoments

    @property
    def converged(self) -> bool:
        return self.trace.converged

    @property
    def loglik(self) -> float:
        return self.moments.loglik


def em_iteration(
    design: ModelDesign,
    params: ParamState,
    moments: PosteriorMoments,
    config: EMConfig,
    outer_iter: int = 0,
    info: dict | None = None,
) -> ParamState:
    """One full sweep of M-steps (beta, Gamma, R, alpha) on the moments of ``params``."""
    new = params.copy()
    new.beta = m_step_beta(design, moments)
    new.gammas = m_step_gamma(design, moments, config.variance_floor)
    if design.variant is ModelVariant.GP_G:
        new.gamma_stu = m_step_gamma_stu(design, moments, config.variance_floor)
        new.sigma2 = m_step_sigma_years(design, moments, new.beta, config.variance_floor)
    else:
        new.sigma = m_step_r(design, moments, new.beta, config, outer_iter=outer_iter, info=info)
    if design.alpha_free:
        new.alpha = m_step_alpha(design, moments, new.beta, new.sigma)
    return new


def run_em(
    design: ModelDesign,
    init: ParamState | None = None,
    config: EMConfig | None = None,
    callback=None,
) -> FitResult:
    """Iterate E- and M-steps until the relative log-likelihood change drops below ``rel_tol``.

    ``callback(k, params, moments)`` runs after each E-step.  Non-convergence
    within ``max_iter`` returns a result with ``converged=False`` and a
    ConvergenceWarning.
    """
    config = config or EMConfig()
    params = initial_params(design) if init is None else init.copy()
    check_params(design, params)
    if design.alpha_pairs and not design.alpha_free:
        params.alpha = np.full(len(design.alpha_pairs), float(design.fixed_alpha))
    trace = EMTrace()
    moments = e_step(design, params)
    trace.loglik.append(moments.loglik)
    trace.rel_change.append(float("nan"))
    trace.min_eig.append(min(params.min_eigenvalues().values(), default=float("nan")))
    if callback is not None:
        callback(0, params, moments)
    for k in range(config.max_iter):
        info = {}
        params = em_iteration(design, params, moments, config, outer_iter=k, info=info)
        trace.damping.append(float(info.get("damping", 0.0)))
        moments = e_step(design, params)
        ll, prev = moments.loglik, trace.loglik[-1]
        rel = abs(ll - prev) / abs(ll) if ll != 0 else abs(ll - prev)
        trace.loglik.append(ll)
        trace.rel_change.append(rel)
        trace.min_eig.append(min(params.min_eigenvalues().values(), default=float("nan")))
        trace.iterations = k + 1
        log.debug("iteration %d loglik %.12g rel %.3g", k + 1, ll, rel)
        if callback is not None:
            callback(k + 1, params, moments)
        if rel < config.rel_tol:
            trace.converged = True
            break
    trace.damping.append(0.0)
    score = score_vector(design, params, moments)
    trace.score_norm = float(np.abs(score).max()) if score.size else 0.0
    if not trace.converged:
        warnings.warn(
            f"EM did not converge in {config.max_iter} iterations (last relative change {trace.rel_change[-1]:.3g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    result = FitResult(design, params, trace, moments)
    if config.check_hessian:
        from ..infer import observed_information

        info = observed_information(result, config)
        if not info.is_pd:
            warnings.warn("observed information at the final estimate is not positive definite", ConvergenceWarning, stacklevel=2)
    return result
