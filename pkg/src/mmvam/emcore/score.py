"""Analytic score vector.

The observed-data score equals the gradient of Q(Psi; Psi_k) at Psi = Psi_k.
:func:`q_gradient` evaluates that gradient at any ``params`` for fixed
moments, which is what the M-step stationarity checks need; the score is the
special case where the moments were computed at ``params``.
"""

from __future__ import annotations

import numpy as np

from ..design import ModelDesign, ModelVariant
from .estep import PosteriorMoments, assemble, e_step, rinv_times, s_times
from .mstep import alpha_gradient, gamma_sums, sigma_gradient, year_residual_sums
from .params import ParamLayout, ParamState


def _sym_block_gradient(m: int, cov: np.ndarray, omega_sum: np.ndarray) -> np.ndarray:
    """Lower-triangle gradient of -m/2 log|C| - 1/2 tr(C^-1 Omega) over the unique entries of C."""
    Ci = np.linalg.inv(cov)
    D = -0.5 * (m * Ci - Ci @ omega_sum @ Ci)
    ia, ib = np.tril_indices(len(cov))
    return np.where(ia == ib, 1.0, 2.0) * D[ia, ib]


def q_gradient(design: ModelDesign, moments: PosteriorMoments, params: ParamState) -> dict[str, np.ndarray]:
    """Gradient of Q(params; moments.params), split by parameter block."""
    asm = assemble(design, params)
    e = design.data.y - design.X @ params.beta
    u = s_times(design, asm.coef, moments.eta) if design.q else np.zeros_like(e)
    out = {"beta": design.X.T @ rinv_times(design, asm.rinv, e - u)}

    sums = gamma_sums(design, moments)
    out["gamma"] = np.concatenate(
        [
            _sym_block_gradient(b.multiplicity, np.atleast_2d(params.gammas[b.grade - 1]), sums[b.grade])
            for b in design.teacher_blocks
        ]
    )
    if design.variant is ModelVariant.GP_G:
        ng = np.asarray(design.data.n_g, dtype=float)
        s2 = np.asarray(params.sigma2, dtype=float)
        qs = year_residual_sums(design, moments, params.beta, asm.coef)
        out["sigma2"] = -0.5 * (ng / s2 - qs / s2**2)
        n = design.student_block.multiplicity
        gs = float(params.gamma_stu)
        out["gamma_stu"] = np.array([-0.5 * (n / gs - sums[0][0, 0] / gs**2)])
    else:
        out["sigma"] = sigma_gradient(design, moments, params.beta, params.sigma, asm.coef)
    if design.alpha_free:
        out["alpha"] = alpha_gradient(design, moments, params)
    return out


_ORDER = ("beta", "gamma", "sigma", "sigma2", "gamma_stu", "alpha")


def score_vector(design: ModelDesign, params: ParamState, moments: PosteriorMoments | None = None) -> np.ndarray:
    """Observed-data score over the free parameters, in :class:`ParamLayout` order.

    Gamma off-diagonal entries carry the factor 2 of the symmetric
    parameterization.  ``moments`` must have been computed at ``params``.
    """
    if moments is None:
        moments = e_step(design, params)
    blocks = q_gradient(design, moments, params)
    vec = np.concatenate([blocks[k] for k in _ORDER if k in blocks])
    assert len(vec) == len(ParamLayout(design))
    return vec
