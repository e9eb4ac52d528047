"""E-step: the normal matrix M = S*' R^-1 S* + G^-1, its factor, and the
posterior moments of eta together with the observed-data log-likelihood.

M is assembled directly into its fixed lower-triangle pattern from the
per-pair index maps of the design, so every iteration reuses one symbolic
Cholesky analysis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..design import ModelDesign, ModelVariant, _block_values, r_pair_values
from ..errors import EStepError, FactorizationError
from ..sparsekit import CholFactor, SymSparse, factorize, inverse_on_pattern, selected_inverse, solve
from .params import ParamState, check_params


@dataclass(eq=False)
class Assembly:
    """Covariance pieces at one parameter point."""

    coef: np.ndarray  # values of the S* nonzeros
    rinv: np.ndarray  # R^-1 on design.obs_pairs
    logdet_R: float
    ginv_blocks: list[np.ndarray]
    logdet_G: float


def assemble(design: ModelDesign, params: ParamState) -> Assembly:
    check_params(design, params)
    if design.variant is ModelVariant.GP_G:
        _, rinv, ldr = r_pair_values(design, sigma2=params.sigma2)
    else:
        _, rinv, ldr = r_pair_values(design, sigma=params.sigma)
    parts = _block_values(design, params.gammas, params.gamma_stu)
    ldg = sum(b.multiplicity * ld for b, (_, _, ld) in zip(design.g_blocks, parts))
    return Assembly(
        coef=design.coefficients(params.alpha),
        rinv=rinv,
        logdet_R=ldr,
        ginv_blocks=[ci for _, ci, _ in parts],
        logdet_G=float(ldg),
    )


def normal_matrix(design: ModelDesign, asm: Assembly) -> SymSparse:
    """M in the design's fixed lower-triangle pattern."""
    pat = design.m_pattern
    k1, k2, op = design.nz_pairs
    sel = pat["nz_lower"]
    nnz = len(pat["indices"])
    w = asm.coef[k1[sel]] * asm.coef[k2[sel]] * asm.rinv[op[sel]]
    data = np.bincount(pat["nz_pos"][sel], weights=w, minlength=nnz)
    for b, pos, ginv in zip(design.g_blocks, pat["block_pos"], asm.ginv_blocks):
        vals = ginv[np.tril_indices(b.size)]
        data += np.bincount(pos.ravel(), weights=np.tile(vals, b.multiplicity), minlength=nnz)
    return SymSparse(design.q, pat["indptr"], pat["indices"], data)


def rinv_times(design: ModelDesign, rinv: np.ndarray, v: np.ndarray) -> np.ndarray:
    """R^-1 v for a vector over observations."""
    r1, r2, _, _ = design.obs_pairs
    return np.bincount(r1, weights=rinv * v[r2], minlength=design.n_obs)


def st_times(design: ModelDesign, coef: np.ndarray, v: np.ndarray) -> np.ndarray:
    """S*' v."""
    return np.bincount(design.nz_col, weights=coef * v[design.nz_row], minlength=design.q)


def s_times(design: ModelDesign, coef: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """S* eta."""
    return np.bincount(design.nz_row, weights=coef * eta[design.nz_col], minlength=design.n_obs)


@dataclass(eq=False)
class PosteriorMoments:
    """eta~ = E[eta | y], access to v~ = var[eta | y], and the log-likelihood at ``params``."""

    design: ModelDesign
    params: ParamState
    assembly: Assembly
    factor: CholFactor
    eta: np.ndarray
    loglik: float

    @property
    def eta_tilde(self) -> np.ndarray:
        return self.eta

    @cached_property
    def v_pattern(self) -> np.ndarray:
        """v~ at every stored entry of the lower-triangle pattern of M."""
        if self.design.q == 0:
            return np.zeros(0)
        return inverse_on_pattern(self.factor)

    def v_blocks(self, requests, method: str = "auto") -> list[np.ndarray]:
        return selected_inverse(self.factor, requests, method=method)

    def v_diag(self) -> np.ndarray:
        return self.v_pattern[self.design.m_pattern["diag_pos"]]

    def v_dense(self) -> np.ndarray:
        return self.v_blocks([np.arange(self.design.q)], method="dense")[0]

    @cached_property
    def omega_nz(self) -> np.ndarray:
        """(v~ + eta~ eta~')(col k1, col k2) for every nz pair of the design."""
        k1, k2, _ = self.design.nz_pairs
        c1, c2 = self.design.nz_col[k1], self.design.nz_col[k2]
        return self.v_pattern[self.design.m_pattern["nz_pos"]] + self.eta[c1] * self.eta[c2]

    def omega_blocks(self, block_index: int) -> np.ndarray:
        """Lower-triangle entries of v~ + eta~ eta~' for every copy of a G block.

        Shape (multiplicity, ntri), entries in ``np.tril_indices`` order.
        """
        b = self.design.g_blocks[block_index]
        pos = self.design.m_pattern["block_pos"][block_index]
        ia, ib = np.tril_indices(b.size)
        base = b.offset + b.size * np.arange(b.multiplicity)
        return self.v_pattern[pos] + self.eta[base[:, None] + ia] * self.eta[base[:, None] + ib]


def e_step(design: ModelDesign, params: ParamState) -> PosteriorMoments:
    """Posterior moments of eta and the log-likelihood at ``params``.

    Raises EStepError when M cannot be factorized; PD violations of G or R
    propagate as PDViolationError.
    """
    asm = assemble(design, params)
    r = design.data.y - design.X @ params.beta
    rinv_r = rinv_times(design, asm.rinv, r)
    quad = float(r @ rinv_r)
    if design.q:
        M = normal_matrix(design, asm)
        try:
            factor = factorize(M, design.symbolic)
        except FactorizationError as exc:
            raise EStepError(f"normal matrix is not positive definite: {exc}") from exc
        b = st_times(design, asm.coef, rinv_r)
        eta = solve(factor, b)
        quad -= float(b @ eta)
        logdet_M = factor.logdet
    else:
        factor, eta, logdet_M = None, np.zeros(0), 0.0
    ll = -0.5 * (asm.logdet_R + asm.logdet_G + logdet_M) - 0.5 * quad
    return PosteriorMoments(design, params, asm, factor, eta, float(ll))


def loglik(design: ModelDesign, params: ParamState) -> float:
    """Observed-data log-likelihood -1/2 log|V| - 1/2 r'V^-1 r (constants dropped)."""
    return e_step(design, params).loglik
