"""M-steps of the EM algorithm.

Every update maximizes the conditional expectation Q(Psi; Psi_k) of the
complete-data log-likelihood over one parameter block, holding the E-step
moments of Psi_k fixed.  The functions below also expose the pieces of the
Q-gradient that the score vector reuses.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import sparse

from ..design import ModelDesign, r_pair_values
from ..errors import BoundaryWarning, IdentifiabilityError, MStepError, PDViolationError, RankError
from .estep import PosteriorMoments, s_times
from .params import EMConfig, ParamState

_EPS = np.finfo(float).eps


# ---------------------------------------------------------------------------
# expected residual moments
# ---------------------------------------------------------------------------


def expected_residual_pairs(design: ModelDesign, moments: PosteriorMoments, beta, coef=None) -> np.ndarray:
    """E[eps_r1 eps_r2 | y] on ``design.obs_pairs`` for eps = y - X beta - S* eta.

    Equals e1 e2 - e1 u2 - u1 e2 + s_r1' (v~ + eta~ eta~') s_r2 with
    e = y - X beta and u = S* eta~.  ``coef`` gives the S* values (defaults to
    the moments' own).
    """
    if coef is None:
        coef = moments.assembly.coef
    r1, r2, _, _ = design.obs_pairs
    e = design.data.y - design.X @ np.asarray(beta, dtype=float)
    u = s_times(design, coef, moments.eta) if design.q else np.zeros_like(e)
    out = e[r1] * e[r2] - e[r1] * u[r2] - u[r1] * e[r2]
    if design.q:
        k1, k2, op = design.nz_pairs
        out += np.bincount(op, weights=coef[k1] * coef[k2] * moments.omega_nz, minlength=len(r1))
    return out


def pattern_moments(design: ModelDesign, pair_values: np.ndarray) -> np.ndarray:
    """W_p = sum over pattern-p students of their expected residual cross-products.

    Returned embedded in T x T (zeros outside the pattern's years), shape (P, T, T).
    """
    T = design.T
    _, _, stu, _ = design.obs_pairs
    y1, y2 = design.obs_pair_years
    P = len(design.patterns)
    key = (design.pattern_of_student[stu] * T + (y1 - 1)) * T + (y2 - 1)
    return np.bincount(key, weights=pair_values, minlength=P * T * T).reshape(P, T, T)


# ---------------------------------------------------------------------------
# beta
# ---------------------------------------------------------------------------


def _rinv_matrix(design: ModelDesign, rinv: np.ndarray) -> sparse.csr_matrix:
    r1, r2, _, _ = design.obs_pairs
    return sparse.csr_matrix((rinv, (r1, r2)), shape=(design.n_obs, design.n_obs))


def m_step_beta(design: ModelDesign, moments: PosteriorMoments, params: ParamState | None = None) -> np.ndarray:
    """GLS of the EBLUP-adjusted response: (X'R^-1X)^-1 X'R^-1 (y - S* eta~).

    R and S* are those of ``params`` (default: the moments' parameters).
    """
    if params is None:
        asm = moments.assembly
    else:
        from .estep import assemble

        asm = assemble(design, params)
    X = design.X
    RX = _rinv_matrix(design, asm.rinv) @ X
    A = X.T @ RX
    u = s_times(design, asm.coef, moments.eta) if design.q else 0.0
    rhs = RX.T @ (design.data.y - u)
    w = np.linalg.eigvalsh(A) if A.size else np.array([1.0])
    if w.min() <= 1e-12 * max(w.max(), 1e-300):
        raise RankError("X'R^-1X is singular; fixed-effect columns are collinear")
    return np.linalg.solve(A, rhs)


# ---------------------------------------------------------------------------
# G blocks
# ---------------------------------------------------------------------------


def _floor_pd(mat: np.ndarray, floor: float, what: str) -> np.ndarray:
    w, U = np.linalg.eigh(mat)
    if w.min() < floor:
        warnings.warn(f"{what} reached the boundary; eigenvalues floored at {floor:g}", BoundaryWarning, stacklevel=3)
        mat = (U * np.maximum(w, floor)) @ U.T
    return (mat + mat.T) / 2


def gamma_sums(design: ModelDesign, moments: PosteriorMoments) -> dict[int, np.ndarray]:
    """sum_j (v~ + eta~ eta~') over the diagonal blocks of each G block, by grade."""
    out = {}
    for bi, b in enumerate(design.g_blocks):
        tri = moments.omega_blocks(bi).sum(axis=0)
        mat = np.zeros((b.size, b.size))
        ia, ib = np.tril_indices(b.size)
        mat[ia, ib] = tri
        mat[ib, ia] = tri
        out[b.grade] = mat
    return out


def m_step_gamma(design: ModelDesign, moments: PosteriorMoments, floor: float = 1e-10) -> list[np.ndarray]:
    """Gamma_g = average of the m_g teacher blocks of v~ + eta~ eta~'."""
    sums = gamma_sums(design, moments)
    return [_floor_pd(sums[b.grade] / b.multiplicity, floor, f"Gamma{b.grade}") for b in design.teacher_blocks]


def m_step_gamma_stu(design: ModelDesign, moments: PosteriorMoments, floor: float = 1e-10) -> float:
    """GP.G student variance: mean of the student-intercept diagonal of v~ + eta~ eta~'."""
    b = design.student_block
    if b is None:
        raise ValueError("design has no student-intercept block")
    value = float(gamma_sums(design, moments)[0][0, 0] / b.multiplicity)
    if value < floor:
        warnings.warn(f"Gamma_stu reached the boundary; floored at {floor:g}", BoundaryWarning, stacklevel=2)
        value = floor
    return value


# ---------------------------------------------------------------------------
# R: GP.G yearly variances
# ---------------------------------------------------------------------------


def year_residual_sums(design: ModelDesign, moments: PosteriorMoments, beta, coef=None) -> np.ndarray:
    """sum over year-g observations of E[eps_r^2 | y], for g = 1..T."""
    r1, r2, _, _ = design.obs_pairs
    diag = r1 == r2
    q = expected_residual_pairs(design, moments, beta, coef)[diag]
    years = design.data.obs_year[r1[diag]]
    return np.bincount(years - 1, weights=q, minlength=design.T)


def m_step_sigma_years(design: ModelDesign, moments: PosteriorMoments, beta, floor: float = 1e-10) -> np.ndarray:
    """sigma2_g = mean over year-g observations of E[eps_r^2 | y]."""
    sums = year_residual_sums(design, moments, beta)
    ng = np.asarray(design.data.n_g, dtype=float)
    out = sums / ng
    if np.any(out < floor):
        warnings.warn(f"a yearly residual variance reached the boundary; floored at {floor:g}", BoundaryWarning, stacklevel=2)
        out = np.maximum(out, floor)
    return out


# ---------------------------------------------------------------------------
# R: unstructured sigma grid
# ---------------------------------------------------------------------------


class SigmaProblem:
    """Q_R(sigma) = -1/2 sum_p [n_p log|R_p| + tr(R_p^-1 W_p)] over the free sigma_kl.

    ``W`` comes from :func:`pattern_moments`.  Free coordinates are
    ``design.sigma_pairs`` (1-based (k, l), k >= l).
    """

    def __init__(self, design: ModelDesign, W: np.ndarray):
        self.design = design
        self.W = W
        self.n_p = design.pattern_counts.astype(float)
        self.idx_sets = design.pattern_index_sets()
        pairs = np.array(design.sigma_pairs, dtype=np.int64).reshape(-1, 2) - 1
        self.a, self.b = pairs[:, 0], pairs[:, 1]
        self.s = np.where(self.a == self.b, 0.5, 1.0)

    def theta(self, sigma: np.ndarray) -> np.ndarray:
        return sigma[self.a, self.b].copy()

    def grid(self, theta: np.ndarray, template: np.ndarray) -> np.ndarray:
        out = np.array(template, dtype=float)
        out[self.a, self.b] = theta
        out[self.b, self.a] = theta
        return out

    def inverses(self, sigma: np.ndarray):
        """(A embedded (P, T, T), log|R_p| per pattern) or None when some block is not PD."""
        T = self.design.T
        A = np.zeros((len(self.idx_sets), T, T))
        logdets = np.empty(len(self.idx_sets))
        for k, idx in enumerate(self.idx_sets):
            try:
                L = np.linalg.cholesky(sigma[np.ix_(idx, idx)])
            except np.linalg.LinAlgError:
                return None
            Linv = np.linalg.inv(L)
            A[k][np.ix_(idx, idx)] = Linv.T @ Linv
            logdets[k] = 2.0 * np.log(np.diag(L)).sum()
        return A, logdets

    def value(self, A, logdets) -> float:
        return float(-0.5 * (self.n_p @ logdets + np.einsum("pij,pji->", A, self.W)))

    def value_slack(self, A, logdets) -> float:
        """Rounding error in :meth:`value`; Q is a small difference of large terms near the optimum."""
        return 64 * _EPS * float(self.n_p @ np.abs(logdets) + np.abs(np.einsum("pij,pji->p", A, self.W)).sum())

    def gradient(self, A) -> tuple[np.ndarray, np.ndarray]:
        """(gradient over free sigma_kl, A W A per pattern)."""
        B = A @ self.W @ A
        D = np.einsum("p,pij->ij", self.n_p, A) - B.sum(axis=0)
        return -self.s * D[self.a, self.b], B

    def hessian(self, A, B) -> np.ndarray:
        a, b = self.a[:, None], self.b[:, None]
        c, d = self.a[None, :], self.b[None, :]
        ss = self.s[:, None] * self.s[None, :]
        n = self.n_p[:, None, None]
        h1 = (n * (A[:, b, c] * A[:, a, d] + A[:, b, d] * A[:, a, c])).sum(axis=0)
        h2 = (
            A[:, b, c] * B[:, d, a] + A[:, b, d] * B[:, c, a] + A[:, a, c] * B[:, d, b] + A[:, a, d] * B[:, c, b]
            + A[:, d, a] * B[:, b, c] + A[:, d, b] * B[:, a, c] + A[:, c, a] * B[:, b, d] + A[:, c, b] * B[:, a, d]
        ).sum(axis=0)
        H = ss * (h1 - 0.5 * h2)
        return (H + H.T) / 2

    def roundoff_tol(self, A, B) -> float:
        """Size of the rounding error in a gradient entry, from the magnitude of its summands."""
        scale = float(self.n_p @ np.abs(A).max(axis=(1, 2)) + np.abs(B).max(axis=(1, 2)).sum())
        return 64 * _EPS * scale


def sigma_gradient(design: ModelDesign, moments: PosteriorMoments, beta, sigma, coef=None) -> np.ndarray:
    """Q-gradient over the free sigma_kl at ``sigma``."""
    W = pattern_moments(design, expected_residual_pairs(design, moments, beta, coef))
    prob = SigmaProblem(design, W)
    inv = prob.inverses(np.asarray(sigma, dtype=float))
    if inv is None:
        raise PDViolationError("sigma grid has a non-PD pattern block")
    return prob.gradient(inv[0])[0]


def m_step_r(
    design: ModelDesign,
    moments: PosteriorMoments,
    beta,
    config: EMConfig | None = None,
    outer_iter: int | None = None,
    info: dict | None = None,
) -> np.ndarray:
    """Maximize Q over the sigma grid by damped Newton-Raphson on the joint score.

    During the first ``config.nr_damp_iters`` outer iterations the Hessian
    is replaced by H - lambda I with lambda shrinking geometrically in both
    the outer and the inner iteration count.  Steps are halved until every
    pattern block stays PD and Q does not decrease beyond its rounding
    error.  With a single missingness pattern the maximizer is available in
    closed form.
    ``info``, when given, receives the damping used and the inner iteration
    count.
    """
    config = config or EMConfig()
    W = pattern_moments(design, expected_residual_pairs(design, moments, beta))
    prob = SigmaProblem(design, W)
    sigma = np.array(moments.params.sigma, dtype=float)
    theta = prob.theta(sigma)
    inv = prob.inverses(sigma)
    if inv is None:
        raise PDViolationError("current sigma grid has a non-PD pattern block")
    if len(design.patterns) == 1:
        # one pattern: the maximizer is the blockwise average of its cross-products
        years = design.pattern_index_sets()[0]
        out = sigma.copy()
        out[np.ix_(years, years)] = W[0][np.ix_(years, years)] / design.data.pattern_counts[design.patterns[0]]
        if info is not None:
            info.update(damping=0.0, inner_iterations=0, score_norm=0.0)
        if np.linalg.eigvalsh(out[np.ix_(years, years)]).min() <= 0:
            raise PDViolationError("expected residual cross-products are not PD")
        return out
    A, ld = inv
    q_cur = prob.value(A, ld)
    damp_on = outer_iter is not None and outer_iter < config.nr_damp_iters
    lam_used = 0.0
    gnorm = np.inf
    for it in range(config.nr_max_inner + 1):
        g, B = prob.gradient(A)
        gnorm = float(np.abs(g).max()) if g.size else 0.0
        if gnorm <= max(config.nr_inner_tol, prob.roundoff_tol(A, B)):
            if info is not None:
                info.update(damping=lam_used, inner_iterations=it, score_norm=gnorm)
            return prob.grid(theta, sigma)
        if it == config.nr_max_inner:
            break
        H = prob.hessian(A, B)
        scale = float(np.abs(np.diag(H)).mean())
        lam = config.nr_damp_initial * scale * config.nr_damp_decay ** (outer_iter + it) if damp_on else 0.0
        w_max = np.linalg.eigvalsh(H).max()
        if w_max + (-lam) >= -1e-12 * scale:
            lam = w_max + 1e-6 * scale  # restore negative definiteness
        lam_used = max(lam_used, lam)
        step = np.linalg.solve(-(H - lam * np.eye(len(theta))), g)
        t = 1.0
        for _ in range(60):
            cand = theta + t * step
            cgrid = prob.grid(cand, sigma)
            inv = prob.inverses(cgrid)
            if inv is not None:
                q_new = prob.value(*inv)
                if q_new >= q_cur - prob.value_slack(*inv):
                    break
            t *= 0.5
        else:
            raise MStepError("sigma Newton step could not find an ascent point", prob.grid(theta, sigma), gnorm)
        theta = cand
        A, ld = inv
        q_cur = q_new
    raise MStepError(
        f"sigma Newton solve did not converge in {config.nr_max_inner} iterations (score norm {gnorm:.3g})",
        prob.grid(theta, sigma),
        gnorm,
    )


# ---------------------------------------------------------------------------
# persistence parameters
# ---------------------------------------------------------------------------


def alpha_system(design: ModelDesign, moments: PosteriorMoments, beta, rinv: np.ndarray):
    """(h, J) with Q-gradient S(alpha)_a = h_a - sum_b coef_b J[a, b].

    Label 0 is the unit-coefficient part of S*; labels 1.. are alpha_pairs.
    """
    L = len(design.alpha_pairs) + 1
    e = design.data.y - design.X @ np.asarray(beta, dtype=float)
    r1, r2, _, _ = design.obs_pairs
    re = np.bincount(r1, weights=rinv * e[r2], minlength=design.n_obs)
    lab = design.nz_label
    h = np.bincount(lab, weights=re[design.nz_row] * moments.eta[design.nz_col], minlength=L)
    k1, k2, op = design.nz_pairs
    J = np.bincount(lab[k1] * L + lab[k2], weights=rinv[op] * moments.omega_nz, minlength=L * L).reshape(L, L)
    return h, (J + J.T) / 2


def _rinv_for(design: ModelDesign, params: ParamState) -> np.ndarray:
    if params.sigma2 is not None:
        return r_pair_values(design, sigma2=params.sigma2)[1]
    return r_pair_values(design, sigma=params.sigma)[1]


def alpha_gradient(design: ModelDesign, moments: PosteriorMoments, params: ParamState) -> np.ndarray:
    h, J = alpha_system(design, moments, params.beta, _rinv_for(design, params))
    full = np.concatenate([[1.0], params.alpha])
    return (h - J @ full)[1:]


def m_step_alpha(design: ModelDesign, moments: PosteriorMoments, beta, sigma=None) -> np.ndarray:
    """Solve the linear score equations in alpha (a single Newton step is exact).

    ``sigma`` is the residual grid to use (default: the moments' grid).
    """
    if not design.alpha_pairs:
        raise ValueError("design has no persistence parameters")
    if not design.alpha_free:
        return np.full(len(design.alpha_pairs), float(design.fixed_alpha))
    if sigma is None:
        sigma = moments.params.sigma
    rinv = r_pair_values(design, sigma=sigma)[1]
    h, J = alpha_system(design, moments, beta, rinv)
    Jaa = J[1:, 1:]
    try:
        L = np.linalg.cholesky(Jaa)
    except np.linalg.LinAlgError:
        raise IdentifiabilityError("persistence parameters are not identified (singular alpha system)") from None
    if np.diag(L).min() ** 2 <= 1e-12 * np.abs(np.diag(Jaa)).max():
        raise IdentifiabilityError("persistence parameters are not identified (near-singular alpha system)")
    rhs = h[1:] - J[1:, 0]
    return np.linalg.solve(Jaa, rhs)
