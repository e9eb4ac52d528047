"""Standard errors and prediction variances.

Parameter standard errors come from the observed information, obtained by
central differences of the analytic score.  EBLUP prediction variances come
from the C22 block of the inverse of the bordered mixed-model equations

    [X'R^-1X   X'R^-1S*    ]
    [S*'R^-1X  S*'R^-1S*+G^-1]

evaluated with the Schur complement against the factorized M, so the full
bordered inverse is never formed.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .design import ModelDesign
from .emcore import EMConfig, FitResult, ParamLayout, ParamState, e_step, score_vector
from .emcore.mstep import _rinv_matrix
from .errors import ConvergenceWarning, EStepError, PDViolationError, RankError
from .sparsekit import solve


@dataclass(eq=False)
class InformationResult:
    names: list[str]
    estimates: np.ndarray
    observed_information: np.ndarray
    covariance: np.ndarray
    param_se: np.ndarray
    is_pd: bool
    one_sided: tuple[str, ...] = ()

    def block(self, kind_names: list[str]) -> np.ndarray:
        idx = [self.names.index(n) for n in kind_names]
        return self.observed_information[np.ix_(idx, idx)]


def fd_steps(x: np.ndarray, rel: float) -> np.ndarray:
    """h_j = max(rel, rel * |x_j|)."""
    return np.maximum(rel, rel * np.abs(x))


def observed_information(
    fit: FitResult | tuple[ModelDesign, ParamState], config: EMConfig | None = None, step: float | None = None
) -> InformationResult:
    """-dS/dPsi by central differences of the analytic score, symmetrized.

    Coordinates whose backward (or forward) perturbation leaves the
    parameter space fall back to a one-sided difference and are listed in
    ``one_sided``.  A non-PD information matrix triggers a warning and the
    covariance falls back to the pseudo-inverse.
    """
    design, params = (fit.design, fit.params) if isinstance(fit, FitResult) else fit
    config = config or EMConfig()
    layout = ParamLayout(design)
    x0 = layout.pack(params)
    h = fd_steps(x0, config.fd_step if step is None else step)
    k = len(x0)

    def score_at(x):
        p = layout.unpack(x, params)
        try:
            return score_vector(design, p, e_step(design, p))
        except (PDViolationError, EStepError):
            return None

    s0 = None
    H = np.empty((k, k))
    one_sided = []
    for j in range(k):
        e = np.zeros(k)
        e[j] = h[j]
        up, down = score_at(x0 + e), score_at(x0 - e)
        if up is not None and down is not None:
            H[:, j] = -(up - down) / (2 * h[j])
            continue
        if s0 is None:
            s0 = score_vector(design, params)
        one_sided.append(layout.names[j])
        if up is not None:
            H[:, j] = -(up - s0) / h[j]
        elif down is not None:
            H[:, j] = -(s0 - down) / h[j]
        else:
            raise PDViolationError(f"cannot perturb {layout.names[j]} inside the parameter space")
    H = (H + H.T) / 2
    try:
        np.linalg.cholesky(H)
        is_pd = True
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        is_pd = False
        warnings.warn(
            "observed information is not positive definite (saddle point or boundary); using pseudo-inverse",
            ConvergenceWarning,
            stacklevel=2,
        )
        cov = np.linalg.pinv(H)
    d = np.diag(cov)
    se = np.where(d > 0, np.sqrt(np.abs(d)), np.nan)
    return InformationResult(layout.names, x0, H, cov, se, is_pd, tuple(one_sided))


@dataclass(eq=False)
class PredictionVariance:
    c11: np.ndarray
    beta_se: np.ndarray
    c22_diag: np.ndarray
    v_diag: np.ndarray
    eblup_se: np.ndarray


def prediction_variance(fit: FitResult | tuple[ModelDesign, ParamState], moments=None) -> PredictionVariance:
    """diag(C22), C11 and the implied beta and EBLUP standard errors.

    C11 = (X'R^-1X - Z'M^-1Z)^-1 with Z = S*'R^-1X, and
    diag C22 = diag(M^-1) + rowsum((U C11) * U) with U = M^-1 Z.
    """
    if isinstance(fit, FitResult):
        design, moments = fit.design, fit.moments
    else:
        design, params = fit
        moments = moments or e_step(design, params)
    asm = moments.assembly
    X = design.X
    RX = _rinv_matrix(design, asm.rinv) @ X
    A = X.T @ RX
    if design.q:
        S = design.S(moments.params.alpha if design.alpha_pairs else None)
        Z = S.T @ RX
        U = solve(moments.factor, Z).reshape(design.q, -1)
        A = A - Z.T @ U
    w = np.linalg.eigvalsh(A) if A.size else np.array([1.0])
    if w.min() <= 1e-12 * max(w.max(), 1e-300):
        raise RankError("fixed-effect block of the mixed-model equations is singular")
    c11 = np.linalg.inv(A)
    c11 = (c11 + c11.T) / 2
    if design.q:
        vd = moments.v_diag()
        c22 = vd + np.einsum("ij,ij->i", U @ c11, U)
    else:
        vd = c22 = np.zeros(0)
    return PredictionVariance(c11, np.sqrt(np.diag(c11)), c22, vd, np.sqrt(c22))


@dataclass(eq=False)
class InferenceResult:
    """Parameter and EBLUP uncertainty for one fit.

    ``param_se`` takes the beta entries from C11 and every other entry from
    the inverse observed information.  ``beta_se_information`` are the beta
    SEs from the beta block of the observed information alone, which is the
    same quantity as C11 computed a second way.
    """

    information: InformationResult
    prediction: PredictionVariance
    param_se: np.ndarray
    beta_se_information: np.ndarray

    @property
    def observed_information(self) -> np.ndarray:
        return self.information.observed_information

    @property
    def eblup_se(self) -> np.ndarray:
        return self.prediction.eblup_se

    @property
    def c22_diag(self) -> np.ndarray:
        return self.prediction.c22_diag


def infer(fit: FitResult, config: EMConfig | None = None) -> InferenceResult:
    info = observed_information(fit, config)
    pv = prediction_variance(fit)
    p = fit.design.p
    Hbb = info.observed_information[:p, :p]
    beta_se_info = np.sqrt(np.diag(np.linalg.inv(Hbb)))
    se = info.param_se.copy()
    se[:p] = pv.beta_se
    return InferenceResult(info, pv, se, beta_se_info)


def parameter_table(fit: FitResult, result: InferenceResult | None = None) -> list[dict]:
    layout = ParamLayout(fit.design)
    est = layout.pack(fit.params)
    se = result.param_se if result is not None else np.full(len(est), np.nan)
    return [{"parameter": n, "estimate": float(e), "se": float(s)} for n, e, s in zip(layout.names, est, se)]


def eblup_table(fit: FitResult, result: InferenceResult | None = None) -> list[dict]:
    se = result.eblup_se if result is not None else np.full(fit.design.q, np.nan)
    return [
        {
            "effect_id": ef.unit,
            "kind": ef.kind,
            "grade": ef.grade,
            "effect_year": ef.effect_year,
            "estimate": float(v),
            "se": float(s),
        }
        for ef, v, s in zip(fit.design.effects, fit.moments.eta, se)
    ]


def format_table(rows: list[dict], delimiter: str = ",") -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), delimiter=delimiter, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
