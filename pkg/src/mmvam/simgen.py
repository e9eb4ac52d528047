"""Synthetic longitudinal multiple-membership data and dense brute-force oracles.

:func:`simulate_dataset` draws data from any of the five model variants with a
chosen teacher-assignment rule and MAR score deletion.  The dense oracles
evaluate the likelihood with an explicit V = S G S' + R and are meant only for
tiny instances.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, sparse

from .design import ModelDesign, ModelVariant, assemble_G, assemble_R_inverse, build_design
from .emcore.params import ParamLayout, ParamState
from .errors import OracleCapError, ValidationError
from .ingest import LongitudinalDataset, ObservationRecord, Schema, build_dataset, write_records

ORACLE_CAP = 500
MIXING_RULES = ("random", "school", "cohort")


def default_truth(variant, T: int) -> ParamState:
    """A well-conditioned parameter point for simulations.

    Yearly means rise by 0.6 per year, teacher effects have variance 0.05 with
    correlation 0.5 between current and future effects, and residuals have
    variance 0.5 with correlation 0.6^|k-l| across years.
    """
    variant = ModelVariant.parse(variant)
    beta = 3.4 + 0.6 * np.arange(T)
    if variant.persistence:
        sizes = [1] * T
    elif variant is ModelVariant.RGP_R:
        sizes = [min(2, T - g + 1) for g in range(1, T + 1)]
    else:
        sizes = [T - g + 1 for g in range(1, T + 1)]
    gammas = []
    for k in sizes:
        idx = np.arange(k)
        gammas.append(0.05 * np.where(idx[:, None] == idx[None, :], 1.0, 0.5))
    truth = ParamState(beta=beta, gammas=gammas)
    if variant is ModelVariant.GP_G:
        truth.sigma2 = np.full(T, 0.3)
        truth.gamma_stu = 0.25
    else:
        lag = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
        truth.sigma = 0.5 * 0.6**lag
    if variant is ModelVariant.VP:
        truth.alpha = np.full(T * (T - 1) // 2, 0.5)
    elif variant is ModelVariant.CP:
        truth.alpha = np.ones(T * (T - 1) // 2)
    return truth


def _random_pd(rng: np.random.Generator, k: int, scale: float) -> np.ndarray:
    A = rng.standard_normal((k, k))
    return scale * (A @ A.T / k + 0.5 * np.eye(k))


def random_params(design: ModelDesign, rng: np.random.Generator, scale: float = 1.0) -> ParamState:
    """A random point inside the parameter space of ``design`` (for oracle checks)."""
    T = design.T
    params = ParamState(
        beta=rng.normal(0.0, 1.0, design.p),
        gammas=[_random_pd(rng, b.size, 0.3 * scale) for b in design.teacher_blocks],
    )
    if design.variant is ModelVariant.GP_G:
        params.sigma2 = scale * rng.uniform(0.3, 1.5, T)
        params.gamma_stu = float(scale * rng.uniform(0.2, 1.0))
    else:
        params.sigma = _random_pd(rng, T, scale)
    if design.alpha_pairs:
        params.alpha = (
            rng.uniform(0.1, 1.2, len(design.alpha_pairs))
            if design.alpha_free
            else np.full(len(design.alpha_pairs), float(design.fixed_alpha))
        )
    return params


@dataclass
class SimSpec:
    """Simulation settings.

    ``m`` is the number of teachers per year (an int applies to every year).
    Mixing rules: ``random`` draws a uniform teacher each year; ``school``
    splits teachers among ``n_schools`` schools, keeps each student in a
    school except for moves with probability ``move_prob`` per year, and
    draws a uniform teacher within the school; ``cohort`` keeps classes
    intact across years, which leaves persistence parameters unidentified.
    ``missing_rate`` deletes each (student, year) score independently; the
    teacher link stays.
    """

    n: int = 300
    T: int = 3
    m: int | tuple[int, ...] = 10
    variant: str = "gp.r"
    truth: ParamState | None = None
    missing_rate: float = 0.0
    seed: int = 0
    mixing: str = "random"
    n_schools: int = 1
    move_prob: float = 0.05

    def teachers(self) -> tuple[int, ...]:
        m = (self.m,) * self.T if np.isscalar(self.m) else tuple(int(x) for x in self.m)
        if len(m) != self.T:
            raise ValidationError(f"m must have T={self.T} entries")
        return m

    def validate(self):
        if self.n < 1 or self.T < 1:
            raise ValidationError("n and T must be >= 1")
        if not 0 <= self.missing_rate < 1:
            raise ValidationError("missing_rate must be in [0, 1)")
        if self.mixing not in MIXING_RULES:
            raise ValidationError(f"mixing must be one of {MIXING_RULES}")
        m = self.teachers()
        if min(m) < 1:
            raise ValidationError("every year needs at least one teacher")
        if self.mixing == "school" and min(m) < self.n_schools:
            raise ValidationError("every school needs at least one teacher per year")
        if self.mixing == "cohort" and len(set(m)) != 1:
            raise ValidationError("cohort mixing needs the same number of teachers every year")
        ModelVariant.parse(self.variant)


@dataclass
class SimTruth:
    """Generating parameters, the drawn random effects and the complete-data S* used."""

    variant: ModelVariant
    params: ParamState
    eta: np.ndarray
    S: sparse.csr_matrix = field(repr=False)
    spec: SimSpec = field(repr=False)

    def to_dict(self) -> dict:
        return {"model": self.variant.value, "seed": self.spec.seed, "params": self.params.to_dict()}


def _assign(spec: SimSpec, rng: np.random.Generator) -> np.ndarray:
    """Teacher index (0-based within year) for every student and year, shape (n, T)."""
    m = spec.teachers()
    n, T = spec.n, spec.T
    out = np.empty((n, T), dtype=np.int64)
    if spec.mixing == "random":
        for g in range(T):
            out[:, g] = rng.integers(0, m[g], size=n)
    elif spec.mixing == "cohort":
        out[:] = (np.arange(n) % m[0])[:, None]
    else:
        school = rng.integers(0, spec.n_schools, size=n)
        for g in range(T):
            if g:
                move = rng.random(n) < spec.move_prob
                school = np.where(move, rng.integers(0, spec.n_schools, size=n), school)
            bounds = np.linspace(0, m[g], spec.n_schools + 1).astype(np.int64)
            lo, hi = bounds[school], bounds[school + 1]
            out[:, g] = lo + np.floor(rng.random(n) * (hi - lo)).astype(np.int64)
    return out


def simulate_dataset(spec: SimSpec) -> tuple[LongitudinalDataset, SimTruth]:
    """Draw one dataset from the generative model of ``spec.variant``."""
    spec.validate()
    if spec.mixing == "cohort":
        warnings.warn("cohort-preserving assignment: persistence parameters are not identified", UserWarning, stacklevel=2)
    variant = ModelVariant.parse(spec.variant)
    truth = (spec.truth or default_truth(variant, spec.T)).copy()
    rng = np.random.default_rng(spec.seed)
    T, n = spec.T, spec.n
    assign = _assign(spec, rng)
    width = len(str(n))
    sid = [f"s{i:0{width}d}" for i in range(n)]
    m = spec.teachers()
    tw = len(str(max(m)))
    tid = [[f"t{g + 1}_{j:0{tw}d}" for j in range(m[g])] for g in range(T)]

    # complete data first, to fix S and draw y
    records = [
        ObservationRecord(sid[i], g + 1, tid[g][assign[i, g]], 0.0) for i in range(n) for g in range(T)
    ]
    complete = build_dataset(records, T=T)
    design = build_design(complete, variant)
    alpha = truth.alpha if design.alpha_pairs else None
    G, _, _ = assemble_G(design, truth.gammas, truth.gamma_stu)
    eta = np.zeros(design.q)
    for b in design.g_blocks:
        cov = np.array([[truth.gamma_stu]]) if b.grade == 0 else np.atleast_2d(truth.gammas[b.grade - 1])
        L = np.linalg.cholesky(cov)
        draws = rng.standard_normal((b.multiplicity, b.size)) @ L.T
        eta[b.offset : b.offset + b.ncols] = draws.ravel()
    if variant is ModelVariant.GP_G:
        eps = rng.standard_normal((n, T)) * np.sqrt(truth.sigma2)
    else:
        eps = rng.standard_normal((n, T)) @ np.linalg.cholesky(truth.sigma).T
    S = design.S(alpha)
    y = design.X @ truth.beta + S @ eta + eps.ravel()  # complete data is student-major, year-minor

    keep = rng.random(n * T) >= spec.missing_rate
    out = [
        ObservationRecord(r.student, r.year, r.teacher, float(y[k]) if keep[k] else None)
        for k, r in enumerate(complete.records)
    ]
    data = build_dataset(out, T=T)
    return data, SimTruth(variant, truth, eta, S, spec)


def write_simulation(data: LongitudinalDataset, truth: SimTruth, outdir) -> tuple[Path, Path]:
    """Write ``data.csv`` (ingest format) and ``truth.json`` into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    data_path, truth_path = outdir / "data.csv", outdir / "truth.json"
    with open(data_path, "w", newline="") as fh:
        write_records(data.records, fh, Schema())
    with open(truth_path, "w") as fh:
        json.dump(truth.to_dict(), fh, indent=2)
        fh.write("\n")
    return data_path, truth_path


# ---------------------------------------------------------------------------
# dense oracles
# ---------------------------------------------------------------------------


def _check_cap(design: ModelDesign, cap: int):
    if design.n_obs > cap:
        raise OracleCapError(f"dense oracle refuses n_obs={design.n_obs} > cap {cap}")


def dense_V(design: ModelDesign, params: ParamState) -> np.ndarray:
    S = design.S(params.alpha if design.alpha_pairs else None).toarray()
    G, _, _ = assemble_G(design, params.gammas, params.gamma_stu)
    if design.variant is ModelVariant.GP_G:
        R, _, _ = assemble_R_inverse(design, sigma2=params.sigma2)
    else:
        R, _, _ = assemble_R_inverse(design, sigma=params.sigma)
    return S @ G.toarray() @ S.T + R.toarray()


def dense_oracle_loglik(
    dataset: LongitudinalDataset, design: ModelDesign, params: ParamState, cap: int = ORACLE_CAP
) -> float:
    """-1/2 log|V| - 1/2 r'V^-1 r with V built explicitly and factorized densely."""
    if design.data is not dataset:
        raise ValueError("design was not built from this dataset")
    _check_cap(design, cap)
    V = dense_V(design, params)
    r = dataset.y - design.X @ params.beta
    c, low = linalg.cho_factor(V, lower=True)
    logdet = 2.0 * np.log(np.diag(c)).sum()
    return float(-0.5 * logdet - 0.5 * r @ linalg.cho_solve((c, low), r))


def dense_eblup(design: ModelDesign, params: ParamState) -> np.ndarray:
    """eta~ = G S*' V^-1 (y - X beta), the textbook form."""
    _check_cap(design, ORACLE_CAP)
    S = design.S(params.alpha if design.alpha_pairs else None).toarray()
    G, _, _ = assemble_G(design, params.gammas, params.gamma_stu)
    V = dense_V(design, params)
    r = design.data.y - design.X @ params.beta
    return G.toarray() @ S.T @ np.linalg.solve(V, r)


def numeric_score(
    dataset: LongitudinalDataset,
    design: ModelDesign,
    params: ParamState,
    step: float = 1e-5,
    cap: int = ORACLE_CAP,
) -> np.ndarray:
    """Central-difference gradient of :func:`dense_oracle_loglik` over the free parameters.

    Coordinate j moves by ``step * max(|psi_j|, 0.1)``; each difference is
    Richardson-extrapolated from steps h and h/2.
    """
    _check_cap(design, cap)
    layout = ParamLayout(design)
    x0 = layout.pack(params)
    out = np.empty(len(x0))

    def f(x):
        return dense_oracle_loglik(dataset, design, layout.unpack(x, params), cap)

    for j in range(len(x0)):
        h = step * max(abs(x0[j]), 0.1)
        d = []
        for hh in (h, h / 2):
            e = np.zeros_like(x0)
            e[j] = hh
            d.append((f(x0 + e) - f(x0 - e)) / (2 * hh))
        out[j] = (4 * d[1] - d[0]) / 3
    return out


def numeric_hessian(
    dataset: LongitudinalDataset, design: ModelDesign, params: ParamState, step: float = 1e-4, cap: int = ORACLE_CAP
) -> np.ndarray:
    """Central-difference Hessian of the dense log-likelihood over the free parameters."""
    _check_cap(design, cap)
    layout = ParamLayout(design)
    x0 = layout.pack(params)
    k = len(x0)
    h = step * np.maximum(np.abs(x0), 0.1)

    def f(x):
        return dense_oracle_loglik(dataset, design, layout.unpack(x, params), cap)

    H = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h[i]
            ej[j] = h[j]
            val = (f(x0 + ei + ej) - f(x0 + ei - ej) - f(x0 - ei + ej) + f(x0 - ei - ej)) / (4 * h[i] * h[j])
            H[i, j] = H[j, i] = val
    return H
