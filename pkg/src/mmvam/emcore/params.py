"""Parameter state, free-parameter layout, EM configuration and initial values."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..design import ModelDesign, ModelVariant
from ..errors import ConfigError


@dataclass
class ParamState:
    """One point Psi of the parameter space.

    ``gammas[g - 1]`` is the K_g x K_g teacher covariance of grade g.  The
    residual covariance is either the symmetric T x T grid ``sigma`` or, for
    GP.G, the yearly variances ``sigma2`` plus the student variance
    ``gamma_stu``.  ``alpha`` follows ``ModelDesign.alpha_pairs`` order.
    """

    beta: np.ndarray
    gammas: list[np.ndarray]
    sigma: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    gamma_stu: float | None = None
    alpha: np.ndarray | None = None

    def copy(self) -> "ParamState":
        return ParamState(
            beta=np.array(self.beta, dtype=float),
            gammas=[np.array(g, dtype=float) for g in self.gammas],
            sigma=None if self.sigma is None else np.array(self.sigma, dtype=float),
            sigma2=None if self.sigma2 is None else np.array(self.sigma2, dtype=float),
            gamma_stu=None if self.gamma_stu is None else float(self.gamma_stu),
            alpha=None if self.alpha is None else np.array(self.alpha, dtype=float),
        )

    def min_eigenvalues(self) -> dict[str, float]:
        """Smallest eigenvalue of every Gamma block (and Gamma_stu)."""
        out = {f"Gamma{g}": float(np.linalg.eigvalsh(np.atleast_2d(G)).min()) for g, G in enumerate(self.gammas, 1)}
        if self.gamma_stu is not None:
            out["Gamma_stu"] = float(self.gamma_stu)
        return out

    def to_dict(self) -> dict:
        d = {"beta": self.beta.tolist(), "gammas": [np.atleast_2d(g).tolist() for g in self.gammas]}
        if self.sigma is not None:
            d["sigma"] = self.sigma.tolist()
        if self.sigma2 is not None:
            d["sigma2"] = self.sigma2.tolist()
        if self.gamma_stu is not None:
            d["gamma_stu"] = self.gamma_stu
        if self.alpha is not None:
            d["alpha"] = self.alpha.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParamState":
        def arr(key):
            return None if d.get(key) is None else np.asarray(d[key], dtype=float)

        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            gammas=[np.atleast_2d(np.asarray(g, dtype=float)) for g in d["gammas"]],
            sigma=arr("sigma"),
            sigma2=arr("sigma2"),
            gamma_stu=None if d.get("gamma_stu") is None else float(d["gamma_stu"]),
            alpha=arr("alpha"),
        )


@dataclass(frozen=True)
class Coordinate:
    """One free parameter: its block kind, a display name and where it lives."""

    kind: str  # beta, gamma, sigma, sigma2, gamma_stu, alpha
    name: str
    index: tuple[int, ...]


class ParamLayout:
    """Ordering of the free parameters of a design as a flat vector.

    Order: beta, the lower triangles of Gamma_1..Gamma_T (row-major, a >= b),
    then either sigma_kl for every (k, l) some OTS pattern contains or
    sigma2_1..sigma2_T and Gamma_stu, then the free persistence parameters.
    Grid entries no pattern contains do not enter the likelihood and are not
    free parameters.
    """

    def __init__(self, design: ModelDesign):
        self.design = design
        coords = [Coordinate("beta", f"beta[{nm}]", (j,)) for j, nm in enumerate(design.x_names)]
        for b in design.teacher_blocks:
            for a, c in zip(*np.tril_indices(b.size)):
                coords.append(Coordinate("gamma", f"Gamma{b.grade}[{a + 1},{c + 1}]", (b.grade, int(a), int(c))))
        if design.variant is ModelVariant.GP_G:
            coords += [Coordinate("sigma2", f"sigma2[{g}]", (g,)) for g in range(1, design.T + 1)]
            coords.append(Coordinate("gamma_stu", "Gamma_stu", ()))
        else:
            coords += [Coordinate("sigma", f"sigma[{k},{l}]", (k, l)) for k, l in design.sigma_pairs]
        if design.alpha_free:
            coords += [Coordinate("alpha", f"alpha[{g},{t}]", (a,)) for a, (g, t) in enumerate(design.alpha_pairs)]
        self.coords = tuple(coords)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.coords]

    def kinds(self) -> np.ndarray:
        return np.array([c.kind for c in self.coords])

    def pack(self, params: ParamState) -> np.ndarray:
        out = np.empty(len(self.coords))
        for k, c in enumerate(self.coords):
            if c.kind == "beta":
                out[k] = params.beta[c.index[0]]
            elif c.kind == "gamma":
                g, a, b = c.index
                out[k] = np.atleast_2d(params.gammas[g - 1])[a, b]
            elif c.kind == "sigma":
                out[k] = params.sigma[c.index[0] - 1, c.index[1] - 1]
            elif c.kind == "sigma2":
                out[k] = params.sigma2[c.index[0] - 1]
            elif c.kind == "gamma_stu":
                out[k] = params.gamma_stu
            else:
                out[k] = params.alpha[c.index[0]]
        return out

    def unpack(self, vec, template: ParamState) -> ParamState:
        """Parameters with the free coordinates taken from ``vec``.

        Everything not free (fixed alpha, sigma entries outside every pattern)
        comes from ``template``.
        """
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (len(self.coords),):
            raise ValueError(f"expected {len(self.coords)} parameters, got shape {vec.shape}")
        out = template.copy()
        out.gammas = [np.atleast_2d(g).copy() for g in out.gammas]
        for v, c in zip(vec, self.coords):
            if c.kind == "beta":
                out.beta[c.index[0]] = v
            elif c.kind == "gamma":
                g, a, b = c.index
                out.gammas[g - 1][a, b] = out.gammas[g - 1][b, a] = v
            elif c.kind == "sigma":
                k, l = c.index
                out.sigma[k - 1, l - 1] = out.sigma[l - 1, k - 1] = v
            elif c.kind == "sigma2":
                out.sigma2[c.index[0] - 1] = v
            elif c.kind == "gamma_stu":
                out.gamma_stu = float(v)
            else:
                out.alpha[c.index[0]] = v
        return out


@dataclass(frozen=True)
class EMConfig:
    """Stopping rule, damping schedule of the sigma-grid Newton solve and FD step rule.

    The damping added to the sigma Hessian in outer iteration k (0-based) is
    ``nr_damp_initial * mean|diag H| * nr_damp_decay**k`` while
    ``k < nr_damp_iters``.  Finite-difference steps are
    ``max(fd_step, fd_step * |psi_j|)``.
    """

    rel_tol: float = 1e-7
    max_iter: int = 5000
    nr_damp_initial: float = 0.1
    nr_damp_decay: float = 0.5
    nr_damp_iters: int = 5
    nr_inner_tol: float = 1e-10
    nr_max_inner: int = 200
    fd_step: float = 1e-4
    variance_floor: float = 1e-10
    check_hessian: bool = False

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ConfigError("rel_tol must be > 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not 0 < self.nr_damp_decay <= 1:
            raise ConfigError("nr_damp_decay must be in (0, 1]")
        if self.nr_damp_initial < 0 or self.nr_damp_iters < 0:
            raise ConfigError("damping settings must be non-negative")
        if not self.nr_inner_tol > 0 or not self.fd_step > 0:
            raise ConfigError("nr_inner_tol and fd_step must be > 0")


def _nearest_pd(mat: np.ndarray, floor: float) -> np.ndarray:
    w, U = np.linalg.eigh((mat + mat.T) / 2)
    return (U * np.maximum(w, floor)) @ U.T


def initial_params(design: ModelDesign) -> ParamState:
    """Cheap starting values inside the parameter space.

    beta is OLS on X.  The sigma grid is the pairwise-available covariance
    of the OLS residuals by year pair, clipped to PD; GP.G splits each
    year's residual variance evenly between sigma2_g and Gamma_stu.  Every
    Gamma_g starts at 0.1 times the pooled residual variance times I.
    """
    data = design.data
    X, y = design.X, data.y
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    e = y - X @ beta
    pooled = max(float(np.mean(e**2)), 1e-8)
    T = design.T
    gammas = [0.1 * pooled * np.eye(b.size) for b in design.teacher_blocks]
    params = ParamState(beta=beta, gammas=gammas)

    if design.variant is ModelVariant.GP_G:
        yv = np.array([np.mean(e[data.obs_year == g] ** 2) for g in range(1, T + 1)])
        yv = np.maximum(yv, 1e-8)
        params.sigma2 = yv / 2
        params.gamma_stu = float(yv.mean() / 2)
    else:
        wide = np.full((data.n, T), np.nan)
        wide[data.obs_student, data.obs_year - 1] = e
        have = ~np.isnan(wide)
        filled = np.where(have, wide, 0.0)
        counts = have.T.astype(float) @ have.astype(float)
        cov = (filled.T @ filled) / np.maximum(counts, 1)
        params.sigma = _nearest_pd(cov, 1e-3 * pooled)

    if design.alpha_pairs:
        fill = 1.0 if design.fixed_alpha is None else design.fixed_alpha
        params.alpha = np.full(len(design.alpha_pairs), float(fill))
    return params


def check_params(design: ModelDesign, params: ParamState) -> None:
    """Shape checks against the design (PD checks happen during assembly)."""
    if np.shape(params.beta) != (design.p,):
        raise ValueError(f"beta must have length {design.p}")
    if len(params.gammas) != len(design.teacher_blocks):
        raise ValueError(f"expected {len(design.teacher_blocks)} Gamma blocks")
    for b in design.teacher_blocks:
        if np.atleast_2d(params.gammas[b.grade - 1]).shape != (b.size, b.size):
            raise ValueError(f"Gamma{b.grade} must be {b.size} x {b.size}")
    if design.variant is ModelVariant.GP_G:
        if params.sigma2 is None or np.shape(params.sigma2) != (design.T,) or params.gamma_stu is None:
            raise ValueError("GP.G needs sigma2 (length T) and gamma_stu")
    elif params.sigma is None or np.shape(params.sigma) != (design.T, design.T):
        raise ValueError(f"sigma must be {design.T} x {design.T}")
    if design.alpha_pairs and np.shape(params.alpha) != (len(design.alpha_pairs),):
        raise ValueError(f"alpha must have length {len(design.alpha_pairs)}")
