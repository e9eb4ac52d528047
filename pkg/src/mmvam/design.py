"""Per-variant model designs: fixed design X, random design S (or S* = S A),
the block template of G and the OTS-pattern registry of R.

Random-effect columns are ordered grade-major, teacher-minor, effect-year
innermost; GP.G prepends one intercept column per student.  The random
design is stored as a list of labelled structural nonzeros: label 0 means a
unit coefficient, label ``a >= 1`` means the coefficient is the persistence
parameter ``alpha_pairs[a - 1]``.  For the GP variants every label is 0.

Besides the matrices themselves, :class:`ModelDesign` precomputes the index
structures the EM engine needs every iteration: all ordered pairs of
observations that share a student (the nonzeros of R), all ordered pairs of
S nonzeros that share a student, and the fixed lower-triangle sparsity
pattern of the normal matrix M = S*' R^-1 S* + G^-1.  That pattern is also the
set of entries of var(eta | y) every M-step reads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from .errors import DesignError, PDViolationError
from .ingest import LongitudinalDataset, pattern_years


class ModelVariant(str, enum.Enum):
    GP_R = "gp.r"
    RGP_R = "rgp.r"
    GP_G = "gp.g"
    VP = "vp"
    CP = "cp"

    @classmethod
    def parse(cls, value) -> "ModelVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DesignError(
                f"unknown model {value!r}; expected one of {[v.value for v in cls]}"
            ) from None

    @property
    def has_sigma_grid(self) -> bool:
        return self is not ModelVariant.GP_G

    @property
    def persistence(self) -> bool:
        return self in (ModelVariant.VP, ModelVariant.CP)


@dataclass(frozen=True)
class GBlock:
    """``multiplicity`` copies of a ``size`` x ``size`` covariance block.

    ``grade`` is 0 for the GP.G student-intercept block.
    """

    grade: int
    size: int
    multiplicity: int
    offset: int

    @property
    def ncols(self) -> int:
        return self.size * self.multiplicity


@dataclass(frozen=True)
class Effect:
    """Description of one random-effect column."""

    kind: str  # "teacher" or "student"
    unit: str
    grade: int
    effect_year: str


def _group_pairs(start: np.ndarray):
    """All ordered index pairs (a, b) with a, b in the same group.

    ``start`` holds group offsets (length ngroups + 1).  Pairs come out sorted
    by group, then a, then b.  Also returns the group of each pair and the
    offset of each group's first pair.
    """
    sizes = np.diff(start)
    pair_start = np.concatenate([[0], np.cumsum(sizes**2)])
    total = int(pair_start[-1])
    a = np.empty(total, dtype=np.int64)
    b = np.empty(total, dtype=np.int64)
    grp = np.empty(total, dtype=np.int64)
    for k in np.unique(sizes):
        if k == 0:
            continue
        groups = np.flatnonzero(sizes == k)
        la, lb = np.divmod(np.arange(k * k), k)
        pos = pair_start[groups][:, None] + np.arange(k * k)[None, :]
        a[pos] = start[groups][:, None] + la[None, :]
        b[pos] = start[groups][:, None] + lb[None, :]
        grp[pos] = groups[:, None]
    return a, b, grp, pair_start


@dataclass(frozen=True, eq=False)
class ModelDesign:
    """Design matrices and index structures for one (dataset, variant) pair."""

    variant: ModelVariant
    data: LongitudinalDataset
    X: np.ndarray
    x_names: tuple[str, ...]
    q: int
    nz_row: np.ndarray
    nz_col: np.ndarray
    nz_label: np.ndarray
    alpha_pairs: tuple[tuple[int, int], ...]
    alpha_free: bool
    g_blocks: tuple[GBlock, ...]
    effects: tuple[Effect, ...] = field(repr=False)
    fixed_alpha: float | None = None

    # ------------------------------------------------------------------ basic
    @property
    def T(self) -> int:
        return self.data.T

    @property
    def n_obs(self) -> int:
        return self.data.n_obs

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def teacher_blocks(self) -> tuple[GBlock, ...]:
        return tuple(b for b in self.g_blocks if b.grade > 0)

    @property
    def student_block(self) -> GBlock | None:
        return next((b for b in self.g_blocks if b.grade == 0), None)

    def grade_sizes(self) -> dict[int, int]:
        return {b.grade: b.size for b in self.teacher_blocks}

    def coefficients(self, alpha: np.ndarray | None = None) -> np.ndarray:
        """Values of the S* nonzeros for a persistence vector (ones for GP)."""
        coef = np.ones(len(self.nz_row))
        if self.alpha_pairs:
            if alpha is None:
                raise ValueError("this design needs a persistence vector")
            alpha = np.asarray(alpha, dtype=float)
            if alpha.shape != (len(self.alpha_pairs),):
                raise ValueError(f"alpha must have length {len(self.alpha_pairs)}")
            lab = self.nz_label > 0
            coef[lab] = alpha[self.nz_label[lab] - 1]
        return coef

    def S(self, alpha: np.ndarray | None = None) -> sparse.csr_matrix:
        """Random design S (or S* = S A(alpha) for VP/CP) as CSR."""
        return assemble_Sstar(self, alpha)

    # ------------------------------------------------------- R registry
    @cached_property
    def patterns(self) -> tuple[int, ...]:
        return tuple(self.data.pattern_counts)

    @cached_property
    def pattern_of_student(self) -> np.ndarray:
        """Index into :attr:`patterns` for each student."""
        lookup = {p: k for k, p in enumerate(self.patterns)}
        return np.array([lookup[int(p)] for p in self.data.ots], dtype=np.int64)

    @cached_property
    def pattern_counts(self) -> np.ndarray:
        return np.array([self.data.pattern_counts[p] for p in self.patterns], dtype=np.int64)

    def pattern_index_sets(self) -> list[np.ndarray]:
        """0-based year indices observed under each registered pattern."""
        return [np.array(pattern_years(p, self.T)) - 1 for p in self.patterns]

    @cached_property
    def sigma_pairs(self) -> tuple[tuple[int, int], ...]:
        """(k, l), k >= l, 1-based, of every sigma_kl some pattern contains (P_kl non-empty)."""
        present = set()
        for idx in self.pattern_index_sets():
            for a in idx:
                for b in idx:
                    if a >= b:
                        present.add((int(a) + 1, int(b) + 1))
        return tuple(sorted(present))

    def patterns_containing(self, k: int, l: int) -> tuple[int, ...]:
        """P_kl: registered patterns whose block contains sigma_kl."""
        return tuple(
            p for p in self.patterns if set(pattern_years(p, self.T)) >= {k, l}
        )

    # ------------------------------------------------ pair index structures
    @cached_property
    def obs_pairs(self):
        """Ordered observation pairs within students (the nonzeros of R).

        Returns ``(r1, r2, student, pair_start)``.
        """
        r1, r2, stu, start = _group_pairs(self.data.student_start)
        return r1, r2, stu, start

    @cached_property
    def obs_pair_years(self):
        r1, r2, _, _ = self.obs_pairs
        yr = self.data.obs_year
        return yr[r1], yr[r2]

    @cached_property
    def nz_pairs(self):
        """Ordered pairs of S nonzeros within students.

        Returns ``(k1, k2, obs_pair)`` where ``obs_pair`` indexes
        :attr:`obs_pairs`.
        """
        stu_of_nz = self.data.obs_student[self.nz_row]
        counts = np.bincount(stu_of_nz, minlength=self.data.n)
        start = np.concatenate([[0], np.cumsum(counts)])
        k1, k2, stu, _ = _group_pairs(start)
        r1, r2 = self.nz_row[k1], self.nz_row[k2]
        s0 = self.data.student_start[stu]
        ni = self.data.student_start[stu + 1] - s0
        op = self.obs_pairs[3][stu] + (r1 - s0) * ni + (r2 - s0)
        return k1, k2, op

    @cached_property
    def m_pattern(self):
        """Fixed lower-triangle CSC pattern of M and index maps into it.

        Returns a dict with ``indptr``, ``indices`` (rows, sorted per column),
        ``nz_pos`` (position of each nz-pair entry), ``nz_lower`` (the nz
        pairs with col(k1) >= col(k2), whose sum is the S' R^-1 S part of M
        without double counting), ``block_pos`` (per G
        block, an array multiplicity x ntri of positions of the lower-triangle
        block entries in row-major (a >= b) order) and ``diag_pos``.
        """
        q = self.q
        k1, k2, _ = self.nz_pairs
        c1, c2 = self.nz_col[k1], self.nz_col[k2]
        lo_r = np.maximum(c1, c2)
        lo_c = np.minimum(c1, c2)
        keys = [lo_c * q + lo_r]
        blk_keys = []
        for b in self.g_blocks:
            ia, ib = np.tril_indices(b.size)
            base = b.offset + b.size * np.arange(b.multiplicity)
            rows = base[:, None] + ia[None, :]
            cols = base[:, None] + ib[None, :]
            kk = cols * q + rows
            blk_keys.append(kk)
            keys.append(kk.ravel())
        keys.append(np.arange(q) * (q + 1))
        allkeys = np.concatenate(keys)
        uniq = np.unique(allkeys)
        cols, rows = np.divmod(uniq, q)
        indptr = np.searchsorted(cols, np.arange(q + 1))
        nz_pos = np.searchsorted(uniq, keys[0])
        block_pos = [np.searchsorted(uniq, kk) for kk in blk_keys]
        diag_pos = np.searchsorted(uniq, np.arange(q) * (q + 1))
        return {
            "nz_lower": np.flatnonzero(c1 >= c2),
            "indptr": indptr.astype(np.int64),
            "indices": rows.astype(np.int64),
            "nz_pos": nz_pos,
            "block_pos": block_pos,
            "diag_pos": diag_pos,
        }

    @cached_property
    def symbolic(self):
        """Cholesky symbolic analysis of the fixed pattern of M (shared by all fits)."""
        from .sparsekit import SymSparse, analyze

        pat = self.m_pattern
        return analyze(SymSparse(self.q, pat["indptr"], pat["indices"], np.ones(len(pat["indices"]))))

    # -------------------------------------------------------------- debug
    def dump_coo(self, stream, which: str = "S", alpha=None):
        """Write S or X in coordinate text format (row col value, 0-based)."""
        if which == "S" and alpha is None and self.alpha_pairs:
            alpha = np.ones(len(self.alpha_pairs))  # structural pattern
        mat = sparse.coo_matrix(self.S(alpha) if which == "S" else self.X)
        stream.write(f"{mat.shape[0]} {mat.shape[1]} {mat.nnz}\n")
        for i, j, v in zip(mat.row, mat.col, mat.data):
            stream.write(f"{i} {j} {v!r}\n")


def _teacher_effect_layout(variant: ModelVariant, T: int, m: tuple[int, ...], offset: int):
    """Column layout for the teacher part of eta; returns (blocks, K per grade)."""
    blocks = []
    K = {}
    col = offset
    for g in range(1, T + 1):
        if variant is ModelVariant.RGP_R:
            k = min(2, T - g + 1)
        elif variant.persistence:
            k = 1
        else:
            k = T - g + 1
        K[g] = k
        blocks.append(GBlock(grade=g, size=k, multiplicity=m[g - 1], offset=col))
        col += k * m[g - 1]
    return blocks, K


def build_design(
    data: LongitudinalDataset,
    variant,
    covariates: list[str] | tuple[str, ...] | None = None,
    *,
    common_scale: bool = True,
    fixed_alpha: float | None = None,
) -> ModelDesign:
    """Assemble X, S (or the labelled S* for VP/CP), the G template and R registry.

    ``covariates`` selects dataset covariate columns (by name) to append to
    the T yearly intercepts.  ``common_scale=False`` declares that yearly
    scores are on different scales, which rGP.R and GP.G cannot accommodate.
    ``fixed_alpha`` freezes every VP persistence parameter at that value; CP
    is VP frozen at 1.
    """
    variant = ModelVariant.parse(variant)
    if not common_scale and variant in (ModelVariant.RGP_R, ModelVariant.GP_G):
        raise DesignError(f"{variant.value} requires scores measured on a common scale across years")
    if fixed_alpha is not None and variant is not ModelVariant.VP:
        raise DesignError("fixed_alpha only applies to the VP model")
    T = data.T
    for g, ng in enumerate(data.n_g, start=1):
        if ng == 0:
            raise DesignError(f"year {g} has no scored observations")
    for g, mg in enumerate(data.m, start=1):
        if mg == 0:
            raise DesignError(f"year {g} has no teacher links")

    # fixed effects: T yearly means plus selected covariates
    covariates = tuple(covariates or ())
    names = data.covariate_names
    missing = [c for c in covariates if c not in names]
    if missing:
        raise DesignError(f"unknown covariate columns {missing}; available {list(names)}")
    X = np.zeros((data.n_obs, T + len(covariates)))
    X[np.arange(data.n_obs), data.obs_year - 1] = 1.0
    for k, c in enumerate(covariates):
        X[:, T + k] = data.covariates[:, names.index(c)]
    x_names = tuple(f"year{g}" for g in range(1, T + 1)) + covariates

    # random effects layout
    blocks = []
    offset = 0
    if variant is ModelVariant.GP_G:
        blocks.append(GBlock(grade=0, size=1, multiplicity=data.n, offset=0))
        offset = data.n
    tblocks, K = _teacher_effect_layout(variant, T, data.m, offset)
    blocks.extend(tblocks)
    q = offset + sum(b.ncols for b in tblocks)
    start = {b.grade: b.offset for b in tblocks}

    alpha_pairs = ()
    if variant.persistence:
        alpha_pairs = tuple((g, t) for t in range(1, T + 1) for g in range(t + 1, T + 1))
    alpha_label = {pair: a + 1 for a, pair in enumerate(alpha_pairs)}

    rows, cols, labels = [], [], []
    links = data.links
    for r in range(data.n_obs):
        i = int(data.obs_student[r])
        g = int(data.obs_year[r])
        if variant is ModelVariant.GP_G:
            rows.append(r)
            cols.append(i)
            labels.append(0)
        for t in range(1, g + 1):
            j = int(links[i, t - 1])
            if j < 0:
                continue
            k = K[t]
            if variant.persistence:
                col = start[t] + j
                lab = 0 if t == g else alpha_label[(g, t)]
            elif variant is ModelVariant.RGP_R:
                col = start[t] + j * k + (0 if t == g else 1)
                lab = 0
            else:
                col = start[t] + j * k + (g - t)
                lab = 0
            rows.append(r)
            cols.append(col)
            labels.append(lab)

    effects = []
    if variant is ModelVariant.GP_G:
        effects.extend(Effect("student", s, 0, "") for s in data.student_ids)
    for b in tblocks:
        g = b.grade
        for tid in data.rosters[g - 1]:
            for e in range(b.size):
                if variant.persistence:
                    ey = str(g)
                elif variant is ModelVariant.RGP_R:
                    ey = str(g) if e == 0 else "future"
                else:
                    ey = str(g + e)
                effects.append(Effect("teacher", tid, g, ey))

    if variant is ModelVariant.CP:
        alpha_free = False
        fixed = 1.0
    elif variant is ModelVariant.VP:
        alpha_free = fixed_alpha is None
        fixed = fixed_alpha
    else:
        alpha_free = False
        fixed = None

    return ModelDesign(
        variant=variant,
        data=data,
        X=X,
        x_names=x_names,
        q=q,
        nz_row=np.array(rows, dtype=np.int64),
        nz_col=np.array(cols, dtype=np.int64),
        nz_label=np.array(labels, dtype=np.int64),
        alpha_pairs=alpha_pairs,
        alpha_free=alpha_free,
        g_blocks=tuple(blocks),
        effects=tuple(effects),
        fixed_alpha=fixed,
    )


# ---------------------------------------------------------------------------
# S* and persistence structure
# ---------------------------------------------------------------------------


def assemble_Sstar(design: ModelDesign, alpha=None) -> sparse.csr_matrix:
    """S* = S A(alpha) as CSR; plain S for the GP variants.

    Explicit zeros are kept, so the structural pattern does not depend on alpha.
    """
    coef = design.coefficients(alpha)
    return sparse.csr_matrix(
        (coef, (design.nz_row, design.nz_col)), shape=(design.n_obs, design.q)
    )


def persistence_matrix(design: ModelDesign, alpha) -> sparse.csr_matrix:
    """A(alpha) = blockdiag(I_{m_g} kron (1, alpha_{g+1,g}, ..., alpha_{T,g})').

    Maps one-effect-per-teacher VP coordinates onto the GP.R effect layout.
    """
    if not design.variant.persistence:
        raise DesignError("persistence matrix only exists for VP/CP")
    T = design.T
    lookup = dict(zip(design.alpha_pairs, np.asarray(alpha, dtype=float)))
    rows, cols, vals = [], [], []
    gp_off = 0
    for b in design.teacher_blocks:
        g = b.grade
        k = T - g + 1
        for j in range(b.multiplicity):
            for e in range(k):
                rows.append(gp_off + j * k + e)
                cols.append(b.offset + j)
                vals.append(1.0 if e == 0 else lookup[(g + e, g)])
        gp_off += k * b.multiplicity
    return sparse.csr_matrix((vals, (rows, cols)), shape=(gp_off, design.q))


def gp_indicator_design(design: ModelDesign) -> sparse.csr_matrix:
    """The GP.R-layout 0/1 matrix S underlying a VP/CP design (S* = S A)."""
    if not design.variant.persistence:
        raise DesignError("only defined for VP/CP designs")
    return build_design(design.data, ModelVariant.GP_R).S()


def delta_pattern(design: ModelDesign, g: int, t: int) -> sparse.csr_matrix:
    """dS*/d alpha_{gt}: ones at (year-g row, year-t teacher column) for linked pairs."""
    if not 1 <= t < g <= design.T:
        raise ValueError(f"delta pattern needs 1 <= t < g <= T, got g={g}, t={t}")
    if not design.variant.persistence:
        raise DesignError("persistence derivatives only exist for VP/CP")
    label = design.alpha_pairs.index((g, t)) + 1
    sel = design.nz_label == label
    return sparse.csr_matrix(
        (np.ones(sel.sum()), (design.nz_row[sel], design.nz_col[sel])),
        shape=(design.n_obs, design.q),
    )


# ---------------------------------------------------------------------------
# G and R assembly
# ---------------------------------------------------------------------------


def _check_pd(mat: np.ndarray, what: str, block=None) -> np.ndarray:
    """Cholesky factor of ``mat`` or a PDViolationError naming the block."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise PDViolationError(f"{what} is not positive definite", block) from None


def _block_values(design: ModelDesign, gammas, gamma_stu):
    """Per-block (covariance, inverse, logdet) triples in template order."""
    out = []
    for b in design.g_blocks:
        if b.grade == 0:
            if gamma_stu is None or not gamma_stu > 0:
                raise PDViolationError("student variance Gamma_stu must be > 0", "Gamma_stu")
            cov = np.array([[float(gamma_stu)]])
        else:
            cov = np.atleast_2d(np.asarray(gammas[b.grade - 1], dtype=float))
        L = _check_pd(cov, f"Gamma_{b.grade}" if b.grade else "Gamma_stu", b.grade)
        Linv = np.linalg.inv(L)
        out.append((cov, Linv.T @ Linv, 2.0 * np.log(np.diag(L)).sum()))
    return out


def assemble_G(design: ModelDesign, gammas, gamma_stu=None):
    """G, G^-1 (CSR) and log|G| from the block template."""
    parts = _block_values(design, gammas, gamma_stu)
    G = sparse.block_diag(
        [sparse.kron(sparse.identity(b.multiplicity), c) for b, (c, _, _) in zip(design.g_blocks, parts)],
        format="csr",
    )
    Ginv = sparse.block_diag(
        [sparse.kron(sparse.identity(b.multiplicity), ci) for b, (_, ci, _) in zip(design.g_blocks, parts)],
        format="csr",
    )
    logdet = sum(b.multiplicity * ld for b, (_, _, ld) in zip(design.g_blocks, parts))
    return G, Ginv, float(logdet)


def pattern_inverses(design: ModelDesign, sigma=None, sigma2=None):
    """Inverse and log-determinant of each registered pattern block R_(p).

    Returns (list of inverses, array of logdets).  GP.G uses the diagonal
    sigma2 vector; the others the symmetric T x T sigma grid.
    """
    invs, logdets = [], []
    for p, idx in zip(design.patterns, design.pattern_index_sets()):
        if sigma2 is not None:
            d = np.asarray(sigma2, dtype=float)[idx]
            if np.any(d <= 0):
                raise PDViolationError(f"pattern {p} block is not positive definite", p)
            invs.append(np.diag(1.0 / d))
            logdets.append(float(np.log(d).sum()))
        else:
            block = np.asarray(sigma, dtype=float)[np.ix_(idx, idx)]
            L = _check_pd(block, f"R block of pattern {p}", p)
            Linv = np.linalg.inv(L)
            invs.append(Linv.T @ Linv)
            logdets.append(2.0 * float(np.log(np.diag(L)).sum()))
    return invs, np.array(logdets)


def r_pair_values(design: ModelDesign, sigma=None, sigma2=None):
    """R and R^-1 values on :attr:`ModelDesign.obs_pairs`, plus log|R|."""
    invs, logdets = pattern_inverses(design, sigma, sigma2)
    r1, r2, stu, _ = design.obs_pairs
    y1, y2 = design.obs_pair_years
    pat = design.pattern_of_student[stu]
    T = design.T
    # embed each pattern inverse into a T x T grid so lookups are by year
    emb = np.zeros((len(invs), T, T))
    for k, (inv, idx) in enumerate(zip(invs, design.pattern_index_sets())):
        emb[k][np.ix_(idx, idx)] = inv
    rinv = emb[pat, y1 - 1, y2 - 1]
    if sigma2 is not None:
        rval = np.where(r1 == r2, np.asarray(sigma2, dtype=float)[y1 - 1], 0.0)
    else:
        rval = np.asarray(sigma, dtype=float)[y1 - 1, y2 - 1]
    logdet = float(np.dot(design.pattern_counts, logdets))
    return rval, rinv, logdet


def assemble_R_inverse(design: ModelDesign, sigma=None, sigma2=None):
    """Block-diagonal R, R^-1 (CSR) and log|R| = sum_p n_p log|R_(p)|."""
    rval, rinv, logdet = r_pair_values(design, sigma, sigma2)
    r1, r2, _, _ = design.obs_pairs
    shape = (design.n_obs, design.n_obs)
    R = sparse.csr_matrix((rval, (r1, r2)), shape=shape)
    Rinv = sparse.csr_matrix((rinv, (r1, r2)), shape=shape)
    return R, Rinv, logdet
