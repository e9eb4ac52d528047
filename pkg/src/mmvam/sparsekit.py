"""Sparse symmetric positive-definite kernel for the mixed-model normal matrix.

Matrices are stored as their lower triangle in compressed-column form.  The
factorization is an up-looking sparse Cholesky on a fill-reducing symmetric
permutation; the symbolic analysis (ordering, elimination tree, pattern of
L) depends only on the sparsity pattern and is reused across EM iterations.

Entries of the inverse restricted to the pattern of L are computed with the
Takahashi recurrences.  Every entry of M^-1 the EM updates need lies in that
pattern, because those entries are exactly the nonzeros of M.

When the symbolic analysis shows that L is dense-ish (the scalar sparse
kernels then lose to BLAS), :func:`factorize` switches to a LAPACK Cholesky
of the q x q matrix M.  The choice is made per pattern and all functions
below accept either kind of factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit
from scipy import linalg, sparse
from scipy.linalg import lapack
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from .errors import FactorizationError

DENSE_INVERSE_THRESHOLD = 2000
DENSE_FACTOR_FILL = 0.10  # fraction of the full lower triangle above which L is treated as dense
DENSE_FACTOR_MAX_N = 12000
REFINE_TOL = 1e-10


@dataclass(frozen=True)
class SymSparse:
    """Symmetric matrix held as its lower triangle (CSC, rows sorted per column)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @classmethod
    def from_scipy(cls, mat) -> "SymSparse":
        low = sparse.tril(sparse.csc_matrix(mat), format="csc")
        low.sort_indices()
        return cls(
            low.shape[0],
            low.indptr.astype(np.int64),
            low.indices.astype(np.int64),
            low.data.astype(float),
        )

    def with_data(self, data: np.ndarray) -> "SymSparse":
        return SymSparse(self.n, self.indptr, self.indices, np.asarray(data, dtype=float))

    def to_scipy(self) -> sparse.csc_matrix:
        low = sparse.csc_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))
        return (low + sparse.tril(low, k=-1, format="csc").T).tocsc()

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def dump_coo(self, stream):
        """Coordinate text dump of the lower triangle (row col value, 0-based)."""
        stream.write(f"{self.n} {self.n} {len(self.data)}\n")
        for j in range(self.n):
            for p in range(self.indptr[j], self.indptr[j + 1]):
                stream.write(f"{self.indices[p]} {j} {self.data[p]!r}\n")


def assemble_normal_matrix(S, Rinv, Ginv) -> SymSparse:
    """M = S' R^-1 S + G^-1 from scipy sparse operands."""
    S = sparse.csr_matrix(S)
    if Rinv.shape != (S.shape[0], S.shape[0]) or Ginv.shape != (S.shape[1], S.shape[1]):
        raise ValueError(
            f"non-conformable operands: S {S.shape}, R^-1 {Rinv.shape}, G^-1 {Ginv.shape}"
        )
    M = (S.T @ sparse.csr_matrix(Rinv) @ S) + sparse.csr_matrix(Ginv)
    return SymSparse.from_scipy(M)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _etree(n, Cp, Ci):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(k, Cp, Ci, parent, s, w):
    """Pattern of row k of L (excluding k) into s[top:], descendants first."""
    n = parent.shape[0]
    top = n
    w[k] = k
    for p in range(Cp[k], Cp[k + 1]):
        i = Ci[p]
        if i > k:
            continue
        length = 0
        while w[i] != k:
            s[length] = i
            length += 1
            w[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


@njit(cache=True)
def _symbolic(n, Cp, Ci, parent):
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    counts = np.ones(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(k, Cp, Ci, parent, s, w)
        for t in range(top, n):
            counts[s[t]] += 1
    Lp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        Lp[j + 1] = Lp[j] + counts[j]
    Li = np.empty(Lp[n], dtype=np.int64)
    c = Lp[:-1].copy()
    w[:] = -1
    for k in range(n):
        top = _ereach(k, Cp, Ci, parent, s, w)
        for t in range(top, n):
            i = s[t]
            Li[c[i]] = k
            c[i] += 1
        Li[c[k]] = k
        c[k] += 1
    return Lp, Li


@njit(cache=True)
def _numeric(n, Cp, Ci, Cx, parent, Lp, Li, Lx):
    """Up-looking Cholesky into a precomputed pattern; returns failing pivot or -1."""
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    x = np.zeros(n)
    c = Lp[:-1].copy()
    for k in range(n):
        top = _ereach(k, Cp, Ci, parent, s, w)
        for p in range(Cp[k], Cp[k + 1]):
            x[Ci[p]] = Cx[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            Lx[c[i]] = lki
            c[i] += 1
        if not d > 0.0:
            return k
        Lx[c[k]] = np.sqrt(d)
        c[k] += 1
    return -1


@njit(cache=True)
def _takahashi(n, Lp, Li, Lx):
    """Entries of (L L')^-1 on the pattern of L, same layout as Lx."""
    Z = np.zeros(Lx.shape[0])
    acc = np.zeros(n)
    for j in range(n - 1, -1, -1):
        p0 = Lp[j]
        p1 = Lp[j + 1]
        ljj = Lx[p0]
        for p in range(p0 + 1, p1):
            acc[Li[p]] = 0.0
        for b in range(p0 + 1, p1):
            k = Li[b]
            lkj = Lx[b]
            acc[k] += lkj * Z[Lp[k]]
            q = Lp[k] + 1
            qend = Lp[k + 1]
            for a in range(b + 1, p1):
                i = Li[a]
                while q < qend and Li[q] < i:
                    q += 1
                if q >= qend or Li[q] != i:
                    return Z, j  # pattern not closed under fill
                zik = Z[q]
                acc[i] += lkj * zik
                acc[k] += Lx[a] * zik
        tot = 0.0
        for p in range(p0 + 1, p1):
            zij = -acc[Li[p]] / ljj
            Z[p] = zij
            tot += Lx[p] * zij
        Z[p0] = 1.0 / (ljj * ljj) - tot / ljj
    return Z, -1


@njit(cache=True)
def _solve_columns(Lp, Li, Lx, B):
    """In-place L L' X = B for each column of B (already permuted)."""
    n = Lp.shape[0] - 1
    for col in range(B.shape[1]):
        for j in range(n):
            xj = B[j, col] / Lx[Lp[j]]
            B[j, col] = xj
            for p in range(Lp[j] + 1, Lp[j + 1]):
                B[Li[p], col] -= Lx[p] * xj
        for j in range(n - 1, -1, -1):
            xj = B[j, col]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                xj -= Lx[p] * B[Li[p], col]
            B[j, col] = xj / Lx[Lp[j]]
    return B


@njit(cache=True)
def _locate(Lp, Li, rows, cols):
    """Positions of (row, col) entries (permuted, lower) in the L pattern; -1 if absent."""
    out = np.empty(rows.shape[0], dtype=np.int64)
    for t in range(rows.shape[0]):
        r = rows[t]
        c = cols[t]
        if r < c:
            r, c = c, r
        lo = Lp[c]
        hi = Lp[c + 1]
        while lo < hi:
            mid = (lo + hi) // 2
            if Li[mid] < r:
                lo = mid + 1
            else:
                hi = mid
        out[t] = lo if lo < Lp[c + 1] and Li[lo] == r else -1
    return out


# ---------------------------------------------------------------------------
# ordering and symbolic analysis
# ---------------------------------------------------------------------------


def fill_reducing_order(M: SymSparse, method: str = "mmd") -> np.ndarray:
    """Permutation ``perm`` such that M[perm][:, perm] factors with little fill.

    ``mmd`` is multiple minimum degree on the symmetric pattern (as run by
    SuperLU), ``rcm`` reverse Cuthill-McKee, ``natural`` the identity.
    """
    n = M.n
    if method == "natural" or n <= 1:
        return np.arange(n)
    pattern = M.to_scipy()
    pattern.data = np.ones_like(pattern.data)
    if method == "rcm":
        return np.asarray(csgraph.reverse_cuthill_mckee(pattern.tocsr(), symmetric_mode=True), dtype=np.int64)
    if method == "mmd":
        # diagonally dominant stand-in with the same pattern; only the column order is used
        deg = np.asarray(pattern.sum(axis=1)).ravel()
        dd = (pattern + sparse.diags(deg + 1.0)).tocsc()
        lu = spla.splu(
            dd,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        return np.argsort(lu.perm_c).astype(np.int64)
    raise ValueError(f"unknown ordering {method!r}")


@dataclass(frozen=True, eq=False)
class Symbolic:
    """Ordering, elimination tree and pattern of L for a fixed sparsity pattern of M."""

    n: int
    perm: np.ndarray
    pinv: np.ndarray
    Cp: np.ndarray
    Ci: np.ndarray
    c_from_m: np.ndarray  # position in C (upper CSC of P M P') of each lower entry of M
    parent: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    m_in_l: np.ndarray  # position in L's pattern of each lower entry of M

    @property
    def nnz_L(self) -> int:
        return len(self.Li)


def analyze(M: SymSparse, ordering: str = "mmd", perm: np.ndarray | None = None) -> Symbolic:
    """Symbolic Cholesky analysis of the pattern of M."""
    n = M.n
    if perm is None:
        perm = fill_reducing_order(M, ordering)
    perm = np.asarray(perm, dtype=np.int64)
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n)
    mcols = np.repeat(np.arange(n), np.diff(M.indptr))
    a = pinv[M.indices]
    b = pinv[mcols]
    # C = P M P' stored upper: column max(a, b), row min(a, b)
    ccol = np.maximum(a, b)
    crow = np.minimum(a, b)
    order = np.lexsort((crow, ccol))
    Ci = crow[order]
    Cp = np.searchsorted(ccol[order], np.arange(n + 1)).astype(np.int64)
    c_from_m = np.empty(len(order), dtype=np.int64)
    c_from_m[order] = np.arange(len(order))
    parent = _etree(n, Cp, Ci)
    Lp, Li = _symbolic(n, Cp, Ci, parent)
    m_in_l = _locate(Lp, Li, a, b)
    if np.any(m_in_l < 0):
        raise FactorizationError("symbolic analysis lost an entry of M")
    return Symbolic(n, perm, pinv, Cp, Ci, c_from_m, parent, Lp, Li, m_in_l)


# ---------------------------------------------------------------------------
# factorization, solves, inverse
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CholFactor:
    """P M P' = L L' with L lower triangular (CSC); logdet = 2 sum log diag L."""

    symbolic: Symbolic
    Lx: np.ndarray | None
    logdet: float
    M: SymSparse
    dense: np.ndarray | None = None  # LAPACK lower factor of M (unpermuted) for the dense backend
    _zinv: np.ndarray | None = None

    @property
    def is_dense(self) -> bool:
        return self.dense is not None

    @property
    def n(self) -> int:
        return self.symbolic.n

    @property
    def perm(self) -> np.ndarray:
        return self.symbolic.perm

    @property
    def L(self) -> sparse.csc_matrix:
        if self.is_dense:
            return sparse.csc_matrix(np.tril(self.dense)[np.ix_(self.perm, self.perm)])
        s = self.symbolic
        return sparse.csc_matrix((self.Lx, s.Li, s.Lp), shape=(s.n, s.n))

    @property
    def diag(self) -> np.ndarray:
        if self.is_dense:
            return np.diag(self.dense)
        return self.Lx[self.symbolic.Lp[:-1]]


def prefers_dense(symbolic: Symbolic) -> bool:
    n = symbolic.n
    return n <= DENSE_FACTOR_MAX_N and symbolic.nnz_L >= DENSE_FACTOR_FILL * n * (n + 1) / 2


def factorize(
    M: SymSparse, symbolic: Symbolic | None = None, ordering: str = "mmd", backend: str = "auto"
) -> CholFactor:
    """Cholesky factor of M; raises FactorizationError at a non-positive pivot.

    Pass the ``symbolic`` analysis of an earlier matrix with the same pattern
    to skip ordering and symbolic work.  ``backend`` is ``sparse``, ``dense``
    or ``auto`` (dense when :func:`prefers_dense` says so).
    """
    if symbolic is None:
        symbolic = analyze(M, ordering)
    elif symbolic.n != M.n or len(symbolic.c_from_m) != len(M.data):
        raise ValueError("symbolic analysis does not match this matrix pattern")
    if backend not in ("auto", "sparse", "dense"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "dense" or (backend == "auto" and prefers_dense(symbolic)):
        return _factorize_dense(M, symbolic)
    s = symbolic
    Cx = np.empty(len(M.data))
    Cx[s.c_from_m] = M.data
    Lx = np.zeros(len(s.Li))
    bad = _numeric(s.n, s.Cp, s.Ci, Cx, s.parent, s.Lp, s.Li, Lx)
    if bad >= 0:
        raise FactorizationError(
            f"matrix is not positive definite: pivot {bad} (original index {s.perm[bad]})",
            pivot=int(s.perm[bad]),
        )
    logdet = 2.0 * float(np.log(Lx[s.Lp[:-1]]).sum())
    return CholFactor(s, Lx, logdet, M)


def _factorize_dense(M: SymSparse, symbolic: Symbolic) -> CholFactor:
    c, info = lapack.dpotrf(M.to_dense(), lower=1, clean=1, overwrite_a=1)
    if info != 0:
        bad = info - 1 if info > 0 else 0
        raise FactorizationError(f"matrix is not positive definite: pivot {bad}", pivot=int(bad))
    logdet = 2.0 * float(np.log(np.diag(c)).sum())
    return CholFactor(symbolic, None, logdet, M, dense=c)


def _matvec(M: SymSparse, X: np.ndarray) -> np.ndarray:
    return M.to_scipy() @ X


def solve(F: CholFactor, b: np.ndarray, refine: bool = True) -> np.ndarray:
    """M^-1 b for a vector or a matrix of columns.

    One step of iterative refinement runs when the relative residual
    exceeds ``REFINE_TOL``.
    """
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 1
    B = b.reshape(F.n, -1)
    if B.shape[0] != F.n:
        raise ValueError(f"right-hand side has {B.shape[0]} rows, expected {F.n}")
    s = F.symbolic
    if F.is_dense:
        out, info = lapack.dpotrs(F.dense, B, lower=1)
    else:
        X = np.asfortranarray(B[s.perm])
        _solve_columns(s.Lp, s.Li, F.Lx, X)
        out = np.empty_like(X)
        out[s.perm] = X
    if refine and out.size:
        resid = B - _matvec(F.M, out)
        scale = max(np.abs(B).max(), 1e-300)
        if np.abs(resid).max() > REFINE_TOL * scale:
            out += solve(F, resid, refine=False).reshape(out.shape)
    return out.ravel() if vec else out


def inverse_on_pattern(F: CholFactor) -> np.ndarray:
    """Entries of M^-1 at the stored lower-triangle entries of M (same order as M.data)."""
    s = F.symbolic
    if F.is_dense:
        Z = _dense_full_inverse(F)
        cols = np.repeat(np.arange(F.n), np.diff(F.M.indptr))
        return Z[F.M.indices, cols]
    return _pattern_inverse(F)[s.m_in_l]


def _pattern_inverse(F: CholFactor) -> np.ndarray:
    s = F.symbolic
    Z, bad = _takahashi(s.n, s.Lp, s.Li, F.Lx)
    if bad >= 0:
        raise FactorizationError(f"Takahashi recurrence hit a missing pattern entry at column {bad}")
    return Z


def _dense_full_inverse(F: CholFactor) -> np.ndarray:
    """Symmetric M^-1 from the dense backend, cached on the factor."""
    if F._zinv is None:
        Z, info = lapack.dpotri(F.dense, lower=1)
        if info != 0:
            raise FactorizationError("dense inverse failed")
        F._zinv = np.tril(Z) + np.tril(Z, -1).T
    return F._zinv


def dense_inverse(F: CholFactor) -> np.ndarray:
    """Full M^-1 from the factor (dense)."""
    if F.is_dense:
        return _dense_full_inverse(F).copy()
    Ld = F.L.toarray()
    Linv = linalg.solve_triangular(Ld, np.eye(F.n), lower=True, check_finite=False)
    Zp = Linv.T @ Linv
    pinv = F.symbolic.pinv
    return Zp[np.ix_(pinv, pinv)]


def selected_inverse(
    F: CholFactor,
    requests: Sequence[Sequence[int] | tuple[Sequence[int], Sequence[int]]],
    method: str = "auto",
    dense_threshold: int = DENSE_INVERSE_THRESHOLD,
) -> list[np.ndarray]:
    """Dense blocks of M^-1.

    Each request is either an index set J (principal block M^-1[J, J]) or a
    pair (I, J) for the rectangular block M^-1[I, J].  ``auto`` takes a full
    dense inverse when n <= ``dense_threshold``; otherwise entries inside the
    factor's pattern come from the Takahashi recurrences and any others from
    column solves.  ``columns`` forces column solves M X = E_J for the union
    of requested columns.
    """
    n = F.n
    norm = []
    for req in requests:
        if isinstance(req, tuple) and len(req) == 2 and not np.isscalar(req[0]):
            I, J = (np.asarray(req[0], dtype=np.int64), np.asarray(req[1], dtype=np.int64))
        else:
            I = J = np.asarray(req, dtype=np.int64)
        for idx in (I, J):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise IndexError(f"requested index out of range 0..{n - 1}")
        norm.append((I, J))

    if method == "auto":
        method = "dense" if n <= dense_threshold or F.is_dense else "takahashi"
    if F.is_dense and method in ("takahashi", "columns"):
        method = "dense"
    if method == "dense":
        Z = dense_inverse(F)
        return [Z[np.ix_(I, J)] for I, J in norm]
    if method == "columns":
        return _blocks_by_columns(F, norm)
    if method != "takahashi":
        raise ValueError(f"unknown method {method!r}")

    s = F.symbolic
    Zl = _pattern_inverse(F)
    out = []
    missing = []
    for k, (I, J) in enumerate(norm):
        ii, jj = np.meshgrid(I, J, indexing="ij")
        pos = _locate(s.Lp, s.Li, s.pinv[ii.ravel()], s.pinv[jj.ravel()])
        blk = np.where(pos >= 0, Zl[np.maximum(pos, 0)], np.nan).reshape(len(I), len(J))
        if np.any(pos < 0):
            missing.append(k)
        out.append(blk)
    if missing:
        fixed = _blocks_by_columns(F, [norm[k] for k in missing])
        for k, blk in zip(missing, fixed):
            out[k] = blk
    return out


def _blocks_by_columns(F: CholFactor, norm, chunk: int = 256):
    cols = np.unique(np.concatenate([J for _, J in norm])) if norm else np.array([], dtype=np.int64)
    where = {int(c): k for k, c in enumerate(cols)}
    Xcols = np.empty((F.n, len(cols)))
    for start in range(0, len(cols), chunk):
        sel = cols[start : start + chunk]
        E = np.zeros((F.n, len(sel)))
        E[sel, np.arange(len(sel))] = 1.0
        Xcols[:, start : start + len(sel)] = solve(F, E, refine=False)
    return [Xcols[np.ix_(I, [where[int(j)] for j in J])] for I, J in norm]
