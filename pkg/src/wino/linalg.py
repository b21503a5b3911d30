"""Sparse linear solvers: CG, restarted GMRES, Jacobi / ILU(0), dense LU.

Matrices are scipy CSR.  GMRES is right-preconditioned so the recurrence
tracks the true residual norm and convergence is measured against ``|b|``,
which lets a good warm start terminate immediately.  CG measures convergence
against the initial residual.  The ILU(0) factorization keeps exactly the
sparsity pattern of A; its kernels are jit-compiled when numba is available
and fall back to pure Python otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

__all__ = [
    "KrylovConfig",
    "KrylovResult",
    "cg",
    "gmres",
    "make_preconditioner",
    "precond_apply",
    "Ilu0",
    "dense_lu",
]

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@dataclass
class KrylovConfig:
    rtol: float = 1e-5
    max_iter: int = 2000
    restart: int = 120
    preconditioner: str = "none"  # none | jacobi | ilu0

    def __post_init__(self):
        if not 0.0 < self.rtol < 1.0:
            raise ValueError(f"rtol must lie in (0, 1), got {self.rtol}")
        if self.restart < 1:
            raise ValueError("restart must be >= 1")


@dataclass
class KrylovResult:
    x: np.ndarray
    iterations: int
    residuals: list = field(default_factory=list)
    converged: bool = True
    flag: str = ""


# ---------------------------------------------------------------------------
# preconditioners

@njit(cache=True)
def _ilu0_factor(n, indptr, indices, data, diag):  # pragma: no cover - numba
    work = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        r0, r1 = indptr[i], indptr[i + 1]
        for p in range(r0, r1):
            work[indices[p]] = p
        for p in range(r0, r1):
            k = indices[p]
            if k >= i:
                break
            ukk = data[diag[k]]
            if ukk == 0.0:
                return k
            lik = data[p] / ukk
            data[p] = lik
            for q in range(diag[k] + 1, indptr[k + 1]):
                pos = work[indices[q]]
                if pos >= 0:
                    data[pos] -= lik * data[q]
        for p in range(r0, r1):
            work[indices[p]] = -1
        if data[diag[i]] == 0.0:
            return i
    return -1


@njit(cache=True)
def _ilu0_solve(n, indptr, indices, data, diag, b):  # pragma: no cover - numba
    x = b.copy()
    for i in range(n):
        s = x[i]
        for p in range(indptr[i], diag[i]):
            s -= data[p] * x[indices[p]]
        x[i] = s
    for i in range(n - 1, -1, -1):
        s = x[i]
        for p in range(diag[i] + 1, indptr[i + 1]):
            s -= data[p] * x[indices[p]]
        x[i] = s / data[diag[i]]
    return x


class Ilu0:
    """Incomplete LU factorization on the sparsity pattern of A."""

    def __init__(self, A: sp.csr_matrix):
        A = sp.csr_matrix(A)
        A.sort_indices()
        n = A.shape[0]
        indptr, indices = A.indptr.astype(np.int64), A.indices.astype(np.int64)
        data = A.data.astype(np.float64).copy()
        diag = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            sl = indices[indptr[i]:indptr[i + 1]]
            hits = np.nonzero(sl == i)[0]
            if len(hits) == 0:
                raise ValueError(f"row {i} has no diagonal entry")
            diag[i] = indptr[i] + hits[0]
        bad = _ilu0_factor(n, indptr, indices, data, diag)
        if bad >= 0:
            raise ZeroDivisionError(f"zero pivot in ILU(0) at row {bad}")
        self.n, self.indptr, self.indices = n, indptr, indices
        self.data, self.diag = data, diag

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return _ilu0_solve(self.n, self.indptr, self.indices, self.data,
                           self.diag, np.asarray(r, dtype=np.float64))


class Jacobi:
    def __init__(self, A: sp.csr_matrix):
        d = np.asarray(A.diagonal(), dtype=np.float64)
        if np.any(d == 0.0):
            raise ZeroDivisionError("zero diagonal entry; Jacobi unavailable")
        self.inv_diag = 1.0 / d

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self.inv_diag * r


def make_preconditioner(kind: str, A):
    if kind in (None, "none", ""):
        return None
    if kind == "jacobi":
        return Jacobi(A)
    if kind == "ilu0":
        return Ilu0(A)
    raise ValueError(f"unknown preconditioner {kind!r}")


def precond_apply(kind: str, A, r: np.ndarray) -> np.ndarray:
    """One-shot application z ~ A^{-1} r of the named preconditioner."""
    M = make_preconditioner(kind, A)
    return np.asarray(r, dtype=np.float64).copy() if M is None else M(r)


# ---------------------------------------------------------------------------
# Krylov solvers

def cg(A, b, x0=None, cfg: KrylovConfig | None = None) -> KrylovResult:
    """Preconditioned conjugate gradients for SPD systems.

    Stops when |b - A x| <= rtol * |b - A x0|.
    """
    cfg = cfg or KrylovConfig()
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    M = make_preconditioner(cfg.preconditioner, A)

    r = b - A @ x
    rnorm = np.linalg.norm(r)
    hist = [rnorm]
    tol = cfg.rtol * rnorm
    if rnorm == 0.0:
        return KrylovResult(x, 0, hist, True)
    z = M(r) if M is not None else r
    p = z.copy()
    rz = float(r @ z)
    iters = 0
    while iters < cfg.max_iter:
        Ap = A @ p
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise FloatingPointError("non-finite values in CG")
        if pAp <= 0.0:
            return KrylovResult(x, iters, hist, False, flag="indefinite")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = np.linalg.norm(r)
        hist.append(rnorm)
        iters += 1
        if rnorm <= tol:
            return KrylovResult(x, iters, hist, True)
        z = M(r) if M is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return KrylovResult(x, iters, hist, False, flag="max_iter")


def gmres(A, b, x0=None, cfg: KrylovConfig | None = None) -> KrylovResult:
    """Right-preconditioned restarted GMRES(m).

    Converged when |b - A x| <= rtol * |b| (absolute when b = 0); the Givens
    recurrence value equals the true residual norm, which is recomputed at
    each restart.  A restart cycle without progress sets the ``stagnation``
    flag and stops rather than erroring.
    """
    cfg = cfg or KrylovConfig()
    b = np.asarray(b, dtype=np.float64)
    n = len(b)
    x = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    M = make_preconditioner(cfg.preconditioner, A)
    apply_m = (lambda v: v) if M is None else M

    bnorm = np.linalg.norm(b)
    tol = cfg.rtol * bnorm if bnorm > 0 else cfg.rtol

    r = b - A @ x
    beta = np.linalg.norm(r)
    hist = [beta]
    iters = 0
    m = cfg.restart

    while beta > tol and iters < cfg.max_iter:
        beta_start = beta
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        V[0] = r / beta
        g[0] = beta
        j = 0
        while j < m and iters < cfg.max_iter:
            w = A @ apply_m(V[j])
            for i in range(j + 1):  # modified Gram-Schmidt
                H[i, j] = w @ V[i]
                w -= H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            if not np.isfinite(H[j + 1, j]):
                raise FloatingPointError("non-finite values in GMRES")
            if H[j + 1, j] > 0:
                V[j + 1] = w / H[j + 1, j]
            # apply stored rotations, then a new one
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            cs[j] = H[j, j] / denom if denom else 1.0
            sn[j] = H[j + 1, j] / denom if denom else 0.0
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            iters += 1
            j += 1
            hist.append(abs(g[j]))
            if abs(g[j]) <= tol:
                break
        # solve the small triangular system and update
        y = scipy.linalg.solve_triangular(H[:j, :j], g[:j], lower=False)
        x += apply_m(V[:j].T @ y)
        r = b - A @ x
        beta = np.linalg.norm(r)
        hist[-1] = beta  # replace estimate by the recomputed true norm
        if beta > tol and beta >= beta_start * (1.0 - 1e-12):
            return KrylovResult(x, iters, hist, False, flag="stagnation")
    return KrylovResult(x, iters, hist, beta <= tol,
                        flag="" if beta <= tol else "max_iter")


def dense_lu(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Partial-pivoted dense LU solve."""
    A = np.asarray(A, dtype=np.float64)
    lu, piv = scipy.linalg.lu_factor(A)
    if np.any(np.abs(np.diag(lu)) < np.finfo(np.float64).eps * max(
            1.0, np.max(np.abs(A)))):
        raise np.linalg.LinAlgError("matrix is singular to working precision")
    return scipy.linalg.lu_solve((lu, piv), np.asarray(b, dtype=np.float64))
