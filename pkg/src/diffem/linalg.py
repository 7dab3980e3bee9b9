"""Dense arrays, matrix-free linear operators, and Krylov solvers.

Vectors are 1-d float64 arrays and matrices are 2-d float64 arrays
throughout the package; the helpers here normalize inputs to that
convention and check finiteness.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionMismatchError, NonFiniteError, NotSpdError

__all__ = [
    "as_vec",
    "as_matrix",
    "LinearOperator",
    "identity_operator",
    "operator_from_matrix",
    "linearity_defect",
    "CgResult",
    "GmresResult",
    "cg_solve",
    "gmres_solve",
    "cholesky",
    "solve_lower",
    "solve_upper",
    "solve_spd",
]


def as_vec(x, name="vector"):
    """Coerce to a finite 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-d", expected="1-d", got=f"{v.ndim}-d")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} contains NaN/Inf", where=name)
    return v


def as_matrix(a, name="matrix"):
    """Coerce to a finite 2-d float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-d", expected="2-d", got=f"{m.ndim}-d")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN/Inf", where=name)
    return m


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free linear map from R^dim_in to R^dim_out."""

    dim_in: int
    dim_out: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim_in,):
            raise DimensionMismatchError(
                "operator input dimension", expected=(self.dim_in,), got=v.shape
            )
        out = np.asarray(self.apply(v), dtype=np.float64)
        if out.shape != (self.dim_out,):
            raise DimensionMismatchError(
                "operator output dimension", expected=(self.dim_out,), got=out.shape
            )
        return out


def identity_operator(n: int) -> LinearOperator:
    return LinearOperator(n, n, lambda v: v.copy())


def operator_from_matrix(a) -> LinearOperator:
    m = as_matrix(a)
    return LinearOperator(m.shape[1], m.shape[0], lambda v: m @ v)


def linearity_defect(op: LinearOperator, rng, n_probes: int = 8) -> float:
    """Worst-case linearity violation of `op` on random probe pairs.

    Returns max over probes of ||op(a*u + b*v) - a*op(u) - b*op(v)|| relative
    to ||u|| + ||v||; should be ~1e-12 for anything built in this repo.
    """
    worst = 0.0
    for _ in range(n_probes):
        u = rng.standard_normal(op.dim_in)
        v = rng.standard_normal(op.dim_in)
        a, b = rng.standard_normal(2)
        lhs = op(a * u + b * v)
        rhs = a * op(u) + b * op(v)
        denom = np.linalg.norm(u) + np.linalg.norm(v)
        worst = max(worst, float(np.linalg.norm(lhs - rhs) / denom))
    return worst


@dataclass
class CgResult:
    solution: np.ndarray
    residual_norms: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


@dataclass
class GmresResult:
    solution: np.ndarray
    residual_norms: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    breakdown: bool = False


def cg_solve(op, b, x0=None, max_iters=None, eps=1e-6) -> CgResult:
    """Conjugate gradient on a symmetric positive definite operator.

    Early-exits when ||r_i|| <= eps (absolute), checked at the top of each
    iteration; `residual_norms` records ||r|| after every completed update.

    Args:
        op: LinearOperator (square, intended SPD) or 2-d array.
        b: right-hand side.
        x0: initial guess, defaults to zero.
        max_iters: iteration cap, defaults to dim(b).
        eps: absolute tolerance on the residual norm.

    Raises:
        DimensionMismatchError: shape disagreement between op, b, x0.
        NonFiniteError: NaN/Inf in an iterate, reporting the iteration.
    """
    if not isinstance(op, LinearOperator):
        op = operator_from_matrix(op)
    b = as_vec(b, "b")
    n = b.shape[0]
    if op.dim_in != n or op.dim_out != n:
        raise DimensionMismatchError("cg_solve operator shape", expected=(n, n),
                                     got=(op.dim_out, op.dim_in))
    if max_iters is None:
        max_iters = n
    if max_iters < 0:
        raise ValueError("max_iters must be >= 0")
    x = np.zeros(n) if x0 is None else as_vec(x0, "x0").copy()
    if x.shape != (n,):
        raise DimensionMismatchError("x0 shape", expected=(n,), got=x.shape)

    r = b - op(x)
    p = r.copy()
    rr = float(r @ r)
    norms = []
    for it in range(max_iters):
        if np.sqrt(rr) <= eps:
            break
        ap = op(p)
        pap = float(p @ ap)
        if not np.isfinite(pap) or pap == 0.0:
            raise NonFiniteError(
                f"cg_solve: degenerate curvature p^T A p = {pap} at iteration {it}",
                where="cg", iteration=it)
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_next = float(r @ r)
        if not np.isfinite(rr_next):
            raise NonFiniteError(f"cg_solve: non-finite residual at iteration {it}",
                                 where="cg", iteration=it)
        beta = rr_next / rr
        p = r + beta * p
        rr = rr_next
        norms.append(float(np.sqrt(rr)))
    return CgResult(solution=x, residual_norms=norms,
                    converged=np.sqrt(rr) <= eps, iterations=len(norms))


def gmres_solve(op, b, x0=None, max_iters=None, eps=1e-6) -> GmresResult:
    """Restart-free GMRES via the Arnoldi process with Givens rotations.

    Residual norms are non-increasing; the exact solution is reached in at
    most dim(b) iterations. A zero Arnoldi norm (lucky breakdown) returns the
    current iterate with `breakdown=True`, which is then exact.
    """
    if not isinstance(op, LinearOperator):
        op = operator_from_matrix(op)
    b = as_vec(b, "b")
    n = b.shape[0]
    if op.dim_in != n or op.dim_out != n:
        raise DimensionMismatchError("gmres_solve operator shape", expected=(n, n),
                                     got=(op.dim_out, op.dim_in))
    if max_iters is None:
        max_iters = n
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    m = min(max_iters, n)  # restart-free basis cannot exceed the dimension
    x0 = np.zeros(n) if x0 is None else as_vec(x0, "x0")

    r0 = b - op(x0)
    beta = float(np.linalg.norm(r0))
    if beta <= eps:
        return GmresResult(solution=x0.copy(), residual_norms=[beta], converged=True)

    q = np.zeros((m + 1, n))
    h = np.zeros((m + 1, m))
    cs = np.zeros(m)
    sn = np.zeros(m)
    g = np.zeros(m + 1)
    g[0] = beta
    q[0] = r0 / beta

    norms = []
    k_used = 0
    breakdown = False
    for k in range(m):
        w = op(q[k])
        for j in range(k + 1):
            h[j, k] = float(q[j] @ w)
            w = w - h[j, k] * q[j]
        h[k + 1, k] = float(np.linalg.norm(w))
        if not np.isfinite(h[k + 1, k]):
            raise NonFiniteError(f"gmres_solve: non-finite Arnoldi norm at iteration {k}",
                                 where="gmres", iteration=k)
        lucky = h[k + 1, k] < 1e-14 * max(beta, 1.0)
        if not lucky:
            q[k + 1] = w / h[k + 1, k]
        # previously accumulated rotations, then the new one
        for j in range(k):
            t = cs[j] * h[j, k] + sn[j] * h[j + 1, k]
            h[j + 1, k] = -sn[j] * h[j, k] + cs[j] * h[j + 1, k]
            h[j, k] = t
        denom = np.hypot(h[k, k], h[k + 1, k])
        cs[k] = h[k, k] / denom
        sn[k] = h[k + 1, k] / denom
        h[k, k] = denom
        h[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        k_used = k + 1
        norms.append(abs(float(g[k + 1])))
        if lucky:
            breakdown = True
            break
        if norms[-1] <= eps:
            break

    y = np.zeros(k_used)
    for i in range(k_used - 1, -1, -1):
        y[i] = (g[i] - h[i, i + 1:k_used] @ y[i + 1:]) / h[i, i]
    x = x0 + q[:k_used].T @ y
    return GmresResult(solution=x, residual_norms=norms,
                       converged=norms[-1] <= eps or breakdown,
                       iterations=k_used, breakdown=breakdown)


def cholesky(a) -> np.ndarray:
    """Lower-triangular L with L L^T = a.

    Raises:
        NotSpdError: non-positive pivot encountered (input not SPD).
    """
    a = as_matrix(a, "a")
    n, m = a.shape
    if n != m:
        raise DimensionMismatchError("cholesky input must be square", expected=(n, n),
                                     got=a.shape)
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if d <= 0.0 or not np.isfinite(d):
            raise NotSpdError(f"cholesky: non-positive pivot {d} at index {j}",
                              pivot_index=j)
        L[j, j] = np.sqrt(d)
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def solve_lower(L, b):
    """Forward substitution for lower-triangular L."""
    L = np.asarray(L)
    b = np.asarray(b, dtype=np.float64)
    n = L.shape[0]
    x = np.zeros_like(b)
    for i in range(n):
        x[i] = (b[i] - L[i, :i] @ x[:i]) / L[i, i]
    return x


def solve_upper(U, b):
    """Back substitution for upper-triangular U."""
    U = np.asarray(U)
    b = np.asarray(b, dtype=np.float64)
    n = U.shape[0]
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - U[i, i + 1:] @ x[i + 1:]) / U[i, i]
    return x


def solve_spd(a, b):
    """Dense SPD solve via Cholesky; the factorization-based oracle."""
    L = cholesky(a)
    return solve_upper(L.T, solve_lower(L, b))
