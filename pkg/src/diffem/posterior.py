"""Posterior score estimators for linear-Gaussian observations.

The posterior score splits into the prior score plus a likelihood term.
The likelihood term linearizes the posterior-mean estimate x_hat around
x_t: with C a model of V[x | x_t],

    s_lik = J^T A^T u,    (sigma_y^2 I + A C A^T) u = y - A x_hat,

where J is the Jacobian of x_hat with respect to x_t, touched only through
vector-Jacobian products. The covariance model is selectable: the exact
sigma_t^2 * J (matrix-free, solved by truncated CG), simple isotropic
heuristics, or zero (the mean-only baseline).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import net as _net
from .errors import DimensionMismatchError, DomainError, NonFiniteError, SolverDivergedError
from .gmm import GmmPrior, posterior_moments_batch
from .linalg import LinearOperator, cholesky, gmres_solve
from .schedule import DEFAULT_SCHEDULE

__all__ = [
    "CovarianceMode",
    "PosteriorScoreConfig",
    "DenoiserScoreSource",
    "GmmScoreSource",
    "GaussianScoreSource",
    "posterior_score",
    "posterior_score_batch",
    "likelihood_cov_operator",
    "symmetry_defect",
    "heuristic_cov_matrix",
]

MODE_KINDS = ("tweedie", "sigma_t", "shrink_identity", "shrink_prior", "dps")


@dataclass(frozen=True)
class CovarianceMode:
    """Model of V[x | x_t] used inside the likelihood score.

    kind:
        tweedie         -- sigma_t^2 * Jacobian of the posterior mean (exact)
        sigma_t         -- sigma_t^2 * I
        shrink_identity -- (I + Sigma_t^{-1})^{-1} = sigma_t^2/(1+sigma_t^2) * I
        shrink_prior    -- (Sigma_x^{-1} + Sigma_t^{-1})^{-1}, needs Sigma_x
        dps             -- zero covariance (mean-only baseline)
    """

    kind: str
    sigma_x: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise DomainError(f"unknown covariance mode {self.kind!r}; "
                              f"expected one of {MODE_KINDS}")
        if self.kind == "shrink_prior":
            if self.sigma_x is None:
                raise DomainError("shrink_prior mode requires sigma_x")
            sx = np.asarray(self.sigma_x, dtype=np.float64)
            if sx.ndim == 1:
                sx = np.diag(sx)
            cholesky(sx)  # raises NotSpdError if invalid
            object.__setattr__(self, "sigma_x", sx)

    @classmethod
    def tweedie(cls):
        return cls("tweedie")

    @classmethod
    def sigma_t(cls):
        return cls("sigma_t")

    @classmethod
    def shrink_identity(cls):
        return cls("shrink_identity")

    @classmethod
    def shrink_prior(cls, sigma_x):
        return cls("shrink_prior", sigma_x=sigma_x)

    @classmethod
    def dps(cls):
        return cls("dps")


@dataclass(frozen=True)
class PosteriorScoreConfig:
    mode: CovarianceMode
    solver: str = "cg"
    solver_iters: int = 3
    solver_eps: float = 1e-6

    def __post_init__(self):
        if self.solver not in ("cg", "gmres"):
            raise DomainError(f"solver must be 'cg' or 'gmres', got {self.solver!r}")
        if self.solver_iters < 1:
            raise DomainError("solver_iters must be >= 1")


class DenoiserScoreSource:
    """Posterior mean and input-VJPs from a trained denoiser network."""

    def __init__(self, model):
        self.model = model
        self.schedule = model.schedule
        self.dim = model.dim

    def mean_and_vjp(self, X, sigma):
        D, ctx = _net._denoise_at_sigma(self.model, X, sigma, want_cache=True)
        return D, lambda W: _net._vjp_at_sigma(self.model, ctx, W)


class GmmScoreSource:
    """Exact posterior mean and covariance products from a mixture prior."""

    def __init__(self, prior: GmmPrior, schedule=DEFAULT_SCHEDULE):
        self.prior = prior
        self.schedule = schedule
        self.dim = prior.dim

    def mean_and_vjp(self, X, sigma):
        mean, cov = posterior_moments_batch(self.prior, X, sigma)
        # V = sigma^2 J with symmetric J, so w -> V w / sigma^2 is the exact VJP
        return mean, lambda W: np.einsum("bij,bj->bi", cov, W) / sigma**2


class GaussianScoreSource:
    """Exact source for a single Gaussian prior N(mu, cov)."""

    def __init__(self, mu, cov, schedule=DEFAULT_SCHEDULE):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.schedule = schedule
        self.dim = self.mu.shape[0]

    def mean_and_vjp(self, X, sigma):
        n = self.dim
        # J = Sigma (Sigma + sigma^2 I)^{-1}, symmetric since the factors commute
        J = np.linalg.solve(self.cov + sigma**2 * np.eye(n), self.cov)
        J = 0.5 * (J + J.T)
        mean = self.mu + (X - self.mu) @ J
        return mean, lambda W: W @ J


def heuristic_cov_matrix(mode: CovarianceMode, sigma, dim):
    """Materialized N x N covariance for the non-Tweedie modes."""
    s2 = sigma**2
    if mode.kind == "sigma_t":
        return s2 * np.eye(dim)
    if mode.kind == "shrink_identity":
        return (s2 / (1.0 + s2)) * np.eye(dim)
    if mode.kind == "shrink_prior":
        prec = np.linalg.inv(mode.sigma_x) + np.eye(dim) / s2
        v = np.linalg.inv(prec)
        return 0.5 * (v + v.T)
    if mode.kind == "dps":
        return np.zeros((dim, dim))
    raise DomainError(f"no materialized covariance for mode {mode.kind!r}")


def _cov_apply_fn(mode: CovarianceMode, sigma, dim, vjp_fn):
    """Batched w -> C w for the configured covariance model."""
    if mode.kind == "tweedie":
        return lambda W: sigma**2 * vjp_fn(W)
    if mode.kind == "dps":
        return lambda W: np.zeros_like(W)
    V = heuristic_cov_matrix(mode, sigma, dim)
    return lambda W: W @ V


def _likelihood_apply_batch(A, sigma_y, cov_apply):
    """v -> sigma_y^2 v + A C A^T v, batched over records."""

    def apply(V):
        W = np.einsum("bmn,bm->bn", A, V)
        CW = cov_apply(W)
        return sigma_y**2 * V + np.einsum("bmn,bn->bm", A, CW)

    return apply


def _cg_batch(op, B, iters, eps):
    """Truncated CG on a batch of small SPD systems; returns (U, finite_mask).

    Rows whose residual norm is already <= eps stay frozen; rows that turn
    non-finite are reported through the mask rather than raising, so the
    caller can retry them with GMRES.
    """
    U = np.zeros_like(B)
    R = B.copy()
    P = R.copy()
    rr = np.sum(R * R, axis=1)
    for _ in range(iters):
        active = np.sqrt(rr) > eps
        if not active.any():
            break
        MP = op(P)
        pmp = np.sum(P * MP, axis=1)
        ok = active & (pmp > 0) & np.isfinite(pmp)
        alpha = np.where(ok, rr / np.where(ok, pmp, 1.0), 0.0)
        U = U + alpha[:, None] * P
        R = R - alpha[:, None] * MP
        rr_new = np.sum(R * R, axis=1)
        beta = np.where(ok, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        P = R + beta[:, None] * P
        rr = rr_new
    finite = np.isfinite(rr) & np.all(np.isfinite(U), axis=1)
    return U, finite


def _gmres_row(src, cfg, x_row, sigma, resid_row, A_row, sigma_y):
    """Single-record likelihood solve via GMRES (fallback / explicit choice)."""
    _, vjp_r = src.mean_and_vjp(x_row[None, :], sigma)
    cov_apply = _cov_apply_fn(cfg.mode, sigma, src.dim, vjp_r)
    apply_b = _likelihood_apply_batch(A_row[None, :, :], sigma_y, cov_apply)
    m = A_row.shape[0]
    op = LinearOperator(m, m, lambda v: apply_b(np.asarray(v, dtype=np.float64)[None, :])[0])
    try:
        res = gmres_solve(op, resid_row, max_iters=cfg.solver_iters, eps=cfg.solver_eps)
    except NonFiniteError as exc:
        raise SolverDivergedError(
            f"likelihood solve diverged (mode={cfg.mode.kind}, iteration {exc.iteration})",
            mode=cfg.mode.kind, iteration=exc.iteration) from exc
    return res.solution


def posterior_score_batch(src, cfg: PosteriorScoreConfig, X, t, y, A, sigma_y):
    """Posterior score for a batch of records sharing the diffusion time t.

    Args:
        src: score source exposing mean_and_vjp(X, sigma).
        cfg: covariance mode and solver settings.
        X: states (B, N).
        t: shared diffusion time with sigma(t) > 0.
        y: observations (B, M); A: measurement matrices (B, M, N).
        sigma_y: shared observation noise std.

    Returns:
        (B, N) posterior scores.
    """
    sigma = src.schedule.sigma(t)
    if sigma <= 0.0:
        raise DomainError(f"posterior score undefined at sigma = {sigma}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 3 or A.shape[0] != X.shape[0] or A.shape[2] != X.shape[1] \
            or y.shape != A.shape[:2]:
        raise DimensionMismatchError("posterior_score_batch shapes",
                                     expected="X (B,N), y (B,M), A (B,M,N)",
                                     got=f"X {X.shape}, y {y.shape}, A {A.shape}")

    mean, vjp_fn = src.mean_and_vjp(X, sigma)
    cov_apply = _cov_apply_fn(cfg.mode, sigma, src.dim, vjp_fn)
    op = _likelihood_apply_batch(A, sigma_y, cov_apply)
    resid = y - np.einsum("bmn,bn->bm", A, mean)

    if cfg.solver == "cg":
        U, finite = _cg_batch(op, resid, cfg.solver_iters, cfg.solver_eps)
        if not finite.all():
            # imperfect network Jacobians can break CG; retry bad rows with GMRES
            for r in np.nonzero(~finite)[0]:
                U[r] = _gmres_row(src, cfg, X[r], sigma, resid[r], A[r], sigma_y)
    else:
        U = np.empty_like(resid)
        for r in range(X.shape[0]):
            U[r] = _gmres_row(src, cfg, X[r], sigma, resid[r], A[r], sigma_y)

    if not np.all(np.isfinite(U)):
        first = int(np.argmax(~np.all(np.isfinite(U), axis=1)))
        raise SolverDivergedError(
            f"likelihood solve diverged (mode={cfg.mode.kind}, record {first})",
            mode=cfg.mode.kind, iteration=cfg.solver_iters)

    W = np.einsum("bmn,bm->bn", A, U)
    s_lik = vjp_fn(W)
    s_prior = (mean - X) / sigma**2
    return s_prior + s_lik


def posterior_score(src, cfg: PosteriorScoreConfig, x_t, t, obs):
    """Posterior score for one observation; see posterior_score_batch."""
    x_t = np.asarray(x_t, dtype=np.float64)
    out = posterior_score_batch(src, cfg, x_t[None, :], t,
                                obs.y[None, :], obs.A[None, :, :], obs.sigma_y)
    return out[0]


def likelihood_cov_operator(src, x_t, t, obs, mode: CovarianceMode) -> LinearOperator:
    """The M x M map v -> (sigma_y^2 I + A C A^T) v, matrix-free."""
    sigma = src.schedule.sigma(t)
    if sigma <= 0.0:
        raise DomainError(f"operator undefined at sigma = {sigma}")
    X = np.asarray(x_t, dtype=np.float64)[None, :]
    _, vjp_fn = src.mean_and_vjp(X, sigma)
    cov_apply = _cov_apply_fn(mode, sigma, src.dim, vjp_fn)
    apply_b = _likelihood_apply_batch(obs.A[None, :, :], obs.sigma_y, cov_apply)
    m = obs.A.shape[0]
    return LinearOperator(
        m, m, lambda v: apply_b(np.asarray(v, dtype=np.float64)[None, :])[0])


def symmetry_defect(src, x_t, t, obs, mode=None, n_pairs=16, rng=None) -> float:
    """Mean |u^T M v - v^T M u| / (||u|| ||v||) over random probe pairs.

    Diagnostic for how far the likelihood operator (by default with the
    exact-Jacobian covariance) is from symmetric; guides the CG vs GMRES
    choice.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if mode is None:
        mode = CovarianceMode.tweedie()
    op = likelihood_cov_operator(src, x_t, t, obs, mode)
    total = 0.0
    m = op.dim_in
    for _ in range(n_pairs):
        u = rng.standard_normal(m)
        v = rng.standard_normal(m)
        total += abs(float(u @ op(v) - v @ op(u))) / (np.linalg.norm(u) * np.linalg.norm(v))
    return total / n_pairs
