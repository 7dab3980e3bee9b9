"""Mixture of isotropic Gaussians: exact densities, scores, and posteriors.

This is the verification oracle of the repo. For a prior sum_j w_j
N(mu_j, b^2 I) everything downstream of Gaussian smoothing is available in
closed form: the smoothed density p(x_t), its score, the conditional mean
and covariance of x given x_t, and the exact smoothed posterior given a
linear-Gaussian observation.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionMismatchError, DomainError, NonFiniteError, NotSpdError
from .linalg import cholesky

__all__ = [
    "GmmPrior",
    "PosteriorMoments",
    "GaussianMixtureFullCov",
    "log_p_xt",
    "score_xt",
    "posterior_moments",
    "posterior_moments_batch",
    "exact_diffused_posterior",
    "sample_prior",
]


@dataclass(frozen=True)
class GmmPrior:
    """Equal-bandwidth isotropic Gaussian mixture in R^N."""

    centers: np.ndarray          # (K, N)
    bandwidth: float
    weights: np.ndarray = None   # (K,), defaults to uniform

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 2:
            raise DimensionMismatchError("centers must be (K, N)", expected="2-d",
                                         got=f"{centers.ndim}-d")
        object.__setattr__(self, "centers", centers)
        if self.bandwidth <= 0.0:
            raise DomainError(f"bandwidth must be > 0, got {self.bandwidth}")
        k = centers.shape[0]
        w = self.weights
        w = np.full(k, 1.0 / k) if w is None else np.asarray(w, dtype=np.float64)
        if w.shape != (k,) or abs(float(w.sum()) - 1.0) > 1e-12 or np.any(w < 0):
            raise DomainError("weights must be a simplex vector matching centers")
        object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return self.centers.shape[1]

    @property
    def n_components(self):
        return self.centers.shape[0]

    def marginal_mean(self):
        return self.weights @ self.centers

    def marginal_cov(self):
        m = self.marginal_mean()
        d = self.centers - m
        return (self.bandwidth**2) * np.eye(self.dim) + (self.weights[:, None] * d).T @ d


@dataclass
class PosteriorMoments:
    mean: np.ndarray
    cov: np.ndarray


def _component_logpdf(prior: GmmPrior, X, sigma):
    """log w_j + log N(x; mu_j, (b^2 + sigma^2) I) for a (B, N) batch."""
    v = prior.bandwidth**2 + sigma**2
    d = X[:, None, :] - prior.centers[None, :, :]
    sq = np.sum(d * d, axis=2)
    n = prior.dim
    return np.log(prior.weights)[None, :] - 0.5 * sq / v - 0.5 * n * np.log(2.0 * np.pi * v)


def log_p_xt(prior: GmmPrior, x_t, sigma) -> float:
    """Log density of the prior smoothed with N(0, sigma^2 I), at x_t."""
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    X = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    val = logsumexp(_component_logpdf(prior, X, sigma), axis=1)
    return float(val[0]) if np.ndim(x_t) == 1 else val


def _responsibilities(prior: GmmPrior, X, sigma):
    lp = _component_logpdf(prior, X, sigma)
    return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))


def score_xt(prior: GmmPrior, x_t, sigma):
    """Gradient of log_p_xt: responsibility-weighted component scores."""
    X = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    v = prior.bandwidth**2 + sigma**2
    gam = _responsibilities(prior, X, sigma)
    out = (gam @ prior.centers - X) / v
    return out[0] if np.ndim(x_t) == 1 else out


def posterior_moments(prior: GmmPrior, x_t, sigma) -> PosteriorMoments:
    """Exact E[x | x_t] and V[x | x_t] under the mixture prior.

    Each component contributes a conjugate-Gaussian posterior
    N((sigma^2 mu_j + b^2 x_t) / (b^2 + sigma^2), b^2 sigma^2 / (b^2 + sigma^2) I)
    mixed by the smoothed responsibilities.
    """
    if sigma <= 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    x_t = np.asarray(x_t, dtype=np.float64)
    mean, cov = posterior_moments_batch(prior, x_t[None, :], sigma)
    return PosteriorMoments(mean=mean[0], cov=cov[0])


def posterior_moments_batch(prior: GmmPrior, X, sigma):
    """Batched posterior moments: means (B, N) and covariances (B, N, N)."""
    b2 = prior.bandwidth**2
    s2 = sigma**2
    v = b2 + s2
    c = b2 * s2 / v
    gam = _responsibilities(prior, X, sigma)                       # (B, K)
    m = (s2 * prior.centers[None, :, :] + b2 * X[:, None, :]) / v  # (B, K, N)
    mean = np.einsum("bk,bkn->bn", gam, m)
    dev = m - mean[:, None, :]
    cov = np.einsum("bk,bki,bkj->bij", gam, dev, dev)
    cov += c * np.eye(prior.dim)[None, :, :]
    return mean, cov


@dataclass
class GaussianMixtureFullCov:
    """Full-covariance mixture, e.g. an exact smoothed posterior p(x_t | y)."""

    means: np.ndarray      # (K, N)
    covs: np.ndarray       # (K, N, N)
    weights: np.ndarray    # (K,)
    _chols: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._chols is None:
            self._chols = np.stack([cholesky(c) for c in self.covs])

    @property
    def dim(self):
        return self.means.shape[1]

    def sample(self, rng, n):
        comps = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comps] + np.einsum("bij,bj->bi", self._chols[comps], z)

    def log_density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n = self.dim
        parts = []
        for k in range(len(self.weights)):
            L = self._chols[k]
            d = X - self.means[k]
            y = _solve_lower_batch(L, d)
            maha = np.sum(y * y, axis=1)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            parts.append(np.log(self.weights[k]) - 0.5 * (maha + logdet + n * np.log(2 * np.pi)))
        return logsumexp(np.stack(parts, axis=1), axis=1)

    def mean(self):
        return self.weights @ self.means

    def cov(self):
        m = self.mean()
        dev = self.means - m
        return (np.einsum("k,kij->ij", self.weights, self.covs)
                + (self.weights[:, None] * dev).T @ dev)


def _solve_lower_batch(L, D):
    """Forward substitution of L against rows of D (B, N)."""
    n = L.shape[0]
    out = np.zeros_like(D)
    for i in range(n):
        out[:, i] = (D[:, i] - out[:, :i] @ L[i, :i]) / L[i, i]
    return out


def exact_diffused_posterior(prior: GmmPrior, obs, sigma) -> GaussianMixtureFullCov:
    """Exact mixture form of p(x_t | y) for y = A x + noise, x_t = x + sigma z.

    Component-wise Gaussian conditioning on y, then diffusion by sigma^2 I.
    The conditioned covariance is shared across components because the prior
    bandwidth is.
    """
    A = np.asarray(obs.A, dtype=np.float64)
    y = np.asarray(obs.y, dtype=np.float64)
    sy2 = obs.sigma_y**2
    b2 = prior.bandwidth**2
    n = prior.dim

    # posterior of x given y per component: precision I/b^2 + A^T A / sy^2
    prec = np.eye(n) / b2 + A.T @ A / sy2
    try:
        cholesky(prec)
    except (NotSpdError, NonFiniteError) as exc:
        raise NotSpdError(f"exact_diffused_posterior: singular component covariance "
                          f"({exc})") from exc
    cov_x = np.linalg.inv(prec)
    cov_x = 0.5 * (cov_x + cov_x.T)
    means = (cov_x @ (prior.centers.T / b2 + A.T @ (y / sy2)[:, None])).T

    # evidence per component: N(y; A mu_j, sy^2 I + b^2 A A^T)
    s_y = sy2 * np.eye(A.shape[0]) + b2 * (A @ A.T)
    resid = y[None, :] - prior.centers @ A.T
    sol = np.linalg.solve(s_y, resid.T).T
    _, logdet = np.linalg.slogdet(s_y)
    log_ev = -0.5 * (np.sum(resid * sol, axis=1) + logdet
                     + A.shape[0] * np.log(2 * np.pi))
    logw = np.log(prior.weights) + log_ev
    w = np.exp(logw - logsumexp(logw))
    w = w / w.sum()

    covs = np.broadcast_to(cov_x + sigma**2 * np.eye(n), (prior.n_components, n, n)).copy()
    return GaussianMixtureFullCov(means=means, covs=covs, weights=w)


def sample_prior(prior: GmmPrior, rng, n):
    """i.i.d. draws: component by weight, then isotropic Gaussian."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    comps = rng.choice(prior.n_components, size=n, p=prior.weights)
    z = rng.standard_normal((n, prior.dim))
    return prior.centers[comps] + prior.bandwidth * z
