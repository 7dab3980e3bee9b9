"""Reverse-diffusion sampling loops.

A discrete reverse update with stochasticity eta walks the uniform grid
t_i = i/T from t = 1 down to 0; the predictor-corrector variant follows
each deterministic step with Langevin corrections at the new noise level.
Chains are independent: batch variants take one Generator per chain so a
batch run reproduces the corresponding single-chain runs draw for draw.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError

__all__ = [
    "SamplerConfig",
    "ddim_update",
    "ddim_step",
    "sample_posterior",
    "sample_posterior_batch",
    "langevin_correct",
    "pc_sample",
    "pc_sample_batch",
]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 64
    eta: float = 1.0
    corrector_steps: int = 0
    corrector_step_scale: float = 0.01

    def __post_init__(self):
        if self.steps < 1:
            raise DomainError("steps must be >= 1")
        if self.eta < 0.0:
            raise DomainError("eta must be >= 0")
        if self.corrector_steps < 0:
            raise DomainError("corrector_steps must be >= 0")
        if self.corrector_step_scale <= 0.0:
            raise DomainError("corrector_step_scale must be > 0")


def ddim_update(x_t, x_hat, sigma_s, sigma_t, eta, z):
    """One reverse update from noise level sigma_t to sigma_s.

    x_s = x_hat + sigma_s sqrt(1 - eta r) (x_t - x_hat)/sigma_t
              + sigma_s sqrt(eta r) z,   r = 1 - sigma_s^2/sigma_t^2.
    """
    r = 1.0 - sigma_s**2 / sigma_t**2
    rad = 1.0 - eta * r
    if rad < 0.0 or eta * r < 0.0:
        raise DomainError(f"negative radicand in reverse update "
                          f"(eta={eta}, sigma_s={sigma_s}, sigma_t={sigma_t})")
    out = x_hat + sigma_s * np.sqrt(rad) * (x_t - x_hat) / sigma_t
    if eta > 0.0:
        out = out + sigma_s * np.sqrt(eta * r) * z
    return out


def _step_batch(score_fn, schedule, X, i, cfg, rngs):
    T = cfg.steps
    s, t = (i - 1) / T, i / T
    sigma_s, sigma_t = schedule.sigma(s), schedule.sigma(t)
    x_hat = X + sigma_t**2 * score_fn(X, t)
    z = None
    if cfg.eta > 0.0:
        z = np.stack([r.standard_normal(X.shape[1]) for r in rngs])
    return ddim_update(X, x_hat, sigma_s, sigma_t, cfg.eta, z)


def ddim_step(score_fn, schedule, x_t, i, cfg: SamplerConfig, rng):
    """Single-chain reverse step from t = i/T to s = (i-1)/T."""
    if not (1 <= i <= cfg.steps):
        raise DomainError(f"step index {i} outside 1..{cfg.steps}")
    wrapped = lambda X, t: np.asarray(score_fn(X[0], t))[None, :]
    return _step_batch(wrapped, schedule, np.asarray(x_t, dtype=np.float64)[None, :],
                       i, cfg, [rng])[0]


def sample_posterior_batch(score_fn, dim, schedule, cfg: SamplerConfig, rngs):
    """Run one reverse chain per Generator in `rngs`; returns (B, dim).

    score_fn(X, t) must accept a (B, dim) batch and a scalar time.
    """
    X = np.stack([r.standard_normal(dim) for r in rngs]) * schedule.sigma(1.0)
    for i in range(cfg.steps, 0, -1):
        X = _step_batch(score_fn, schedule, X, i, cfg, rngs)
    return X


def sample_posterior(score_fn, dim, schedule, cfg: SamplerConfig, rng):
    """Single chain: x_1 ~ N(0, sigma(1)^2 I), then cfg.steps reverse updates."""
    wrapped = lambda X, t: np.asarray(score_fn(X[0], t))[None, :]
    return sample_posterior_batch(wrapped, dim, schedule, cfg, [rng])[0]


def langevin_correct(score_fn, schedule, X, t, n_steps, step_scale, rngs):
    """n_steps unadjusted Langevin updates at fixed level t (batched).

    x <- x + delta * score(x, t) + sqrt(2 delta) z with delta scaled by the
    local noise variance: delta = step_scale * sigma(t)^2.
    """
    delta = step_scale * schedule.sigma(t)**2
    root = np.sqrt(2.0 * delta)
    for _ in range(n_steps):
        Z = np.stack([r.standard_normal(X.shape[1]) for r in rngs])
        X = X + delta * score_fn(X, t) + root * Z
    return X


def pc_sample_batch(score_fn, dim, schedule, cfg: SamplerConfig, rngs):
    """Predictor-corrector chains: deterministic reverse steps, each followed
    by cfg.corrector_steps Langevin updates at the new level."""
    pred = replace(cfg, eta=0.0)
    X = np.stack([r.standard_normal(dim) for r in rngs]) * schedule.sigma(1.0)
    for i in range(cfg.steps, 0, -1):
        X = _step_batch(score_fn, schedule, X, i, pred, rngs)
        if cfg.corrector_steps > 0:
            s = (i - 1) / cfg.steps
            X = langevin_correct(score_fn, schedule, X, s, cfg.corrector_steps,
                                 cfg.corrector_step_scale, rngs)
    return X


def pc_sample(score_fn, dim, schedule, cfg: SamplerConfig, rng):
    """Single predictor-corrector chain."""
    wrapped = lambda X, t: np.asarray(score_fn(X[0], t))[None, :]
    return pc_sample_batch(wrapped, dim, schedule, cfg, [rng])[0]
