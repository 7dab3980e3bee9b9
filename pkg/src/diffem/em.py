"""Outer training loops: Gaussian initialization and the full EM pipeline.

The closed-form loop fits a Gaussian prior to the observations (exact
posterior moments in the E-step, moment matching in the M-step). The full
pipeline then alternates posterior sampling under the current prior with
denoiser refits on the sampled latents, checkpointing every iteration.
"""

import csv
import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (STREAM_EVAL, STREAM_INIT, STREAM_TRAIN, ExperimentConfig,
                     estep_seed_base, substream, version_string)
from .errors import ConfigError, DomainError, EmptyDatasetError, NotSpdError
from .evaluation import PointCloud, sinkhorn_divergence
from .gmm import sample_prior
from .linalg import cholesky
from .manifold import Dataset, prior_from_meta
from .net import (DenoiserModel, TrainConfig, init_denoiser, load_checkpoint,
                  save_checkpoint, train_dsm)
from .posterior import (CovarianceMode, DenoiserScoreSource, GaussianScoreSource,
                        PosteriorScoreConfig, posterior_score_batch)
from .sampler import SamplerConfig, sample_posterior_batch
from .schedule import NoiseSchedule

__all__ = [
    "GaussianPriorFit",
    "EmState",
    "gaussian_em_init",
    "gaussian_em_step",
    "gaussian_log_evidence",
    "expectation_step",
    "run_em",
]

ESTEP_BLOCK = 256
METRICS_COLUMNS = ["iteration", "loss_first", "loss_last", "divergence",
                   "divergence_init", "seconds_estep", "seconds_train",
                   "seconds_eval"]


@dataclass
class GaussianPriorFit:
    mean: np.ndarray
    cov: np.ndarray
    factors: np.ndarray = None      # (N, r) when a low-rank fit was requested
    noise_floor: float = None

    def sample(self, rng, n):
        L = cholesky(self.cov)
        return self.mean + rng.standard_normal((n, len(self.mean))) @ L.T


@dataclass
class EmState:
    iteration: int
    model: DenoiserModel
    gaussian_fit: GaussianPriorFit = None
    metrics: list = field(default_factory=list)

    def score_source(self):
        """Exact Gaussian source before the first refit, the network after."""
        if self.iteration == 0:
            if self.gaussian_fit is None:
                raise ConfigError("iteration 0 requires a Gaussian initialization")
            return GaussianScoreSource(self.gaussian_fit.mean, self.gaussian_fit.cov,
                                       self.model.schedule)
        return DenoiserScoreSource(self.model)


def _gaussian_posteriors(mu, cov, y, A, sy2):
    """Batched exact posterior moments of x given (y_i, A_i) under N(mu, cov)."""
    ASig = np.einsum("nmi,ij->nmj", A, cov)
    m = A.shape[1]
    B = sy2 * np.eye(m)[None, :, :] + np.einsum("nmi,nki->nmk", ASig, A)
    resid = y - A @ mu
    sol = np.linalg.solve(B, resid[:, :, None])[:, :, 0]
    means = mu + np.einsum("nmi,nm->ni", ASig, sol)
    G = np.linalg.solve(B, ASig)
    covs = cov[None, :, :] - np.einsum("nmi,nmj->nij", ASig, G)
    return means, covs, B, resid


def gaussian_log_evidence(mean, cov, dataset: Dataset) -> float:
    """Average log N(y_i; A_i mu, sigma_y^2 I + A_i cov A_i^T) over records."""
    y, A = dataset.stacked()
    _, _, B, resid = _gaussian_posteriors(mean, cov, y, A, dataset.sigma_y**2)
    sol = np.linalg.solve(B, resid[:, :, None])[:, :, 0]
    sign, logdet = np.linalg.slogdet(B)
    if np.any(sign <= 0):
        raise NotSpdError("evidence covariance not positive definite")
    m = A.shape[1]
    ll = -0.5 * (np.sum(resid * sol, axis=1) + logdet + m * np.log(2 * np.pi))
    return float(ll.mean())


def _project_low_rank(cov, rank):
    """Rank-r + isotropic floor projection of a covariance (moment matching)."""
    evals, evecs = np.linalg.eigh(cov)
    n = cov.shape[0]
    if rank >= n:
        return cov, None, None
    floor = max(float(evals[:n - rank].mean()), 1e-12)
    top = evals[n - rank:]
    W = evecs[:, n - rank:] * np.sqrt(np.maximum(top - floor, 0.0))
    return W @ W.T + floor * np.eye(n), W, floor


def gaussian_em_step(mean, cov, dataset: Dataset):
    """One exact EM round for the Gaussian prior; returns (mean, cov)."""
    y, A = dataset.stacked()
    means, covs, _, _ = _gaussian_posteriors(mean, cov, y, A, dataset.sigma_y**2)
    mu = means.mean(axis=0)
    dev = means - mu
    new_cov = covs.mean(axis=0) + (dev.T @ dev) / dev.shape[0]
    return mu, 0.5 * (new_cov + new_cov.T)


def gaussian_em_init(dataset: Dataset, iters=32, rank=None) -> GaussianPriorFit:
    """Fit N(mu, cov) to the observations by exact EM.

    E-step: closed-form posterior moments per record; M-step: mean of the
    posterior means and of the second moments. With rank < N the fitted
    covariance is projected to rank-r factors plus an isotropic floor.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("gaussian_em_init: empty dataset")
    n_dim = dataset.latent_dim
    mu = np.zeros(n_dim)
    cov = np.eye(n_dim)
    factors, floor = None, None
    for _ in range(iters):
        mu, cov = gaussian_em_step(mu, cov, dataset)
        if rank is not None and rank < n_dim:
            cov, factors, floor = _project_low_rank(cov, rank)
    return GaussianPriorFit(mean=mu, cov=cov, factors=factors, noise_floor=floor)


def _estep_block(src, post_cfg, schedule, sampler_cfg, y_blk, A_blk, sigma_y, rngs):
    score = lambda X, t: posterior_score_batch(src, post_cfg, X, t, y_blk, A_blk,
                                               sigma_y)
    return sample_posterior_batch(score, src.dim, schedule, sampler_cfg, rngs)


def expectation_step(state: EmState, dataset: Dataset, sampler_cfg: SamplerConfig,
                     posterior_cfg: PosteriorScoreConfig, samples_per_obs=1,
                     workers=1, seed_base=0):
    """Draw posterior latents for every record under the current prior.

    Chain (record i, replicate s) uses Generator seed
    ``seed_base + i * samples_per_obs + s``; records are processed in fixed
    blocks of 256 chains so results are bitwise identical for any worker
    count, gathered in record order.

    Returns an (n_obs * samples_per_obs, N) array.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("expectation_step: empty dataset")
    if samples_per_obs < 1:
        raise DomainError("samples_per_obs must be >= 1")
    src = state.score_source()
    schedule = state.model.schedule
    y, A = dataset.stacked()
    s_per = samples_per_obs
    y_rep = np.repeat(y, s_per, axis=0)
    A_rep = np.repeat(A, s_per, axis=0)
    n_chains = y_rep.shape[0]

    blocks = [(lo, min(lo + ESTEP_BLOCK, n_chains))
              for lo in range(0, n_chains, ESTEP_BLOCK)]

    def run_block(bounds):
        lo, hi = bounds
        rngs = [np.random.default_rng(seed_base + c) for c in range(lo, hi)]
        return _estep_block(src, posterior_cfg, schedule, sampler_cfg,
                            y_rep[lo:hi], A_rep[lo:hi], dataset.sigma_y, rngs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_block, blocks))
    else:
        parts = [run_block(b) for b in blocks]
    return np.concatenate(parts, axis=0)


def _model_prior_cloud(model, n, sampler_cfg, seed, iteration):
    """Unconditional samples from the current diffusion prior."""
    def score(X, t):
        sigma = model.schedule.sigma(t)
        from .net import denoise
        return (denoise(model, X, t) - X) / sigma**2

    rngs = [np.random.default_rng(np.random.SeedSequence(
        [seed, STREAM_EVAL, iteration, 1, i])) for i in range(n)]
    return sample_posterior_batch(score, model.dim, model.schedule, sampler_cfg, rngs)


def _divergence_to_oracle(cloud, oracle_prior, n, seed, iteration, reg):
    gt = sample_prior(oracle_prior, substream(seed, STREAM_EVAL, iteration, 0), n)
    return sinkhorn_divergence(PointCloud(cloud), PointCloud(gt), reg=reg).value


def _checkpoint_path(outdir, k):
    return Path(outdir) / f"model_{k:03d}.ckpt"


def _find_last_checkpoint(outdir):
    best = None
    for p in Path(outdir).glob("model_*.ckpt"):
        m = re.fullmatch(r"model_(\d+)\.ckpt", p.name)
        if m:
            k = int(m.group(1))
            if best is None or k > best:
                best = k
    return best


def run_em(dataset: Dataset, config: ExperimentConfig, resume=False,
           on_iteration=None) -> EmState:
    """The full pipeline: Gaussian init, then K rounds of sample-and-refit.

    Every iteration persists a checkpoint and appends one metrics row; with
    resume=True the run continues after the last checkpoint in
    config.output_dir and reproduces the uninterrupted run bit for bit.
    """
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    schedule = NoiseSchedule(config.sigma_min, config.sigma_max)
    sampler_cfg = SamplerConfig(steps=config.sampler_steps, eta=config.eta,
                                corrector_steps=config.corrector_steps,
                                corrector_step_scale=config.corrector_step_scale)
    train_cfg = TrainConfig(batch_size=config.batch_size, steps=config.train_steps,
                            lr_init=config.lr_init, lr_final=config.lr_final,
                            grad_clip=config.grad_clip)
    oracle = prior_from_meta(dataset.meta)
    metrics_path = outdir / "metrics.csv"
    state_path = outdir / "state.json"
    fit_path = outdir / "gaussian_init.ckpt"

    header_lines = [f"# {line}" for line in config.to_lines()]
    header_lines.append(f"# version = {version_string()}")

    if resume:
        k0 = _find_last_checkpoint(outdir)
        if k0 is None:
            raise ConfigError(f"resume requested but no checkpoint in {outdir}")
        model = load_checkpoint(_checkpoint_path(outdir, k0))
        fit = _load_fit(fit_path) if fit_path.exists() else None
        saved = json.loads(state_path.read_text()) if state_path.exists() else {}
        divergence_init = saved.get("divergence_init")
    else:
        k0 = 0
        with open(metrics_path, "w", encoding="utf-8", newline="") as f:
            for line in header_lines:
                f.write(line + "\n")
            csv.writer(f).writerow(METRICS_COLUMNS)
        model = init_denoiser(dataset.latent_dim, hidden=config.hidden,
                              embed_dim=config.embed_dim, schedule=schedule,
                              rng=substream(config.seed, STREAM_INIT))
        if config.em_iters == 0:
            return EmState(iteration=0, model=model)
        fit = gaussian_em_init(dataset, iters=config.gaussian_init_iters,
                               rank=config.gaussian_init_rank or None)
        _save_fit(fit, fit_path)
        divergence_init = None
        if oracle is not None:
            init_cloud = fit.sample(substream(config.seed, STREAM_EVAL, 0, 1),
                                    config.eval_samples)
            divergence_init = _divergence_to_oracle(
                init_cloud, oracle, config.eval_samples, config.seed, 0,
                config.sinkhorn_reg)
        state_path.write_text(json.dumps({"divergence_init": divergence_init,
                                          "version": version_string()}))

    if config.cov_mode == "shrink_prior":
        if fit is None:
            raise ConfigError("shrink_prior mode requires the Gaussian initialization")
        mode = CovarianceMode.shrink_prior(fit.cov)
    else:
        mode = CovarianceMode(config.cov_mode)
    posterior_cfg = PosteriorScoreConfig(mode=mode, solver=config.solver,
                                         solver_iters=config.solver_iters,
                                         solver_eps=config.solver_eps)

    state = EmState(iteration=k0, model=model, gaussian_fit=fit)
    workers = config.workers if config.workers > 0 else (os.cpu_count() or 1)
    for k in range(k0 + 1, config.em_iters + 1):
        t0 = time.perf_counter()
        latents = expectation_step(state, dataset, sampler_cfg, posterior_cfg,
                                   samples_per_obs=config.samples_per_obs,
                                   workers=workers,
                                   seed_base=estep_seed_base(config.seed, k))
        t1 = time.perf_counter()
        losses = []
        model = train_dsm(state.model, latents, train_cfg,
                          substream(config.seed, STREAM_TRAIN, k),
                          on_step=lambda step, loss: losses.append(loss))
        t2 = time.perf_counter()
        divergence = None
        if oracle is not None:
            cloud = _model_prior_cloud(model, config.eval_samples, sampler_cfg,
                                       config.seed, k)
            divergence = _divergence_to_oracle(cloud, oracle, config.eval_samples,
                                               config.seed, k, config.sinkhorn_reg)
        t3 = time.perf_counter()

        # path fields stay out of the header so checkpoint bytes are
        # location-independent (resume equivalence is bitwise)
        save_checkpoint(model, _checkpoint_path(outdir, k),
                        extra_header={"em_iteration": k,
                                      "config": config.echo_dict(),
                                      "version": version_string()})
        row = {
            "iteration": k,
            "loss_first": float(np.mean(losses[:512])) if losses else "",
            "loss_last": float(np.mean(losses[-512:])) if losses else "",
            "divergence": divergence if divergence is not None else "",
            "divergence_init": divergence_init if divergence_init is not None else "",
            "seconds_estep": t1 - t0,
            "seconds_train": t2 - t1,
            "seconds_eval": t3 - t2,
        }
        with open(metrics_path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f).writerow([row[c] for c in METRICS_COLUMNS])
        state = EmState(iteration=k, model=model, gaussian_fit=fit,
                        metrics=state.metrics + [row])
        if on_iteration is not None:
            on_iteration(state)
    return state


def _save_fit(fit: GaussianPriorFit, path):
    from .container import write_container

    blocks = [("mean", fit.mean), ("cov", fit.cov)]
    header = {"has_factors": fit.factors is not None}
    if fit.factors is not None:
        blocks.append(("factors", fit.factors))
        header["noise_floor"] = fit.noise_floor
    write_container(path, "gaussian-fit", header, blocks)


def _load_fit(path) -> GaussianPriorFit:
    from .container import read_container

    header, arrays = read_container(path, kind="gaussian-fit")
    return GaussianPriorFit(mean=arrays["mean"], cov=arrays["cov"],
                            factors=arrays.get("factors"),
                            noise_floor=header.get("noise_floor"))
