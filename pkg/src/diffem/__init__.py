"""Diffusion priors from noisy linear observations, trained by EM.

The package fits a denoiser-parameterized diffusion model to latents it
never observes directly: each EM iteration samples posterior latents for
every (y, A) record under the current prior, then refits the denoiser on
those samples. Posterior sampling uses a moment-matched Gaussian
likelihood approximation whose covariance is the exact denoiser Jacobian,
applied matrix-free through truncated Krylov solves.
"""

from .config import ExperimentConfig
from .em import EmState, GaussianPriorFit, expectation_step, gaussian_em_init, run_em
from .evaluation import PointCloud, figure2_study, resample_approx_posterior, \
    sinkhorn_divergence
from .gmm import GmmPrior, exact_diffused_posterior, log_p_xt, posterior_moments, \
    sample_prior, score_xt
from .manifold import Dataset, ManifoldCurve, Observation, build_prior, \
    generate_dataset, generate_manifold, load_dataset, save_dataset
from .net import DenoiserModel, TrainConfig, denoise, denoise_vjp, init_denoiser, \
    load_checkpoint, save_checkpoint, score_from_denoiser, train_dsm
from .posterior import CovarianceMode, DenoiserScoreSource, GaussianScoreSource, \
    GmmScoreSource, PosteriorScoreConfig, likelihood_cov_operator, posterior_score
from .sampler import SamplerConfig, ddim_step, pc_sample, sample_posterior
from .schedule import NoiseSchedule

__version__ = "0.1.0"
