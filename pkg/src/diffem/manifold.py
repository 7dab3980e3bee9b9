"""Random smooth closed curves in R^N and synthetic observation datasets.

Each curve coordinate is a truncated random Fourier series whose harmonic
amplitudes decay like 1/k, rescaled coordinate-wise into [-1, 1]. Priors
are built by placing equal-weight isotropic Gaussians at equally spaced
curve parameters; observations are random linear projections plus noise.
"""

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import DimensionMismatchError, DomainError, EmptyDatasetError
from .gmm import GmmPrior, sample_prior

__all__ = [
    "ManifoldCurve",
    "Observation",
    "Dataset",
    "generate_manifold",
    "build_prior",
    "generate_dataset",
    "generate_manifold_dataset",
    "prior_from_meta",
    "save_dataset",
    "load_dataset",
    "sphere_rows",
]

DATASET_VERSION = 1
RESCALE_GRID = 4096


@dataclass(frozen=True)
class ManifoldCurve:
    """Closed curve u in [0, 1) -> R^N as amplitude/phase Fourier pairs.

    gamma_n(u) = offset_n + scale_n * sum_k amp[n,k] cos(2 pi (k+1) u + phase[n,k])
    """

    amplitudes: np.ndarray   # (N, order)
    phases: np.ndarray       # (N, order)
    offsets: np.ndarray      # (N,)
    scales: np.ndarray       # (N,)

    @property
    def dim(self):
        return self.amplitudes.shape[0]

    @property
    def order(self):
        return self.amplitudes.shape[1]

    def __call__(self, u):
        scalar = np.ndim(u) == 0
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        k = np.arange(1, self.order + 1)
        phase = 2.0 * np.pi * u[:, None, None] * k[None, None, :] + self.phases[None, :, :]
        raw = np.sum(self.amplitudes[None, :, :] * np.cos(phase), axis=2)
        out = self.offsets[None, :] + self.scales[None, :] * raw
        return out[0] if scalar else out


@dataclass(frozen=True)
class Observation:
    """One linear-Gaussian measurement y = A x + sigma_y * noise."""

    y: np.ndarray
    A: np.ndarray
    sigma_y: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        A = np.asarray(self.A, dtype=np.float64)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "A", A)
        if A.ndim != 2 or y.shape != (A.shape[0],):
            raise DimensionMismatchError("observation shapes", expected="y (M,), A (M, N)",
                                         got=f"y {y.shape}, A {A.shape}")
        if self.sigma_y <= 0.0:
            raise DomainError(f"sigma_y must be > 0, got {self.sigma_y}")


@dataclass
class Dataset:
    observations: list
    latent_dim: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.observations)

    def stacked(self):
        """(y, A) stacks of shape (n, M) and (n, M, N); requires uniform M."""
        y = np.stack([o.y for o in self.observations])
        A = np.stack([o.A for o in self.observations])
        return y, A

    @property
    def sigma_y(self):
        return self.observations[0].sigma_y


def generate_manifold(dim, order, rng) -> ManifoldCurve:
    """Random smooth closed curve with 1/k harmonic decay, unit-box rescaled."""
    if dim < 2:
        raise DomainError(f"dim must be >= 2, got {dim}")
    if order < 1:
        raise DomainError(f"order must be >= 1, got {order}")
    k = np.arange(1, order + 1, dtype=np.float64)
    a = rng.standard_normal((dim, order)) / k
    b = rng.standard_normal((dim, order)) / k
    # a cos + b sin == amp cos(. + phase)
    amplitudes = np.hypot(a, b)
    phases = np.arctan2(-b, a)
    raw = ManifoldCurve(amplitudes=amplitudes, phases=phases,
                        offsets=np.zeros(dim), scales=np.ones(dim))
    pts = raw(np.arange(RESCALE_GRID) / RESCALE_GRID)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    # small margin keeps off-grid extrema inside [-1, 1]
    scales = 2.0 * (1.0 - 1e-5) / span
    offsets = -(lo + hi) * (1.0 - 1e-5) / span
    return ManifoldCurve(amplitudes=amplitudes, phases=phases,
                         offsets=offsets, scales=scales)


def build_prior(curve: ManifoldCurve, k_mix, bandwidth) -> GmmPrior:
    """Isotropic mixture centered at k_mix equally spaced curve points."""
    if k_mix < 2:
        raise DomainError(f"k_mix must be >= 2, got {k_mix}")
    centers = curve(np.arange(k_mix) / k_mix)
    return GmmPrior(centers=centers, bandwidth=bandwidth)


def sphere_rows(m, n, rng):
    """m rows drawn uniformly from the unit sphere in R^n."""
    rows = rng.standard_normal((m, n))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def generate_dataset(prior: GmmPrior, n_obs, m, sigma_y, rng, meta=None) -> Dataset:
    """Draw (y, A) records: x from the prior, A rows uniform on the sphere."""
    n = prior.dim
    if m > n:
        raise DomainError(f"observation dim {m} exceeds latent dim {n}")
    observations = []
    for _ in range(n_obs):
        x = sample_prior(prior, rng, 1)[0]
        A = sphere_rows(m, n, rng)
        y = A @ x + sigma_y * rng.standard_normal(m)
        observations.append(Observation(y=y, A=A, sigma_y=sigma_y))
    return Dataset(observations=observations, latent_dim=n, meta=dict(meta or {}))


def save_dataset(dataset: Dataset, path):
    """Write the dataset container (JSON header + per-record y and A blocks)."""
    if len(dataset) == 0:
        raise EmptyDatasetError("save_dataset: no records")
    y, A = dataset.stacked()
    header = {
        "dataset_version": DATASET_VERSION,
        "latent_dim": dataset.latent_dim,
        "obs_dim": int(A.shape[1]),
        "n_obs": len(dataset),
        "sigma_y": dataset.sigma_y,
        "meta": dataset.meta,
    }
    write_container(path, "dataset", header, [("y", y), ("A", A)])


def load_dataset(path) -> Dataset:
    header, arrays = read_container(path, kind="dataset")
    y, A = arrays["y"], arrays["A"]
    sigma_y = float(header["sigma_y"])
    observations = [Observation(y=y[i], A=A[i], sigma_y=sigma_y)
                    for i in range(header["n_obs"])]
    return Dataset(observations=observations, latent_dim=int(header["latent_dim"]),
                   meta=dict(header.get("meta", {})))


def generate_manifold_dataset(latent_dim, obs_dim, n_obs, sigma_y, seed,
                              order=4, k_mix=256, bandwidth=0.05) -> Dataset:
    """Curve, prior, and observations from one seed; bit-identical on re-run.

    The metadata it stores is sufficient for prior_from_meta to rebuild the
    generating mixture (used as the evaluation oracle).
    """
    from .config import STREAM_DATA, substream

    rng = substream(seed, STREAM_DATA)
    curve = generate_manifold(latent_dim, order, rng)
    prior = build_prior(curve, k_mix, bandwidth)
    meta = {
        "generator": "manifold",
        "seed": int(seed),
        "latent_dim": int(latent_dim),
        "order": int(order),
        "k_mix": int(k_mix),
        "bandwidth": float(bandwidth),
    }
    return generate_dataset(prior, n_obs, obs_dim, sigma_y, rng, meta=meta)


def prior_from_meta(meta):
    """Rebuild the generating prior recorded in dataset metadata, or None."""
    if not meta or meta.get("generator") != "manifold":
        return None
    from .config import STREAM_DATA, substream

    rng = substream(meta["seed"], STREAM_DATA)
    curve = generate_manifold(int(meta["latent_dim"]), int(meta["order"]), rng)
    return build_prior(curve, int(meta["k_mix"]), float(meta["bandwidth"]))
