"""MLP denoiser with noise-level preconditioning and manual backprop.

The denoiser wraps a plain MLP ``h`` (SiLU activations, layer norm after
each activation) in input/output scalings chosen so that the network
regresses an O(1) residual at every noise level:

    d(x, sigma) = x / (sigma^2 + 1)
                + sigma / sqrt(sigma^2 + 1) * h(x / sqrt(sigma^2 + 1), log sigma)

Forward, parameter gradients, and input vector-Jacobian products are all
implemented by hand so the package carries its own reverse-mode engine; the
input VJP is what the posterior-score solver iterates on.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .container import read_container, write_container
from .errors import DimensionMismatchError, DomainError, EmptyDatasetError
from .schedule import DEFAULT_SCHEDULE, NoiseSchedule

__all__ = [
    "MlpParams",
    "DenoiserModel",
    "TrainConfig",
    "embed_log_sigma",
    "init_denoiser",
    "denoise",
    "denoise_vjp",
    "score_from_denoiser",
    "train_dsm",
    "param_grad_check",
    "save_checkpoint",
    "load_checkpoint",
]

LN_EPS = 1e-5
EMBED_FREQ_MIN = 1e-2
EMBED_FREQ_MAX = 1e2
CHECKPOINT_VERSION = 1


def embed_log_sigma(log_sigma, embed_dim):
    """Sinusoidal features of log sigma at geometrically spaced frequencies.

    Returns [sin(f_1 u), ..., sin(f_K u), cos(f_1 u), ..., cos(f_K u)] with
    K = embed_dim / 2 frequencies spanning [1e-2, 1e2].
    """
    if embed_dim % 2 != 0:
        raise DomainError(f"embed_dim must be even, got {embed_dim}")
    freqs = np.geomspace(EMBED_FREQ_MIN, EMBED_FREQ_MAX, embed_dim // 2)
    u = np.atleast_1d(np.asarray(log_sigma, dtype=np.float64))
    phase = u[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
    return out[0] if np.isscalar(log_sigma) or np.ndim(log_sigma) == 0 else out


@dataclass
class MlpParams:
    """Weights of the residual MLP, in layer order.

    weights[l] has shape (fan_in, fan_out); the last layer is the linear
    output head, every earlier layer is followed by SiLU + LayerNorm with
    learnable scale/shift.
    """

    weights: list
    biases: list
    ln_scale: list
    ln_shift: list

    @property
    def n_hidden(self):
        return len(self.weights) - 1

    def named_arrays(self):
        """Deterministic (name, array) iteration used by Adam, clipping, I/O."""
        out = []
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{l}", w))
            out.append((f"b{l}", b))
        for l, (g, s) in enumerate(zip(self.ln_scale, self.ln_shift)):
            out.append((f"g{l}", g))
            out.append((f"s{l}", s))
        return out

    def copy(self):
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            ln_scale=[g.copy() for g in self.ln_scale],
            ln_shift=[s.copy() for s in self.ln_shift],
        )

    def zeros_like(self):
        return MlpParams(
            weights=[np.zeros_like(w) for w in self.weights],
            biases=[np.zeros_like(b) for b in self.biases],
            ln_scale=[np.zeros_like(g) for g in self.ln_scale],
            ln_shift=[np.zeros_like(s) for s in self.ln_shift],
        )


@dataclass
class DenoiserModel:
    params: MlpParams
    schedule: NoiseSchedule
    embed_dim: int

    @property
    def dim(self):
        return self.params.weights[-1].shape[1]

    def copy(self):
        return DenoiserModel(self.params.copy(), self.schedule, self.embed_dim)


@dataclass
class TrainConfig:
    batch_size: int = 1024
    steps: int = 16384
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (self.lr_init >= self.lr_final > 0.0):
            raise DomainError("require lr_init >= lr_final > 0")
        if self.grad_clip <= 0.0:
            raise DomainError("require grad_clip > 0")


def init_denoiser(dim, hidden=(256, 256, 256), embed_dim=64,
                  schedule=DEFAULT_SCHEDULE, rng=None) -> DenoiserModel:
    """Fan-in-scaled hidden layers, zero output head.

    With a zero head the fresh model is exactly the preconditioning skeleton
    d(x) = x / (sigma^2 + 1), a sensible starting denoiser.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if embed_dim % 2 != 0:
        raise DomainError(f"embed_dim must be even, got {embed_dim}")
    widths = [dim + embed_dim, *hidden, dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    weights[-1][:] = 0.0
    params = MlpParams(
        weights=weights,
        biases=biases,
        ln_scale=[np.ones(w) for w in hidden],
        ln_shift=[np.zeros(w) for w in hidden],
    )
    return DenoiserModel(params=params, schedule=schedule, embed_dim=embed_dim)


def _silu(z):
    s = expit(z)
    return z * s, s


def _h_forward(params: MlpParams, U, want_cache=False):
    """Forward pass of the residual MLP on a (B, in_dim) batch."""
    cache = [] if want_cache else None
    a = U
    for l in range(params.n_hidden):
        z = a @ params.weights[l] + params.biases[l]
        act, sig = _silu(z)
        mu = act.mean(axis=1, keepdims=True)
        var = act.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = (act - mu) * inv
        if want_cache:
            cache.append((a, z, sig, xhat, inv))
        a = xhat * params.ln_scale[l] + params.ln_shift[l]
    out = a @ params.weights[-1] + params.biases[-1]
    if want_cache:
        cache.append((a,))
    return out, cache


def _h_backward(params: MlpParams, cache, d_out, grads: Optional[MlpParams] = None):
    """Backprop d_out through the MLP; returns the input cotangent.

    When `grads` is given, parameter gradients are accumulated into it.
    """
    (a_last,) = cache[-1]
    if grads is not None:
        grads.weights[-1] += a_last.T @ d_out
        grads.biases[-1] += d_out.sum(axis=0)
    da = d_out @ params.weights[-1].T
    for l in range(params.n_hidden - 1, -1, -1):
        a_in, z, sig, xhat, inv = cache[l]
        if grads is not None:
            grads.ln_scale[l] += (da * xhat).sum(axis=0)
            grads.ln_shift[l] += da.sum(axis=0)
        dxhat = da * params.ln_scale[l]
        # layer norm backward over the feature axis
        dact = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        dz = dact * (sig * (1.0 + z * (1.0 - sig)))
        if grads is not None:
            grads.weights[l] += a_in.T @ dz
            grads.biases[l] += dz.sum(axis=0)
        da = dz @ params.weights[l].T
    return da


def _coefficients(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    c_skip = 1.0 / (sigma**2 + 1.0)
    c_in = 1.0 / np.sqrt(sigma**2 + 1.0)
    c_out = sigma * c_in
    return c_skip, c_in, c_out


def _denoise_at_sigma(model, X, sigma, want_cache=False):
    """Preconditioned forward at explicit noise levels.

    X: (B, N); sigma: scalar or (B,). Returns (D, ctx) where ctx holds what
    the VJP needs.
    """
    c_skip, c_in, c_out = _coefficients(sigma)
    col = lambda c: c[:, None] if np.ndim(c) == 1 else c
    emb = embed_log_sigma(np.log(np.broadcast_to(sigma, (X.shape[0],))), model.embed_dim)
    U = np.concatenate([col(c_in) * X, emb], axis=1)
    H, cache = _h_forward(model.params, U, want_cache=want_cache)
    D = col(c_skip) * X + col(c_out) * H
    return D, (cache, c_skip, c_in, c_out)


def _vjp_at_sigma(model, ctx, V):
    """Row-wise v^T dd/dx given the forward context for the same inputs."""
    cache, c_skip, c_in, c_out = ctx
    col = lambda c: c[:, None] if np.ndim(c) == 1 else c
    dU = _h_backward(model.params, cache, col(c_out) * V)
    n = model.dim
    return col(c_skip) * V + col(c_in) * dU[:, :n]


def _as_batch(x, dim, name="x"):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionMismatchError(f"{name} shape", expected=(dim,), got=x.shape)
    return x, single


def denoise(model: DenoiserModel, x_t, t):
    """Denoised mean estimate d(x_t, t); accepts a vector or a (B, N) batch."""
    X, single = _as_batch(x_t, model.dim, "x_t")
    sigma = model.schedule.sigma(t)
    D, _ = _denoise_at_sigma(model, X, sigma)
    return D[0] if single else D


def denoise_vjp(model: DenoiserModel, x_t, t, v):
    """v^T * d(denoise)/d(x_t) via reverse mode through the whole network."""
    X, single = _as_batch(x_t, model.dim, "x_t")
    V, vsingle = _as_batch(v, model.dim, "v")
    if X.shape != V.shape:
        raise DimensionMismatchError("v batch shape", expected=X.shape, got=V.shape)
    sigma = model.schedule.sigma(t)
    _, ctx = _denoise_at_sigma(model, X, sigma, want_cache=True)
    out = _vjp_at_sigma(model, ctx, V)
    return out[0] if (single and vsingle) else out


def score_from_denoiser(model: DenoiserModel, x_t, t):
    """Prior score estimate (denoise(x_t, t) - x_t) / sigma_t^2."""
    sigma = model.schedule.sigma(t)
    return (denoise(model, x_t, t) - np.asarray(x_t, dtype=np.float64)) / sigma**2


def _loss_and_grads(model, X0, T, Z, grads=None):
    """Weighted denoising loss on one batch; optionally fills param grads."""
    sched = model.schedule
    sigma = sched.sigma(T)
    lam = 1.0 / sigma**2 + 1.0
    Xt = X0 + sigma[:, None] * Z
    D, ctx = _denoise_at_sigma(model, Xt, sigma, want_cache=grads is not None)
    resid = D - X0
    loss = float(np.mean(lam * np.sum(resid**2, axis=1)))
    if grads is None:
        return loss
    B = X0.shape[0]
    dD = (2.0 / B) * lam[:, None] * resid
    cache, c_skip, c_in, c_out = ctx
    _h_backward(model.params, cache, c_out[:, None] * dD, grads=grads)
    return loss


def train_dsm(model: DenoiserModel, dataset, cfg: TrainConfig, rng,
              on_step=None) -> DenoiserModel:
    """Denoising score matching with Adam on minibatches.

    Per step: draw samples with replacement, times from Beta(3,3), standard
    normal noise; minimize mean(lambda_t * ||d(x + sigma_t z, t) - x||^2).
    Gradients are clipped in global norm, the learning rate decays linearly
    from lr_init to lr_final, and the optimizer state starts fresh (only the
    incoming parameters warm-start the fit). Deterministic given
    (rng seed, cfg, dataset).

    Args:
        model: starting point; not mutated.
        dataset: (n, N) array or list of latent vectors.
        cfg: TrainConfig.
        rng: numpy Generator consumed sequentially.
        on_step: optional callback(step, loss) for monitoring.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.size == 0:
        raise EmptyDatasetError("train_dsm: empty dataset")
    if data.ndim == 1:
        data = data[None, :]
    if data.shape[1] != model.dim:
        raise DimensionMismatchError("dataset sample dimension",
                                     expected=model.dim, got=data.shape[1])
    out = model.copy()
    params = out.params
    m_state = params.zeros_like()
    v_state = params.zeros_like()
    n = data.shape[0]
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        T = out.schedule.sample_train_time(rng, size=cfg.batch_size)
        Z = rng.standard_normal((cfg.batch_size, data.shape[1]))
        grads = params.zeros_like()
        loss = _loss_and_grads(out, data[idx], T, Z, grads=grads)

        gsq = 0.0
        for _, g in grads.named_arrays():
            gsq += float(np.sum(g * g))
        gnorm = np.sqrt(gsq)
        if gnorm > cfg.grad_clip:
            scale = cfg.grad_clip / gnorm
            for _, g in grads.named_arrays():
                g *= scale

        frac = step / (cfg.steps - 1) if cfg.steps > 1 else 0.0
        lr = cfg.lr_init + (cfg.lr_final - cfg.lr_init) * frac
        tcorr = step + 1
        for (_, p), (_, g), (_, m), (_, v) in zip(
                params.named_arrays(), grads.named_arrays(),
                m_state.named_arrays(), v_state.named_arrays()):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            mhat = m / (1.0 - cfg.beta1**tcorr)
            vhat = v / (1.0 - cfg.beta2**tcorr)
            p -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)

        if on_step is not None:
            on_step(step, loss)
    return out


def param_grad_check(model: DenoiserModel, x, t, rng=None, n_probe=16,
                     fd_step=1e-5) -> float:
    """Max relative error of analytic parameter gradients vs central FD.

    Builds one fixed single-sample batch from (x, t, rng) and probes
    n_probe randomly chosen parameter coordinates.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    X0, _ = _as_batch(x, model.dim)
    T = np.full(X0.shape[0], float(t))
    Z = rng.standard_normal(X0.shape)

    work = model.copy()
    grads = work.params.zeros_like()
    _loss_and_grads(work, X0, T, Z, grads=grads)

    arrays = work.params.named_arrays()
    garrays = dict(grads.named_arrays())
    sizes = [(name, arr.size) for name, arr in arrays]
    total = sum(s for _, s in sizes)
    picks = rng.choice(total, size=min(n_probe, total), replace=False)

    max_rel = 0.0
    for flat_idx in np.sort(picks):
        # locate the coordinate
        run = 0
        for name, size in sizes:
            if flat_idx < run + size:
                local = int(flat_idx - run)
                break
            run += size
        arr = dict(arrays)[name]
        orig = arr.flat[local]
        delta = fd_step * (1.0 + abs(orig))
        arr.flat[local] = orig + delta
        loss_plus = _loss_and_grads(work, X0, T, Z)
        arr.flat[local] = orig - delta
        loss_minus = _loss_and_grads(work, X0, T, Z)
        arr.flat[local] = orig
        fd = (loss_plus - loss_minus) / (2.0 * delta)
        an = garrays[name].flat[local]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        max_rel = max(max_rel, float(rel))
    return max_rel


def save_checkpoint(model: DenoiserModel, path, extra_header=None):
    """Write the versioned binary checkpoint (see diffem.container)."""
    header = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "embed_dim": model.embed_dim,
        "sigma_min": model.schedule.sigma_min,
        "sigma_max": model.schedule.sigma_max,
        "widths": [model.params.weights[0].shape[0]]
                  + [w.shape[1] for w in model.params.weights],
    }
    if extra_header:
        header.update(extra_header)
    write_container(path, "checkpoint", header, model.params.named_arrays())


def load_checkpoint(path) -> DenoiserModel:
    header, arrays = read_container(path, kind="checkpoint")
    widths = header["widths"]
    n_layers = len(widths) - 1
    params = MlpParams(
        weights=[arrays[f"w{l}"] for l in range(n_layers)],
        biases=[arrays[f"b{l}"] for l in range(n_layers)],
        ln_scale=[arrays[f"g{l}"] for l in range(n_layers - 1)],
        ln_shift=[arrays[f"s{l}"] for l in range(n_layers - 1)],
    )
    schedule = NoiseSchedule(header["sigma_min"], header["sigma_max"])
    return DenoiserModel(params=params, schedule=schedule,
                         embed_dim=int(header["embed_dim"]))
