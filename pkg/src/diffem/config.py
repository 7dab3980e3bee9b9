"""Experiment configuration, config-file parsing, and seed substreams.

Config files are plain ``key = value`` lines ('#' starts a comment); keys
match ExperimentConfig field names, and command-line flags override file
values. All randomness derives from one root seed through named
substreams so that runs, resumes, and worker counts reproduce bitwise.
"""

import dataclasses
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError

__all__ = [
    "ExperimentConfig",
    "parse_config_file",
    "write_config_file",
    "substream",
    "STREAM_DATA",
    "STREAM_INIT",
    "STREAM_ESTEP",
    "STREAM_TRAIN",
    "STREAM_EVAL",
    "version_string",
]

# named substream tags (second entry of the seed path)
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_ESTEP = 3
STREAM_TRAIN = 4
STREAM_EVAL = 5


def substream(seed, *path):
    """Independent Generator for the (seed, *path) stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def estep_seed_base(seed, iteration):
    """Integer base for per-record chain seeds (base + record_index * S + s)."""
    ss = np.random.SeedSequence([int(seed), STREAM_ESTEP, int(iteration)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def version_string():
    """git-describe style identifier embedded in every output file."""
    try:
        import subprocess

        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"diffem-0.1.0+{out.stdout.strip()}"
    except Exception:
        pass
    return "diffem-0.1.0"


@dataclass
class ExperimentConfig:
    # dataset generation
    latent_dim: int = 5
    obs_dim: int = 2
    n_obs: int = 65536
    sigma_y: float = 1e-2
    manifold_order: int = 4
    k_mix: int = 256
    bandwidth: float = 0.05
    # noise schedule
    sigma_min: float = 1e-3
    sigma_max: float = 1e2
    # denoiser network
    hidden: Tuple[int, ...] = (256, 256, 256)
    embed_dim: int = 64
    # training (one EM iteration)
    batch_size: int = 1024
    train_steps: int = 16384
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    grad_clip: float = 1.0
    # sampling
    sampler_steps: int = 64
    eta: float = 1.0
    corrector_steps: int = 0
    corrector_step_scale: float = 0.01
    # posterior score
    cov_mode: str = "tweedie"
    solver: str = "cg"
    solver_iters: int = 3
    solver_eps: float = 1e-6
    # EM loop
    em_iters: int = 32
    samples_per_obs: int = 1
    gaussian_init_iters: int = 32
    gaussian_init_rank: int = 0  # 0 means full rank
    # evaluation
    eval_samples: int = 2048
    sinkhorn_reg: float = 1e-3
    # plumbing
    seed: int = 0
    workers: int = 0  # 0 means available parallelism
    output_dir: str = "runs/exp"
    dataset_path: str = ""

    def to_lines(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return lines

    def as_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def echo_dict(self):
        """Config as embedded in output files: path fields excluded so that
        identical runs produce byte-identical artifacts wherever they live."""
        d = self.as_dict()
        d.pop("output_dir", None)
        d.pop("dataset_path", None)
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name, raw):
    f = _FIELDS[name]
    raw = raw.strip()
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        if f.name == "hidden":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from exc


def parse_config_file(path, base=None) -> ExperimentConfig:
    """Read ``key = value`` lines into an ExperimentConfig."""
    cfg = dataclasses.replace(base) if base is not None else ExperimentConfig()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, raw))
    return cfg


def write_config_file(cfg: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(cfg.to_lines()) + "\n")
