"""Command-line entry point.

Subcommands: gen-data, gaussian-init, run-em, sample, fig2, sinkhorn, check.
Exit codes: 0 success, 2 configuration error, 3 runtime numerical error.
Every output file embeds the resolved configuration and a version string:
binary containers in their JSON header, CSVs as leading '#' comment lines.
"""

import argparse
import csv
import os
import sys

import numpy as np

from .config import (STREAM_EVAL, ExperimentConfig, parse_config_file,
                     version_string)
from .container import read_container, write_container
from .errors import ConfigError, DiffemError, NumericalError
from .evaluation import PointCloud, figure2_study, sinkhorn_divergence
from .manifold import generate_manifold_dataset, load_dataset, save_dataset

__all__ = ["main", "build_parser"]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="diffem",
        description="Train a diffusion prior from noisy linear observations "
                    "and sample posteriors with moment-matched guidance.")
    parser.add_argument("--config", help="key = value config file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="root seed override")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker count (default: available parallelism)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic observation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--obs-dim", type=int, default=None)
    p.add_argument("--n-obs", type=int, default=None)
    p.add_argument("--sigma-y", type=float, default=None)
    p.add_argument("--k-mix", type=int, default=None)
    p.add_argument("--bandwidth", type=float, default=None)

    p = sub.add_parser("gaussian-init", help="closed-form Gaussian prior fit")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)

    p = sub.add_parser("run-em", help="run the EM training pipeline")
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--k", type=int, default=None, help="EM iterations")
    p.add_argument("--train-steps", type=int, default=None)
    p.add_argument("--sampler-steps", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--cov-mode", default=None)
    p.add_argument("--solver-iters", type=int, default=None)
    p.add_argument("--resume", default=None, metavar="DIR",
                   help="continue from the last checkpoint in DIR")

    p = sub.add_parser("sample", help="draw samples from a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--observation", default=None,
                   help="dataset file; sample the posterior of record --record")
    p.add_argument("--record", type=int, default=0)
    p.add_argument("--sampler-steps", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--cov-mode", default=None)
    p.add_argument("--solver-iters", type=int, default=None)

    p = sub.add_parser("fig2", help="posterior-accuracy study over random manifolds")
    p.add_argument("--out", required=True)
    p.add_argument("--manifolds", type=int, default=64)
    p.add_argument("--sigma-grid", default="1e-2:1e1:8",
                   help="log grid lo:hi:count")
    p.add_argument("--modes", default="tweedie,sigma_t,shrink_identity,shrink_prior,dps")
    p.add_argument("--cloud-size", type=int, default=1024)
    p.add_argument("--sigma-y", type=float, default=None)

    p = sub.add_parser("sinkhorn", help="divergence between two sample files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--reg", type=float, default=1e-3)

    sub.add_parser("check", help="run the built-in invariant suite")
    return parser


def _resolved_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        cfg = parse_config_file(args.config, base=cfg)
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "latent_dim": getattr(args, "latent_dim", None),
        "obs_dim": getattr(args, "obs_dim", None),
        "n_obs": getattr(args, "n_obs", None),
        "sigma_y": getattr(args, "sigma_y", None),
        "k_mix": getattr(args, "k_mix", None),
        "bandwidth": getattr(args, "bandwidth", None),
        "em_iters": getattr(args, "k", None),
        "train_steps": getattr(args, "train_steps", None),
        "sampler_steps": getattr(args, "sampler_steps", None),
        "eta": getattr(args, "eta", None),
        "cov_mode": getattr(args, "cov_mode", None),
        "solver_iters": getattr(args, "solver_iters", None),
        "gaussian_init_iters": getattr(args, "iters", None),
        "gaussian_init_rank": getattr(args, "rank", None),
        "dataset_path": getattr(args, "dataset", None),
        "output_dir": getattr(args, "out", None),
    }
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    return cfg


def _csv_with_config(path, cfg, columns, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        for line in cfg.to_lines():
            f.write(f"# {line}\n")
        f.write(f"# version = {version_string()}\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])


def cmd_gen_data(args):
    cfg = _resolved_config(args)
    dataset = generate_manifold_dataset(cfg.latent_dim, cfg.obs_dim, cfg.n_obs,
                                        cfg.sigma_y, cfg.seed,
                                        order=cfg.manifold_order, k_mix=cfg.k_mix,
                                        bandwidth=cfg.bandwidth)
    dataset.meta["config"] = cfg.echo_dict()
    dataset.meta["version"] = version_string()
    save_dataset(dataset, args.out)
    y, A = dataset.stacked()
    checksum = float(np.sum(y) + np.sum(A))
    print(f"wrote {args.out}: n_obs={len(dataset)} latent_dim={dataset.latent_dim} "
          f"obs_dim={A.shape[1]} checksum={checksum:.12e}")
    return 0


def cmd_gaussian_init(args):
    from .em import gaussian_em_init, gaussian_log_evidence

    cfg = _resolved_config(args)
    dataset = load_dataset(args.dataset)
    fit = gaussian_em_init(dataset, iters=cfg.gaussian_init_iters,
                           rank=cfg.gaussian_init_rank or None)
    blocks = [("mean", fit.mean), ("cov", fit.cov)]
    header = {"has_factors": fit.factors is not None,
              "config": cfg.echo_dict(), "version": version_string()}
    if fit.factors is not None:
        blocks.append(("factors", fit.factors))
        header["noise_floor"] = fit.noise_floor
    write_container(args.out, "gaussian-fit", header, blocks)
    ev = gaussian_log_evidence(fit.mean, fit.cov, dataset)
    print(f"wrote {args.out}: mean-log-evidence={ev:.6f}")
    return 0


def cmd_run_em(args):
    from .em import run_em

    cfg = _resolved_config(args)
    resume = args.resume is not None
    if resume:
        cfg.output_dir = args.resume
    if not cfg.dataset_path:
        raise ConfigError("run-em requires --dataset (or dataset_path in the config)")
    dataset = load_dataset(cfg.dataset_path)

    def report(state):
        row = state.metrics[-1]
        print(f"iteration {row['iteration']}: loss {row['loss_first']} -> "
              f"{row['loss_last']}, divergence {row['divergence']}")

    state = run_em(dataset, cfg, resume=resume, on_iteration=report)
    if state.metrics:
        print("final:", state.metrics[-1])
    else:
        print("no iterations run (k = 0)")
    return 0


def cmd_sample(args):
    from .net import denoise, load_checkpoint
    from .posterior import (CovarianceMode, DenoiserScoreSource,
                            PosteriorScoreConfig, posterior_score_batch)
    from .sampler import SamplerConfig, sample_posterior_batch

    cfg = _resolved_config(args)
    model = load_checkpoint(args.checkpoint)
    sampler_cfg = SamplerConfig(steps=cfg.sampler_steps, eta=cfg.eta,
                                corrector_steps=cfg.corrector_steps,
                                corrector_step_scale=cfg.corrector_step_scale)
    rngs = [np.random.default_rng(np.random.SeedSequence(
        [cfg.seed, STREAM_EVAL, 9000, i])) for i in range(args.n)]

    if args.observation is None:
        def score(X, t):
            return (denoise(model, X, t) - X) / model.schedule.sigma(t)**2
        mode = "prior"
    else:
        dataset = load_dataset(args.observation)
        obs = dataset.observations[args.record]
        src = DenoiserScoreSource(model)
        post_cfg = PosteriorScoreConfig(mode=CovarianceMode(cfg.cov_mode),
                                        solver=cfg.solver,
                                        solver_iters=cfg.solver_iters,
                                        solver_eps=cfg.solver_eps)
        y_rep = np.repeat(obs.y[None, :], args.n, axis=0)
        A_rep = np.repeat(obs.A[None, :, :], args.n, axis=0)

        def score(X, t):
            return posterior_score_batch(src, post_cfg, X, t, y_rep, A_rep,
                                         obs.sigma_y)
        mode = "posterior"

    samples = sample_posterior_batch(score, model.dim, model.schedule,
                                     sampler_cfg, rngs)
    write_container(args.out, "samples",
                    {"mode": mode, "n": args.n, "config": cfg.echo_dict(),
                     "version": version_string()},
                    [("samples", samples)])
    print(f"wrote {args.out}: {args.n} samples of dim {model.dim} ({mode} mode)")
    return 0


def cmd_fig2(args):
    cfg = _resolved_config(args)
    lo, hi, count = args.sigma_grid.split(":")
    sigmas = np.geomspace(float(lo), float(hi), int(count))
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    workers = cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)
    kwargs = {}
    if args.sigma_y is not None:
        kwargs["sigma_y"] = args.sigma_y
    rows = figure2_study(args.manifolds, sigmas, modes, seed=cfg.seed,
                         cloud_size=args.cloud_size, reg=cfg.sinkhorn_reg,
                         workers=workers, **kwargs)
    columns = ["manifold_seed", "sigma", "mode", "p25", "p50", "p75", "ess"]
    _csv_with_config(args.out, cfg, columns, rows)
    print(f"wrote {args.out}: {len(rows)} rows "
          f"({args.manifolds} manifolds x {len(sigmas)} sigmas x {len(modes)} modes)")
    return 0


def cmd_sinkhorn(args):
    _, arrays_a = read_container(args.a)
    _, arrays_b = read_container(args.b)
    a = PointCloud(arrays_a["samples"])
    b = PointCloud(arrays_b["samples"])
    res = sinkhorn_divergence(a, b, reg=args.reg)
    print(f"divergence = {res.value:.9g} (converged={res.converged}, "
          f"violation={res.violation:.2e}, iterations={res.iterations})")
    return 0


def cmd_check(args):
    from .checks import run_checks

    results = run_checks()
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
        failed += 0 if ok else 1
    if failed:
        print(f"{failed}/{len(results)} checks failed")
        return 3
    print(f"all {len(results)} checks passed")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "gaussian-init": cmd_gaussian_init,
    "run-em": cmd_run_em,
    "sample": cmd_sample,
    "fig2": cmd_fig2,
    "sinkhorn": cmd_sinkhorn,
    "check": cmd_check,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except DiffemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
