"""Fast built-in invariant suite behind the `check` subcommand."""

import numpy as np

from . import gmm, linalg, net
from .evaluation import PointCloud, sinkhorn_divergence
from .manifold import Observation
from .posterior import (CovarianceMode, GmmScoreSource, likelihood_cov_operator,
                        posterior_score)
from .posterior import PosteriorScoreConfig
from .schedule import NoiseSchedule

__all__ = ["run_checks"]


def run_checks(seed=0):
    """Run the quick invariant suite; returns a list of (name, ok, detail)."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, ok, detail=""):
        results.append((name, bool(ok), detail))

    # schedule: log sigma affine in t
    sched = NoiseSchedule()
    ts = np.linspace(0, 1, 11)
    logs = np.log([sched.sigma(t) for t in ts])
    expected = (1 - ts) * np.log(sched.sigma_min) + ts * np.log(sched.sigma_max)
    err = float(np.max(np.abs(logs - expected)))
    check("schedule log-affine", err < 1e-12, f"max dev {err:.2e}")

    # cg vs dense factorization
    B = rng.standard_normal((5, 5))
    M = B @ B.T + np.eye(5)
    b = rng.standard_normal(5)
    x = linalg.cg_solve(linalg.operator_from_matrix(M), b, max_iters=50,
                        eps=1e-14).solution
    err = float(np.linalg.norm(x - linalg.solve_spd(M, b)) / np.linalg.norm(x))
    check("cg matches dense solve", err < 1e-8, f"rel err {err:.2e}")

    # gmres vs dense LU on a non-symmetric system
    M2 = rng.standard_normal((6, 6)) + 6 * np.eye(6)
    b2 = rng.standard_normal(6)
    x2 = linalg.gmres_solve(linalg.operator_from_matrix(M2), b2, max_iters=6,
                            eps=0.0).solution
    err = float(np.linalg.norm(x2 - np.linalg.solve(M2, b2)))
    check("gmres matches dense solve", err < 1e-7, f"abs err {err:.2e}")

    # moment identities on a random mixture
    prior = gmm.GmmPrior(centers=rng.standard_normal((6, 3)), bandwidth=0.3)
    worst = 0.0
    for _ in range(20):
        xp = 2.0 * rng.standard_normal(3)
        sg = float(rng.uniform(0.05, 2.0))
        pm = gmm.posterior_moments(prior, xp, sg)
        tweedie = xp + sg**2 * gmm.score_xt(prior, xp, sg)
        worst = max(worst, float(np.max(np.abs(pm.mean - tweedie))))
    check("posterior mean matches score identity", worst < 1e-10,
          f"max dev {worst:.2e}")

    # denoiser VJP vs finite differences
    model = net.init_denoiser(3, hidden=(32, 32), embed_dim=16,
                              rng=np.random.default_rng(seed + 1))
    for w in model.params.weights:
        w += 0.2 * np.random.default_rng(seed + 2).standard_normal(w.shape)
    xp = rng.standard_normal(3)
    delta = 1e-5
    J = np.zeros((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = delta
        J[:, j] = (net.denoise(model, xp + e, 0.5) - net.denoise(model, xp - e, 0.5)) \
            / (2 * delta)
    worst = 0.0
    for i in range(3):
        ei = np.zeros(3)
        ei[i] = 1.0
        v = net.denoise_vjp(model, xp, 0.5, ei)
        worst = max(worst, float(np.max(np.abs(v - J[i, :]))))
    check("denoiser vjp matches finite differences", worst < 1e-4,
          f"max dev {worst:.2e}")

    # likelihood operator: linear and SPD on an exact source
    src = GmmScoreSource(prior)
    obs = Observation(y=np.array([0.2, -0.1]),
                      A=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]) / 1.0,
                      sigma_y=0.1)
    op = likelihood_cov_operator(src, rng.standard_normal(3), 0.5, obs,
                                 CovarianceMode.tweedie())
    defect = linalg.linearity_defect(op, rng)
    check("likelihood operator linear", defect < 1e-6, f"defect {defect:.2e}")
    spd_ok = all(float(v @ op(v)) > 0 for v in rng.standard_normal((20, 2)))
    check("likelihood operator positive definite", spd_ok)

    # posterior score with zero A reduces to the prior score
    obs0 = Observation(y=np.array([0.3]), A=np.zeros((1, 3)), sigma_y=0.1)
    xq = rng.standard_normal(3)
    cfg = PosteriorScoreConfig(mode=CovarianceMode.tweedie())
    s = posterior_score(src, cfg, xq, 0.5, obs0)
    s_prior = gmm.score_xt(prior, xq, src.schedule.sigma(0.5))
    err = float(np.max(np.abs(s - s_prior)))
    check("uninformative observation gives prior score", err < 1e-10,
          f"max dev {err:.2e}")

    # debiased divergence: zero on identical clouds, symmetric
    pts = rng.standard_normal((64, 2))
    cloud = PointCloud(pts)
    other = PointCloud(pts + 0.3 * rng.standard_normal(pts.shape))
    zero = sinkhorn_divergence(cloud, cloud, reg=1e-2).value
    fwd = sinkhorn_divergence(cloud, other, reg=1e-2).value
    rev = sinkhorn_divergence(other, cloud, reg=1e-2).value
    check("divergence zero on identical clouds", abs(zero) < 1e-9,
          f"value {zero:.2e}")
    check("divergence symmetric", abs(fwd - rev) < 1e-9,
          f"asym {abs(fwd - rev):.2e}")
    return results
