import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from diffem import evaluation, gmm
from diffem.errors import DomainError, LowEffectiveSampleSizeError
from diffem.evaluation import PointCloud, figure2_study, resample_approx_posterior, \
    sinkhorn_divergence
from diffem.manifold import Observation
from diffem.posterior import CovarianceMode


def exact_ot_cost(a, b):
    """Hungarian assignment: exact OT between equal-size uniform clouds."""
    C = np.sum((a[:, None, :] - b[None, :, :])**2, axis=2)
    ri, ci = linear_sum_assignment(C)
    return C[ri, ci].mean()


def test_identical_clouds_zero():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.standard_normal((128, 3)))
    res = sinkhorn_divergence(cloud, cloud, reg=1e-3)
    assert abs(res.value) < 1e-9


def test_single_points_squared_distance():
    a = PointCloud(np.array([[0.0, 0.0]]))
    b = PointCloud(np.array([[0.6, -0.8]]))  # distance 1
    res = sinkhorn_divergence(a, b, reg=1e-4)
    assert res.value == pytest.approx(1.0, abs=1e-6)


def test_matches_exact_ot_oracle():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((256, 2))
    b = rng.standard_normal((256, 2)) + np.array([0.7, -0.2])
    res = sinkhorn_divergence(PointCloud(a), PointCloud(b), reg=1e-4,
                              max_iters=300)
    exact = exact_ot_cost(a, b)
    assert abs(res.value - exact) / exact < 0.02


def test_symmetry():
    rng = np.random.default_rng(2)
    a = PointCloud(rng.standard_normal((96, 3)))
    b = PointCloud(rng.standard_normal((96, 3)) + 0.4)
    fwd = sinkhorn_divergence(a, b, reg=1e-2)
    rev = sinkhorn_divergence(b, a, reg=1e-2)
    assert abs(fwd.value - rev.value) < 1e-9


def test_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = PointCloud(rng.standard_normal((64, 2)))
        b = PointCloud(rng.standard_normal((64, 2)))
        assert sinkhorn_divergence(a, b, reg=1e-2).value > -1e-9


def test_nonconvergence_reports_flag():
    rng = np.random.default_rng(4)
    a = PointCloud(rng.standard_normal((64, 2)))
    b = PointCloud(rng.standard_normal((64, 2)) + 5.0)
    res = sinkhorn_divergence(a, b, reg=1e-3, max_iters=2)
    assert not res.converged
    assert res.violation > 0


def test_weighted_clouds_supported():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((32, 2))
    w = rng.uniform(0.5, 1.5, 32)
    w /= w.sum()
    a = PointCloud(pts, weights=w)
    assert abs(sinkhorn_divergence(a, a, reg=1e-2).value) < 1e-9


def test_invalid_weights_rejected():
    with pytest.raises(DomainError):
        PointCloud(np.zeros((2, 2)), weights=np.array([0.9, 0.3]))


def gaussian_case(sigma=0.5, sigma_y=0.1):
    prior = gmm.GmmPrior(centers=np.array([[0.3, -0.2, 0.4]]), bandwidth=0.6)
    A = np.array([[0.6, 0.0, 0.8]])
    obs = Observation(y=np.array([0.5]), A=A, sigma_y=sigma_y)
    return prior, obs, sigma


def test_resample_tweedie_matches_exact_gaussian_moments():
    # single component: the importance weights are exact, so the resampled
    # cloud reproduces the exact smoothed posterior within Monte-Carlo error
    prior, obs, sigma = gaussian_case()
    n = 4096
    cloud = resample_approx_posterior(prior, obs, sigma, CovarianceMode.tweedie(),
                                      n, np.random.default_rng(0))
    exact = gmm.exact_diffused_posterior(prior, obs, sigma)
    mean_exact = exact.mean()
    cov_exact = exact.cov()
    std = np.sqrt(np.diag(cov_exact))
    assert np.max(np.abs(cloud.points.mean(axis=0) - mean_exact) / std) \
        < 3.0 / np.sqrt(n) * 3
    emp_cov = np.cov(cloud.points.T)
    assert np.linalg.norm(emp_cov - cov_exact) / np.linalg.norm(cov_exact) < 0.15


def test_resample_uninformative_matches_diffused_prior():
    prior, _, sigma = gaussian_case()
    obs = Observation(y=np.array([0.5]), A=np.zeros((1, 3)), sigma_y=0.1)
    n = 4096
    cloud = resample_approx_posterior(prior, obs, sigma, CovarianceMode.dps(),
                                      n, np.random.default_rng(1))
    # weights are uniform, so the cloud is a plain sample of p(x_t)
    var = prior.bandwidth**2 + sigma**2
    emp = np.cov(cloud.points.T)
    assert np.linalg.norm(emp - var * np.eye(3)) / var < 0.15
    assert np.max(np.abs(cloud.points.mean(axis=0) - prior.centers[0])) < 0.1


def test_resample_deterministic():
    prior, obs, sigma = gaussian_case()
    a = resample_approx_posterior(prior, obs, sigma, CovarianceMode.sigma_t(),
                                  256, np.random.default_rng(7))
    b = resample_approx_posterior(prior, obs, sigma, CovarianceMode.sigma_t(),
                                  256, np.random.default_rng(7))
    np.testing.assert_array_equal(a.points, b.points)


def test_resample_ess_gate():
    # concentrate the likelihood far from the prior so weights collapse
    prior = gmm.GmmPrior(centers=np.array([[0.0, 0.0]]), bandwidth=0.1)
    obs = Observation(y=np.array([50.0]), A=np.array([[1.0, 0.0]]), sigma_y=1e-4)
    with pytest.raises(LowEffectiveSampleSizeError) as exc:
        resample_approx_posterior(prior, obs, 0.1, CovarianceMode.dps(), 256,
                                  np.random.default_rng(0))
    assert exc.value.ess is not None


def test_resample_converges_to_exact_with_exact_weights():
    # with exact weights the resampled cloud is as close to an exact cloud as
    # two independent exact clouds are to each other (factor 2 slack)
    prior, obs, sigma = gaussian_case()
    exact = gmm.exact_diffused_posterior(prior, obs, sigma)
    rng = np.random.default_rng(2)
    n = 1024
    e1 = PointCloud(exact.sample(rng, n))
    e2 = PointCloud(exact.sample(rng, n))
    base = sinkhorn_divergence(e1, e2, reg=1e-2).value
    cloud = resample_approx_posterior(prior, obs, sigma, CovarianceMode.tweedie(),
                                      n, np.random.default_rng(3),
                                      proposal_factor=64)
    got = sinkhorn_divergence(cloud, e1, reg=1e-2).value
    assert got < 2.0 * base


def test_figure2_study_shape_and_determinism():
    sigmas = [0.1, 0.5]
    modes = ["tweedie", "sigma_t"]
    rows = figure2_study(3, sigmas, modes, seed=5, cloud_size=64,
                         proposal_factor=16, sinkhorn_iters=20)
    assert len(rows) == len(sigmas) * len(modes)
    for row in rows:
        assert set(row) >= {"manifold_seed", "sigma", "mode", "p25", "p50",
                            "p75", "ess"}
        assert row["p25"] <= row["p50"] <= row["p75"]
    again = figure2_study(3, sigmas, modes, seed=5, cloud_size=64,
                          proposal_factor=16, sinkhorn_iters=20)
    assert rows == again
    parallel = figure2_study(3, sigmas, modes, seed=5, cloud_size=64,
                             proposal_factor=16, sinkhorn_iters=20, workers=3)
    assert rows == parallel


def test_figure2_study_mode_ordering_smoke():
    # small smoke version of the ordering claim at mid-grid noise
    rows = figure2_study(6, [0.3], ["tweedie", "sigma_t", "dps"], seed=1,
                         cloud_size=128, proposal_factor=32, sinkhorn_iters=40)
    med = {r["mode"]: r["p50"] for r in rows}
    assert med["tweedie"] <= med["sigma_t"]
    assert med["tweedie"] <= med["dps"]
