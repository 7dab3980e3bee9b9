import numpy as np
import pytest

from diffem import gmm
from diffem.errors import DomainError, NotSpdError
from diffem.manifold import Observation


@pytest.fixture
def prior3():
    rng = np.random.default_rng(1)
    return gmm.GmmPrior(centers=rng.standard_normal((4, 3)), bandwidth=0.3)


def gaussian_logpdf(x, mu, var):
    n = len(x)
    return -0.5 * (np.sum((x - mu)**2) / var + n * np.log(2 * np.pi * var))


def test_log_p_xt_single_component_mode():
    prior = gmm.GmmPrior(centers=np.array([[0.5, -0.2]]), bandwidth=0.4)
    val = gmm.log_p_xt(prior, np.array([0.5, -0.2]), 0.0)
    assert val == pytest.approx(-np.log(2 * np.pi * 0.4**2), rel=1e-12)


def test_log_p_xt_two_symmetric_components():
    mu = np.array([0.8, 0.0])
    prior = gmm.GmmPrior(centers=np.stack([mu, -mu]), bandwidth=0.3)
    # at the midpoint both components contribute the density at distance ||mu||
    val = gmm.log_p_xt(prior, np.zeros(2), 0.0)
    expected = gaussian_logpdf(mu, np.zeros(2), 0.09)
    assert val == pytest.approx(expected, rel=1e-12)


def test_log_p_xt_matches_quadrature_1d():
    prior = gmm.GmmPrior(centers=np.array([[-0.7], [0.9]]), bandwidth=0.25,
                         weights=np.array([0.3, 0.7]))
    sigma = 0.5
    grid = np.linspace(-6, 6, 20001)
    dx = grid[1] - grid[0]
    px = np.exp([gmm.log_p_xt(prior, np.array([g]), 0.0) for g in grid])
    for xt in (-0.5, 0.2, 1.4):
        kernel = np.exp(-0.5 * (xt - grid)**2 / sigma**2) / np.sqrt(2 * np.pi * sigma**2)
        quad = np.log(np.sum(px * kernel) * dx)
        assert gmm.log_p_xt(prior, np.array([xt]), sigma) == pytest.approx(quad, abs=1e-6)


def test_score_single_component(prior3):
    prior = gmm.GmmPrior(centers=np.array([[1.0, 2.0, 3.0]]), bandwidth=0.5)
    x = np.array([0.0, 1.0, 5.0])
    sigma = 0.4
    expected = -(x - prior.centers[0]) / (0.25 + 0.16)
    np.testing.assert_allclose(gmm.score_xt(prior, x, sigma), expected, rtol=1e-12)


def test_score_matches_finite_differences(prior3):
    rng = np.random.default_rng(2)
    h = 1e-6
    for sigma in (0.1, 0.5):
        x = rng.standard_normal(3)
        grad = gmm.score_xt(prior3, x, sigma)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd = (gmm.log_p_xt(prior3, x + e, sigma)
                  - gmm.log_p_xt(prior3, x - e, sigma)) / (2 * h)
            assert grad[j] == pytest.approx(fd, abs=1e-6)


def test_score_zero_on_symmetry_axis():
    mu = np.array([1.0, 0.0])
    prior = gmm.GmmPrior(centers=np.stack([mu, -mu]), bandwidth=0.3)
    s = gmm.score_xt(prior, np.array([0.0, 0.0]), 0.2)
    assert s[0] == pytest.approx(0.0, abs=1e-14)


def test_posterior_moments_single_component_conjugate():
    prior = gmm.GmmPrior(centers=np.array([[2.0, -1.0]]), bandwidth=0.5)
    x = np.array([1.0, 1.0])
    sigma = 0.3
    pm = gmm.posterior_moments(prior, x, sigma)
    b2, s2 = 0.25, 0.09
    expected_mean = (s2 * prior.centers[0] + b2 * x) / (b2 + s2)
    np.testing.assert_allclose(pm.mean, expected_mean, rtol=1e-12)
    np.testing.assert_allclose(pm.cov, (b2 * s2 / (b2 + s2)) * np.eye(2), atol=1e-14)


def test_posterior_mean_tweedie_identity(prior3):
    rng = np.random.default_rng(3)
    for sigma in (0.05, 0.3, 1.0, 3.0):
        x = 2.0 * rng.standard_normal(3)
        pm = gmm.posterior_moments(prior3, x, sigma)
        tweedie = x + sigma**2 * gmm.score_xt(prior3, x, sigma)
        np.testing.assert_allclose(pm.mean, tweedie, atol=1e-10)


def test_posterior_cov_hessian_identity(prior3):
    # V[x|x_t] = sigma^2 I + sigma^4 * hessian(log p), hessian by central FD
    rng = np.random.default_rng(4)
    for sigma in (0.3, 1.0):
        x = rng.standard_normal(3)
        pm = gmm.posterior_moments(prior3, x, sigma)
        h = 1e-3 * np.sqrt(prior3.bandwidth**2 + sigma**2)
        H = np.zeros((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            H[:, j] = (gmm.score_xt(prior3, x + e, sigma)
                       - gmm.score_xt(prior3, x - e, sigma)) / (2 * h)
        expected = sigma**2 * np.eye(3) + sigma**4 * H
        assert np.max(np.abs(pm.cov - expected)) < 1e-5 * np.linalg.norm(pm.cov)


def test_posterior_cov_psd(prior3):
    rng = np.random.default_rng(5)
    for _ in range(10):
        pm = gmm.posterior_moments(prior3, 2 * rng.standard_normal(3),
                                   float(rng.uniform(0.05, 2)))
        evals = np.linalg.eigvalsh(pm.cov)
        assert evals.min() >= -1e-10


def test_noise_composition_identity(prior3):
    # smoothing by sigma_b equals a wider-bandwidth prior at sigma = 0
    sigma_b = 0.7
    widened = gmm.GmmPrior(centers=prior3.centers,
                           bandwidth=np.sqrt(prior3.bandwidth**2 + sigma_b**2),
                           weights=prior3.weights)
    x = np.array([0.3, -0.8, 0.1])
    assert gmm.log_p_xt(prior3, x, sigma_b) == pytest.approx(
        gmm.log_p_xt(widened, x, 0.0), rel=1e-12)


def test_exact_posterior_near_exact_observation():
    prior = gmm.GmmPrior(centers=np.array([[0.2, -0.4]]), bandwidth=1.0)
    y = np.array([0.9, 0.1])
    obs = Observation(y=y, A=np.eye(2), sigma_y=1e-6)
    sigma = 0.3
    post = gmm.exact_diffused_posterior(prior, obs, sigma)
    np.testing.assert_allclose(post.means[0], y, atol=1e-5)
    np.testing.assert_allclose(post.covs[0], sigma**2 * np.eye(2), atol=1e-5)


def test_exact_posterior_matches_quadrature_1d():
    prior = gmm.GmmPrior(centers=np.array([[-0.6], [0.8]]), bandwidth=0.3,
                         weights=np.array([0.45, 0.55]))
    obs = Observation(y=np.array([0.2]), A=np.array([[1.0]]), sigma_y=0.2)
    sigma = 0.4
    post = gmm.exact_diffused_posterior(prior, obs, sigma)

    grid = np.linspace(-5, 5, 4001)
    dx = grid[1] - grid[0]
    # p(x_t, y) = int p(x_t | x) p(y | x) p(x) dx on the grid
    px = np.exp([gmm.log_p_xt(prior, np.array([g]), 0.0) for g in grid])
    lik = np.exp(-0.5 * (obs.y[0] - grid)**2 / 0.04) / np.sqrt(2 * np.pi * 0.04)
    xt_grid = np.linspace(-4, 4, 801)
    joint = np.zeros_like(xt_grid)
    for i, xt in enumerate(xt_grid):
        kern = np.exp(-0.5 * (xt - grid)**2 / sigma**2) / np.sqrt(2 * np.pi * sigma**2)
        joint[i] = np.sum(px * lik * kern) * dx
    joint /= np.sum(joint) * (xt_grid[1] - xt_grid[0])
    dens = np.exp(post.log_density(xt_grid[:, None]))
    np.testing.assert_allclose(dens, joint, atol=1e-5)


def test_exact_posterior_weights_simplex(prior3):
    obs = Observation(y=np.array([0.1]), A=np.array([[0.6, 0.0, 0.8]]), sigma_y=0.05)
    post = gmm.exact_diffused_posterior(prior3, obs, 0.2)
    assert post.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(post.weights >= 0)


def test_exact_posterior_rejects_degenerate():
    # bandwidth/noise small enough to overflow the posterior precision
    prior = gmm.GmmPrior(centers=np.array([[0.0, 0.0]]), bandwidth=1e-160)
    obs = Observation(y=np.array([0.0]), A=np.array([[1.0, 0.0]]), sigma_y=1e-160)
    with np.errstate(over="ignore"):
        with pytest.raises(NotSpdError):
            gmm.exact_diffused_posterior(prior, obs, 0.0)


def test_full_cov_mixture_rejects_singular_component():
    with pytest.raises(NotSpdError):
        gmm.GaussianMixtureFullCov(means=np.zeros((1, 2)),
                                   covs=np.zeros((1, 2, 2)),
                                   weights=np.array([1.0]))


def test_sample_prior_mean_bound():
    prior = gmm.GmmPrior(centers=np.zeros((1, 4)), bandwidth=0.5)
    rng = np.random.default_rng(0)
    samples = gmm.sample_prior(prior, rng, 100000)
    assert np.linalg.norm(samples.mean(axis=0)) < 0.02 * 0.5 * np.sqrt(4)


def test_sample_prior_component_frequencies():
    weights = np.array([0.2, 0.5, 0.3])
    prior = gmm.GmmPrior(centers=np.array([[0.0], [100.0], [200.0]]),
                         bandwidth=0.1, weights=weights)
    rng = np.random.default_rng(1)
    n = 30000
    samples = gmm.sample_prior(prior, rng, n)
    counts = np.array([(np.abs(samples[:, 0] - c) < 50).sum()
                       for c in (0.0, 100.0, 200.0)])
    for k in range(3):
        std = np.sqrt(n * weights[k] * (1 - weights[k]))
        assert abs(counts[k] - n * weights[k]) < 3 * std


def test_sample_prior_deterministic():
    prior = gmm.GmmPrior(centers=np.array([[0.0, 1.0], [2.0, -1.0]]), bandwidth=0.2)
    a = gmm.sample_prior(prior, np.random.default_rng(9), 32)
    b = gmm.sample_prior(prior, np.random.default_rng(9), 32)
    np.testing.assert_array_equal(a, b)


def test_invalid_prior_rejected():
    with pytest.raises(DomainError):
        gmm.GmmPrior(centers=np.zeros((2, 2)), bandwidth=0.0)
    with pytest.raises(DomainError):
        gmm.GmmPrior(centers=np.zeros((2, 2)), bandwidth=0.1,
                     weights=np.array([0.5, 0.6]))
