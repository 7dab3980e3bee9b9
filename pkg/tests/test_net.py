import numpy as np
import pytest

from diffem import net
from diffem.errors import DomainError, EmptyDatasetError
from diffem.schedule import NoiseSchedule


def small_model(dim=2, seed=0, randomize=False):
    model = net.init_denoiser(dim, hidden=(16, 16), embed_dim=8,
                              rng=np.random.default_rng(seed))
    if randomize:
        rng = np.random.default_rng(seed + 100)
        for w in model.params.weights:
            w += 0.3 * rng.standard_normal(w.shape)
        for b in model.params.biases:
            b += 0.1 * rng.standard_normal(b.shape)
    return model


def test_embedding_at_zero():
    e = net.embed_log_sigma(0.0, 16)
    np.testing.assert_allclose(e[:8], 0.0)
    np.testing.assert_allclose(e[8:], 1.0)


def test_embedding_deterministic_and_bounded():
    a = net.embed_log_sigma(1.7, 64)
    b = net.embed_log_sigma(1.7, 64)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a) <= 1.0)


def test_embedding_separates_inputs():
    a = net.embed_log_sigma(np.log(0.5), 64)
    b = net.embed_log_sigma(np.log(0.7), 64)
    assert np.linalg.norm(a - b) > 0.0


def test_embedding_rejects_odd_dim():
    with pytest.raises(DomainError):
        net.embed_log_sigma(0.0, 7)


def test_zero_head_is_preconditioning_skeleton():
    model = small_model()
    x = np.array([0.4, -1.2])
    for t in (0.1, 0.5, 0.9):
        sigma = model.schedule.sigma(t)
        np.testing.assert_allclose(net.denoise(model, x, t), x / (sigma**2 + 1.0),
                                   atol=1e-12)


def test_denoise_small_sigma_limit():
    model = small_model(randomize=True)
    x = np.array([0.8, 0.3])
    d = net.denoise(model, x, 0.0)  # sigma = 1e-3
    assert np.linalg.norm(d - x) <= 1e-3 * (np.linalg.norm(x) + 10.0)


def test_preconditioning_coefficient_limits():
    sched = NoiseSchedule()
    for t, expect_skip in ((0.0, 1.0), (1.0, 0.0)):
        sigma = sched.sigma(t)
        c_skip = 1.0 / (sigma**2 + 1.0)
        assert abs(c_skip - expect_skip) < 1e-4
    # residual branch vanishes as sigma -> 0
    assert NoiseSchedule().sigma(0.0) / np.sqrt(1e-6 + 1.0) < 2e-3


def test_vjp_zero_head_linear_map():
    model = small_model()
    x = np.array([0.4, -1.2])
    v = np.array([2.0, -3.0])
    sigma = model.schedule.sigma(0.5)
    np.testing.assert_allclose(net.denoise_vjp(model, x, 0.5, v),
                               v / (sigma**2 + 1.0), atol=1e-12)


def test_vjp_matches_finite_differences():
    model = small_model(randomize=True)
    x = np.array([0.25, -0.6])
    t = 0.6
    delta = 1e-5
    J = np.zeros((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = delta
        J[:, j] = (net.denoise(model, x + e, t) - net.denoise(model, x - e, t)) \
            / (2 * delta)
    for i in range(2):
        ei = np.zeros(2)
        ei[i] = 1.0
        row = net.denoise_vjp(model, x, t, ei)
        denom = np.maximum(np.abs(J[i, :]), 1e-6)
        assert np.max(np.abs(row - J[i, :]) / denom) < 1e-4


def test_vjp_linearity():
    model = small_model(randomize=True)
    x = np.array([0.1, 0.9])
    rng = np.random.default_rng(5)
    u, v = rng.standard_normal(2), rng.standard_normal(2)
    a, b = 1.3, -0.7
    lhs = net.denoise_vjp(model, x, 0.4, a * u + b * v)
    rhs = a * net.denoise_vjp(model, x, 0.4, u) + b * net.denoise_vjp(model, x, 0.4, v)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_vjp_pairing_with_forward_perturbation():
    # v^T J u computed via the VJP agrees with directional finite differences
    model = small_model(randomize=True)
    x = np.array([-0.3, 0.7])
    t = 0.5
    rng = np.random.default_rng(9)
    for _ in range(5):
        u = rng.standard_normal(2)
        v = rng.standard_normal(2)
        vjp_u = float(net.denoise_vjp(model, x, t, v) @ u)
        delta = 1e-6
        ju = (net.denoise(model, x + delta * u, t)
              - net.denoise(model, x - delta * u, t)) / (2 * delta)
        assert abs(vjp_u - float(v @ ju)) < 1e-4 * max(1.0, abs(vjp_u))


def test_score_zero_when_denoise_returns_input():
    # at the fixed point of the denoiser the score vanishes
    model = small_model()
    x = np.zeros(2)
    np.testing.assert_allclose(net.score_from_denoiser(model, x, 0.5), 0.0)


def test_param_grad_check_zero_head():
    model = small_model()
    err = net.param_grad_check(model, np.array([0.3, -0.4]), 0.5,
                               rng=np.random.default_rng(1))
    assert err < 1e-4


def test_param_grad_check_random_init():
    model = small_model(randomize=True)
    err = net.param_grad_check(model, np.array([0.3, -0.4]), 0.5,
                               rng=np.random.default_rng(2), n_probe=16)
    assert err < 1e-4


def test_param_grad_check_deterministic():
    model = small_model(randomize=True)
    x = np.array([1.0, 0.5])
    a = net.param_grad_check(model, x, 0.3, rng=np.random.default_rng(7))
    b = net.param_grad_check(model, x, 0.3, rng=np.random.default_rng(7))
    assert a == b


def test_train_rejects_empty_dataset():
    model = small_model()
    with pytest.raises(EmptyDatasetError):
        net.train_dsm(model, np.empty((0, 2)), net.TrainConfig(steps=1),
                      np.random.default_rng(0))


def test_train_point_mass():
    model = net.init_denoiser(2, hidden=(32, 32), embed_dim=8,
                              rng=np.random.default_rng(0))
    p = np.array([0.5, -0.25])
    cfg = net.TrainConfig(batch_size=256, steps=4000, lr_init=3e-3, lr_final=1e-5)
    trained = net.train_dsm(model, np.tile(p, (64, 1)), cfg,
                            np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for t in (0.1, 0.3, 0.5, 0.6):  # sigma(0.6) = 1.0, the top of the claimed range
        sigma = trained.schedule.sigma(t)
        assert sigma <= 1.0 + 1e-9
        x_t = p + sigma * rng.standard_normal((32, 2))
        d = net.denoise(trained, x_t, t)
        mean_err = float(np.mean(np.linalg.norm(d - p, axis=1)))
        assert mean_err < 0.05 * (1.0 + sigma)


def test_train_loss_decreases():
    # off-center data: the fresh preconditioning skeleton is far from optimal
    model = small_model()
    rng = np.random.default_rng(3)
    data = np.array([2.0, -1.0]) + 0.3 * rng.standard_normal((512, 2))
    losses = []
    cfg = net.TrainConfig(batch_size=128, steps=1200, lr_init=2e-3, lr_final=1e-4)
    net.train_dsm(model, data, cfg, np.random.default_rng(0),
                  on_step=lambda s, l: losses.append(l))
    assert np.mean(losses[-512:]) < np.mean(losses[:512])


def test_train_deterministic():
    model = small_model()
    rng = np.random.default_rng(3)
    data = rng.standard_normal((64, 2))
    cfg = net.TrainConfig(batch_size=32, steps=20, lr_init=1e-3, lr_final=1e-4)
    m1 = net.train_dsm(model, data, cfg, np.random.default_rng(11))
    m2 = net.train_dsm(model, data, cfg, np.random.default_rng(11))
    for (_, a), (_, b) in zip(m1.params.named_arrays(), m2.params.named_arrays()):
        np.testing.assert_array_equal(a, b)
    # and the input model was not mutated
    assert all(np.all(w == 0.0) for w in model.params.weights[-1:])


def test_train_on_gaussian_matches_conjugate_oracle():
    # optimal denoiser for x ~ N(0, I) is x_t / (1 + sigma^2)
    model = net.init_denoiser(2, hidden=(64, 64), embed_dim=16,
                              rng=np.random.default_rng(0))
    rng = np.random.default_rng(4)
    data = rng.standard_normal((8192, 2))
    cfg = net.TrainConfig(batch_size=512, steps=4096, lr_init=2e-3, lr_final=1e-5)
    trained = net.train_dsm(model, data, cfg, np.random.default_rng(1))

    sched = trained.schedule
    t_unit = np.log(1.0 / sched.sigma_min) / np.log(sched.sigma_max / sched.sigma_min)
    assert sched.sigma(t_unit) == pytest.approx(1.0, rel=1e-10)
    probes = np.random.default_rng(2).standard_normal((256, 2)) * np.sqrt(2.0)
    d = net.denoise(trained, probes, t_unit)
    target = probes / 2.0
    msd = float(np.mean(np.sum((d - target)**2, axis=1)))
    assert msd < 0.01
    # equivalently: within 5% of the conjugate mean, relative to the x_t scale
    xt_rms = np.sqrt(np.mean(np.sum(probes**2, axis=1)))
    assert np.sqrt(msd) < 0.05 * xt_rms


def test_checkpoint_round_trip(tmp_path):
    model = small_model(randomize=True)
    path = tmp_path / "model.ckpt"
    net.save_checkpoint(model, path)
    loaded = net.load_checkpoint(path)
    for (na, a), (nb, b) in zip(model.params.named_arrays(),
                                loaded.params.named_arrays()):
        assert na == nb
        np.testing.assert_array_equal(a, b)
    assert loaded.schedule == model.schedule
    assert loaded.embed_dim == model.embed_dim
    # byte-identical on re-save
    path2 = tmp_path / "model2.ckpt"
    net.save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()
