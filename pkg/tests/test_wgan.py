import numpy as np
import pytest

from latentprior.data import paper_target, rasterize
from latentprior.nets import MLP, CriticNet, GeneratorNet
from latentprior.wgan import (
    Adam,
    TrainConfig,
    TrainingError,
    critic_input_gradient,
    critic_loss,
    gradient_penalty,
    wgan_train,
)

from conftest import central_fd, rel_err


def tiny_pair(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return GeneratorNet.build(8, n, (16, 32), rng=rng), CriticNet.build(n, (32, 16), rng=rng)


def critic_value(critic, params, x):
    return MLP(critic.layers, params, slope=critic.slope).forward_batch(x)[:, 0]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(critic_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(penalty_mode="spectral")
    assert TrainConfig().betas == (0.9, 0.5)
    assert TrainConfig(swap_betas=True).betas == (0.5, 0.9)


def test_zero_learning_rate_leaves_parameters_unchanged():
    g, c = tiny_pair()
    before = [p.tobytes() for p in g.params + c.params]
    data = np.random.default_rng(1).uniform(0, 10, size=(10, 16))
    wgan_train(data, g, c, TrainConfig(learning_rate=0.0, iterations=1, batch_size=4))
    assert [p.tobytes() for p in g.params + c.params] == before


def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([1.0, -2.0])]
    Adam(p, lr=0.1, betas=(0.9, 0.5)).step(p, [np.array([3.0, -0.5])])
    np.testing.assert_allclose(p[0], [0.9, -1.9], rtol=1e-7)


def test_zero_penalty_weight_is_the_plain_loss(rng):
    _, c = tiny_pair()
    real, fake = rng.uniform(0, 10, (6, 16)), rng.uniform(0, 10, (6, 16))
    eps = rng.uniform(size=6)
    plain, _, g_plain = critic_loss(c, real, fake, None)
    with_gp, pen, g_gp = critic_loss(c, real, fake, eps, penalty_weight=0.0)
    assert pen == 0.0
    assert abs(with_gp - plain) <= 1e-12 * abs(plain)
    for a, b in zip(g_plain, g_gp):
        np.testing.assert_array_equal(a, b)


def test_critic_loss_value(rng):
    _, c = tiny_pair()
    real, fake = rng.uniform(0, 10, (5, 16)), rng.uniform(0, 10, (5, 16))
    loss, _, _ = critic_loss(c, real, fake)
    assert loss == pytest.approx(c.score(fake).mean() - c.score(real).mean(), rel=1e-12)


def test_input_gradient_norm_matches_fd(rng):
    _, c = tiny_pair()
    real, fake = rng.uniform(0, 10, (3, 16)), rng.uniform(0, 10, (3, 16))
    eps = rng.uniform(size=(3, 1))
    x_hat = eps * real + (1 - eps) * fake
    _, _, norms = gradient_penalty(c, x_hat, 10.0)
    for k in range(3):
        fd = central_fd(lambda x: float(c.score(x[None, :])[0]), x_hat[k], step=1e-6)
        assert abs(np.linalg.norm(fd) - norms[k]) <= 1e-4 * norms[k]
        assert rel_err(critic_input_gradient(c, x_hat[k : k + 1])[0], fd) <= 1e-4


def test_penalty_parameter_gradient_matches_fd(rng):
    c = CriticNet.build(2, (5, 4), rng=rng)
    x_hat = rng.standard_normal((3, 4))
    pen, grads, _ = gradient_penalty(c, x_hat, 10.0)

    def penalty_at(i, value):
        params = list(c.params)
        params[i] = value
        other = MLP(c.layers, params, slope=c.slope)
        return gradient_penalty(other, x_hat, 10.0)[0]

    assert pen == pytest.approx(penalty_at(0, c.params[0]))
    for i, p in enumerate(c.params):
        fd = central_fd(lambda v: penalty_at(i, v), p, step=1e-6)
        if np.max(np.abs(fd)) == 0:
            assert not grads[i].any()
        else:
            assert rel_err(grads[i], fd) <= 1e-5, i


def test_penalty_rejects_non_piecewise_linear_critic(rng):
    g, _ = tiny_pair()
    with pytest.raises(ValueError):
        gradient_penalty(g, rng.standard_normal((2, 8)), 1.0)


def test_critic_ascent_direction_increases_objective(rng):
    # the critic maximises E d(real) - E d(fake); a small step along -grad(loss) must raise it
    _, c = tiny_pair()
    real, fake = rng.uniform(0, 10, (8, 16)), rng.uniform(0, 10, (8, 16))
    _, _, grads = critic_loss(c, real, fake)

    def objective(params):
        return critic_value(c, params, real).mean() - critic_value(c, params, fake).mean()

    base = objective(c.params)
    step = 1e-6
    moved = objective([p - step * g for p, g in zip(c.params, grads)])
    slope = (moved - base) / step
    expected = sum(float(np.vdot(g, g)) for g in grads)
    assert slope > 0
    assert slope == pytest.approx(expected, rel=1e-3)


@pytest.mark.parametrize("mode", ["gradient-penalty", "weight-clip"])
def test_training_is_bit_reproducible(mode):
    data = np.random.default_rng(2).uniform(0, 10, size=(20, 16))
    outs = []
    for _ in range(2):
        g, c = tiny_pair()
        _, _, log = wgan_train(data, g, c, TrainConfig(iterations=5, batch_size=4, seed=3, penalty_mode=mode))
        outs.append((b"".join(p.tobytes() for p in g.params + c.params), log.critic_loss, log.generator_loss))
    assert outs[0] == outs[1]


def test_weight_clip_mode_keeps_bounds():
    g, c = tiny_pair()
    data = np.random.default_rng(2).uniform(0, 10, size=(20, 16))
    _, _, log = wgan_train(data, g, c, TrainConfig(iterations=3, batch_size=4, penalty_mode="weight-clip", learning_rate=1e-2))
    assert all(np.abs(p).max() <= 0.01 for p in c.params)
    assert log.penalty == [0.0, 0.0, 0.0]


def test_log_and_checkpoints(tmp_path):
    g, c = tiny_pair()
    data = np.random.default_rng(2).uniform(0, 10, size=(20, 16))
    _, _, log = wgan_train(data, g, c, TrainConfig(iterations=4, batch_size=4, checkpoint_every=2), tmp_path)
    assert log.iteration == [1, 2, 3, 4]
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "critic_000002.gpw", "critic_000004.gpw", "generator_000002.gpw", "generator_000004.gpw",
    ]
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_bytes().split(b"\r\n")
    assert lines[0] == b"iteration,critic_loss,penalty,generator_loss" and len(lines) == 6


def test_overfit_single_image():
    img = rasterize(paper_target(), 4).ravel()
    g, c = tiny_pair()
    z = np.random.default_rng(99).standard_normal((256, 8))
    mad0 = np.abs(g.sample_fields(z) - img).mean()
    wgan_train(np.tile(img, (8, 1)), g, c, TrainConfig(learning_rate=1e-3, iterations=2000, batch_size=16, seed=1))
    mad = np.abs(g.sample_fields(z) - img).mean()
    assert mad0 / mad >= 10


def test_non_finite_training_aborts_with_iteration():
    g, c = tiny_pair()
    data = np.full((4, 16), 1e308)
    with pytest.raises(TrainingError) as info:
        wgan_train(data, g, c, TrainConfig(iterations=3, batch_size=2))
    assert info.value.iteration == 1


def test_dimension_checks():
    g, c = tiny_pair()
    with pytest.raises(ValueError):
        wgan_train(np.zeros((0, 16)), g, c, TrainConfig())
    with pytest.raises(ValueError):
        wgan_train(np.zeros((4, 9)), g, c, TrainConfig())
