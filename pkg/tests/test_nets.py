import numpy as np
import pytest

from latentprior.nets import (
    MLP,
    ArchitectureMismatch,
    CriticNet,
    GeneratorNet,
    Layer,
    WeightsFormatError,
    load_weights,
    sample_prior_latent,
    save_weights,
)

from conftest import central_fd, rel_err


def linear_generator(w):
    """g(z) = W z as a single linear layer; row convention stores W transposed."""
    w = np.asarray(w, float)
    return GeneratorNet([Layer(w.shape[1], w.shape[0], "linear")], [w.T.copy(), np.zeros(w.shape[0])])


def test_zero_network_outputs_the_shift():
    g = GeneratorNet.build(8, 4, (5, 6))
    g.params = [np.zeros_like(p) for p in g.params]
    out = g(np.random.default_rng(0).standard_normal(8))
    assert out.shape == (4, 4)
    np.testing.assert_array_equal(out, np.full((4, 4), 6.0))


def test_linear_generator_picks_first_column():
    w = np.arange(8.0).reshape(4, 2)
    g = linear_generator(w)
    np.testing.assert_array_equal(g(np.array([1.0, 0.0])), w[:, 0].reshape(2, 2))


def test_linear_generator_vjp_is_transpose(rng):
    w = rng.standard_normal((4, 2))
    g = linear_generator(w)
    v = rng.standard_normal(4)
    np.testing.assert_allclose(g.vjp(rng.standard_normal(2), v), w.T @ v, rtol=1e-14)
    assert not g.vjp(np.ones(2), np.zeros(4)).any()


def test_generator_output_range(rng):
    g = GeneratorNet.build(8, 8, (16, 32), rng=rng)
    out = g.sample_fields(rng.standard_normal((50, 8)) * 10)
    assert out.shape == (50, 64)
    assert out.min() >= 0.0 and out.max() <= 12.0


def test_generator_vjp_matches_fd(rng):
    g = GeneratorNet.build(8, 6, (20, 30), rng=rng)
    for _ in range(5):
        z, v = rng.standard_normal(8), rng.standard_normal(36)
        fd = central_fd(lambda zz: float(np.vdot(g(zz).ravel(), v)), z)
        assert rel_err(g.vjp(z, v), fd) <= 1e-6


def test_critic_parameter_gradients_match_fd(rng):
    c = CriticNet.build(3, (6, 5), rng=rng)
    x = rng.standard_normal((4, 9))
    _, grads = c.vjp_batch(x, np.ones((4, 1)))

    def total(name_index, value):
        params = list(c.params)
        params[name_index] = value
        return float(MLP(c.layers, params, slope=c.slope).forward_batch(x).sum())

    for i, p in enumerate(c.params):
        assert rel_err(grads[i], central_fd(lambda v: total(i, v), p)) <= 1e-6


def test_batch_rows_are_independent(rng):
    g = GeneratorNet.build(8, 4, (10, 12), rng=rng)
    z = rng.standard_normal((5, 8))
    batch = g.sample_fields(z)
    for k in range(5):
        np.testing.assert_allclose(batch[k], g(z[k]).ravel(), rtol=1e-13, atol=1e-13)


def test_input_validation(rng):
    g = GeneratorNet.build(8, 4, (10, 12), rng=rng)
    with pytest.raises(ValueError):
        g(np.zeros(7))
    with pytest.raises(ValueError):
        g.vjp(np.zeros(8), np.zeros(15))
    with pytest.raises(ValueError):
        Layer(3, 4, "relu")
    with pytest.raises(ValueError):
        MLP([Layer(2, 3), Layer(4, 1)])


def test_prior_latent_draws():
    a = sample_prior_latent(np.random.default_rng(3), 1)
    assert a.shape == (1, 8)
    np.testing.assert_array_equal(a, sample_prior_latent(np.random.default_rng(3), 1))
    big = sample_prior_latent(np.random.default_rng(3), 100_000)
    assert np.all(np.abs(big.mean(axis=0)) <= 4 / np.sqrt(100_000))
    assert np.all(np.abs(big.var(axis=0) - 1) <= 0.02)
    with pytest.raises(ValueError):
        sample_prior_latent(np.random.default_rng(3), 0)


@pytest.mark.parametrize("make", [
    lambda r: GeneratorNet.build(8, 4, (6, 7), rng=r),
    lambda r: CriticNet.build(4, (7, 5), rng=r),
])
def test_weights_round_trip(make, tmp_path, rng):
    net = make(rng)
    save_weights(net, tmp_path / "w.gpw")
    back = load_weights(tmp_path / "w.gpw", expected=net)
    assert type(back) is type(net)
    assert back.descriptor() == net.descriptor()
    for a, b in zip(net.params, back.params):
        assert a.tobytes() == b.tobytes()


def test_weights_bad_magic(tmp_path, rng):
    p = tmp_path / "w.gpw"
    save_weights(GeneratorNet.build(8, 4, (6, 7), rng=rng), p)
    p.write_bytes(b"GPX1" + p.read_bytes()[4:])
    with pytest.raises(WeightsFormatError, match="magic"):
        load_weights(p)


def test_weights_truncated(tmp_path, rng):
    p = tmp_path / "w.gpw"
    save_weights(GeneratorNet.build(8, 4, (6, 7), rng=rng), p)
    raw = p.read_bytes()
    for cut in (10, len(raw) - 8):
        p.write_bytes(raw[:cut])
        with pytest.raises(WeightsFormatError):
            load_weights(p)


def test_latent_dimension_mismatch(tmp_path, rng):
    p = tmp_path / "w.gpw"
    save_weights(GeneratorNet.build(16, 4, (6, 7), rng=rng), p)
    with pytest.raises(ArchitectureMismatch):
        load_weights(p, latent_dim=8)
    with pytest.raises(ArchitectureMismatch):
        load_weights(p, expected=GeneratorNet.build(8, 4, (6, 7)))
    assert load_weights(p, latent_dim=16).latent_dim == 16


def test_copy_is_independent(rng):
    g = GeneratorNet.build(8, 4, (6, 7), rng=rng)
    h = g.copy()
    h.params[0] += 1.0
    assert not np.array_equal(g.params[0], h.params[0])
    z = rng.standard_normal(8)
    assert not np.array_equal(g(z), h(z))
