import numpy as np
import pytest

from evoedit import autodiff as ad
from evoedit.errors import ConfigError
from evoedit.perturb import NoiseConfig, noise_bound, perturb_embeddings, sample_noise


class TestNoiseBound:
    def test_direct_arithmetic(self):
        assert noise_bound(4, 8, 1.0) == pytest.approx(1.0 / 16.0, abs=0)

    def test_zero_alpha(self):
        assert noise_bound(7, 3, 0.0) == 0.0

    def test_unit_dims(self):
        assert noise_bound(1, 1, 2.5) == 2.5

    def test_invalid_inputs(self):
        with pytest.raises(ConfigError):
            noise_bound(0, 8, 1.0)
        with pytest.raises(ConfigError):
            noise_bound(4, 8, -0.5)
        with pytest.raises(ConfigError):
            NoiseConfig(alpha=-1.0)


class TestPerturb:
    def test_alpha_zero_is_identity(self):
        rng = np.random.default_rng(0)
        E = ad.parameter(rng.normal(size=(5, 8)))
        out = perturb_embeddings(E, NoiseConfig(alpha=0.0), rng)
        assert out is not E
        assert np.array_equal(out.data, E.data)

    def test_output_never_aliases_input(self):
        rng = np.random.default_rng(1)
        E = ad.parameter(rng.normal(size=(3, 4)))
        out = perturb_embeddings(E, NoiseConfig(alpha=1.0), rng)
        assert out.data is not E.data
        out.data[0, 0] += 100.0
        assert E.data[0, 0] != out.data[0, 0]

    def test_same_seed_same_noise_different_seed_differs(self):
        E = ad.parameter(np.zeros((4, 4)))
        a = perturb_embeddings(E, NoiseConfig(alpha=1.0), np.random.default_rng(7))
        b = perturb_embeddings(E, NoiseConfig(alpha=1.0), np.random.default_rng(7))
        c = perturb_embeddings(E, NoiseConfig(alpha=1.0), np.random.default_rng(8))
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_fresh_sample_per_call(self):
        rng = np.random.default_rng(3)
        E = ad.parameter(np.zeros((4, 4)))
        a = perturb_embeddings(E, NoiseConfig(alpha=1.0), rng)
        b = perturb_embeddings(E, NoiseConfig(alpha=1.0), rng)
        assert not np.array_equal(a.data, b.data)

    def test_gradient_passes_through_unchanged(self):
        rng = np.random.default_rng(4)
        E = ad.parameter(rng.normal(size=(3, 5)))
        with ad.ComputationTape():
            out = perturb_embeddings(E, NoiseConfig(alpha=2.0), rng)
            loss = ad.reshape(
                ad.matmul(ad.matmul(ad.constant(np.ones((1, 3))), out), ad.constant(np.ones((5, 1)))),
                (),
            )
            ad.backward(loss)
        assert np.allclose(E.grad, np.ones((3, 5)))


class TestBoundAndMean:
    def test_monte_carlo_bound_and_zero_mean(self):
        # 1e5+ samples at alpha=1, L=16, d=64: every |noise| <= 1/(4*64) and
        # the sample mean sits within 3 sigma of zero (uniform variance b^2/3)
        rng = np.random.default_rng(123)
        L, d, alpha = 16, 64, 1.0
        bound = noise_bound(L, d, alpha)
        assert bound == pytest.approx(1.0 / (4.0 * 64.0), abs=0)
        draws = 128
        n = L * d * draws
        assert n >= 10 ** 5
        samples = np.concatenate([sample_noise(L, d, alpha, rng).ravel() for _ in range(draws)])
        assert np.max(np.abs(samples)) <= bound
        sigma_mean = bound / np.sqrt(3.0 * n)
        assert abs(samples.mean()) <= 3.0 * sigma_mean

    def test_bound_is_exact_closed_interval_property(self):
        rng = np.random.default_rng(5)
        for L, d, alpha in [(1, 1, 0.5), (3, 9, 2.0), (32, 16, 0.01)]:
            E = ad.parameter(rng.normal(size=(L, d)))
            out = perturb_embeddings(E, NoiseConfig(alpha=alpha), rng)
            delta = np.abs(out.data - E.data)
            assert np.max(delta) <= noise_bound(L, d, alpha)
