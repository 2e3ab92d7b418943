import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kggan import tensor as T
from kggan.errors import ContractError, DimensionError
from kggan.nn import (Discriminator, Generator, SpectralNormState, discriminator_forward, generator_forward,
                      spectral_normalize)
from kggan.tensor import Tensor

from conftest import central_diff, rel_err


def svd_oracle_top(W: np.ndarray) -> float:
    # largest singular value from the eigenvalues of W^T W
    return float(np.sqrt(np.linalg.eigvalsh(W.T @ W).max()))


class TestSpectralNorm:
    def test_diagonal(self):
        W = Tensor(np.diag([3.0, 1.0]), requires_grad=True)
        state = SpectralNormState(np.array([1.0, 0.0]))
        W_sn, state = spectral_normalize(W, state)
        assert state.sigma == pytest.approx(3.0)
        assert np.allclose(W_sn.data, np.diag([1.0, 1.0 / 3.0]))

    def test_random_matches_svd(self):
        rng = np.random.default_rng(0)
        W = rng.standard_normal((32, 32))
        state = SpectralNormState.init(32, rng)
        _, state = spectral_normalize(Tensor(W), state, n_iter=100)
        assert abs(state.sigma - svd_oracle_top(W)) / svd_oracle_top(W) <= 1e-3

    def test_rank_one(self):
        u, v = np.array([1.0, 2.0, 2.0]), np.array([3.0, 4.0])
        state = SpectralNormState.init(3, np.random.default_rng(1))
        _, state = spectral_normalize(Tensor(np.outer(u, v)), state, n_iter=3)
        assert state.sigma == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v))

    def test_u_stays_unit(self):
        rng = np.random.default_rng(2)
        state = SpectralNormState.init(5, rng)
        for _ in range(10):
            spectral_normalize(Tensor(rng.standard_normal((5, 7))), state)
            assert np.linalg.norm(state.u) == pytest.approx(1.0)
            assert state.sigma > 0

    def test_zero_matrix_clamped(self, caplog):
        state = SpectralNormState.init(3, np.random.default_rng(3))
        W_sn, state = spectral_normalize(Tensor(np.zeros((3, 3))), state)
        assert state.sigma > 0 and np.all(np.isfinite(W_sn.data))
        assert np.linalg.norm(state.u) == pytest.approx(1.0)
        assert "clamping" in caplog.text

    def test_sigma_is_constant_in_backward(self):
        W0 = np.diag([2.0, 1.0])
        W = Tensor(W0, requires_grad=True)
        W_sn, _ = spectral_normalize(W, SpectralNormState(np.array([1.0, 0.0])))
        T.backward(T.sum(W_sn))
        assert np.allclose(W.grad, np.full((2, 2), 0.5))

    def test_normalized_top_singular_value(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            W = rng.standard_normal((16, 24))
            W_sn, _ = spectral_normalize(Tensor(W), SpectralNormState.init(16, rng), n_iter=100)
            assert abs(svd_oracle_top(W_sn.data) - 1.0) <= 1e-2

    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            spectral_normalize(Tensor(np.ones((3, 2))), SpectralNormState(np.ones(2) / np.sqrt(2)))


def tiny_discriminator():
    D = Discriminator((2,), 2, np.random.default_rng(0), hidden=(), feature_dim=2)
    D.params["W0"].data = np.diag([2.0, 1.0])
    D.params["b0"].data = np.array([0.1, -0.2])
    D.params["psi_W"].data = np.array([[3.0, 4.0]])
    D.params["psi_b"].data = np.array([0.5])
    D.params["V"].data = np.array([[1.0, 2.0], [0.0, -1.0]])
    D.sn["W0"].u = np.array([1.0, 0.0])
    D.sn["psi_W"].u = np.array([1.0])
    return D


class TestDiscriminator:
    def test_hand_computed_score(self):
        # W0/2 = diag(1, .5); x=[1,-3] -> [1.1, -1.7] -> leaky -> [1.1, -0.34]
        # psi: [0.6, 0.8].h + 0.5 = 0.888 ; V h = [0.42, 0.34] ; <[0.5, 2], Vh> = 0.89
        D = tiny_discriminator()
        s = discriminator_forward(Tensor([[1.0, -3.0]]), Tensor([[0.5, 2.0]]), D)
        assert abs(s.item() - 1.778) <= 1e-12

    def test_zero_projection_ignores_condition(self):
        rng = np.random.default_rng(1)
        D = Discriminator((3, 4, 4), 5, rng, hidden=(8,), feature_dim=6)
        D.params["V"].data[:] = 0.0
        x = Tensor(rng.standard_normal((3, 3, 4, 4)))
        a = D.forward(x, Tensor(rng.random((3, 5))), update_sn=False).data
        b = D.forward(x, Tensor(rng.random((3, 5))), update_sn=False).data
        assert np.array_equal(a, b)

    def test_zero_condition_is_unconditional_head(self):
        rng = np.random.default_rng(2)
        D = Discriminator((3, 4, 4), 5, rng, hidden=(8,), feature_dim=6)
        x = Tensor(rng.standard_normal((4, 3, 4, 4)))
        a = D.forward(x, Tensor(np.zeros((4, 5))), update_sn=False).data
        assert np.allclose(a, D.unconditional(x).data, atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
    def test_projection_bilinear(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        D = Discriminator((3, 4, 4), 5, rng, hidden=(8,), feature_dim=6)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        v1, v2 = rng.random((2, 5)), rng.random((2, 5))
        base = D.unconditional(x).data
        f = lambda v: D.forward(x, Tensor(v), update_sn=False).data - base
        assert np.allclose(f(alpha * v1 + beta * v2), alpha * f(v1) + beta * f(v2), atol=1e-10)

    def test_condition_dim_mismatch(self):
        D = Discriminator((3, 4, 4), 5, np.random.default_rng(3), hidden=(8,), feature_dim=6)
        with pytest.raises(ContractError):
            D.forward(Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 4))))

    def test_audit_counts_watched_rows(self):
        D = Discriminator((3, 4, 4), 2, np.random.default_rng(4), hidden=(8,), feature_dim=6)
        D.watch_conditions(np.array([[1.0, 0.0]]))
        D.forward(Tensor(np.zeros((3, 3, 4, 4))), Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
        assert D.forbidden_hits == 2 and D.calls == 1


class TestGenerator:
    def make(self, seed=0):
        return Generator(6, 4, (3, 4, 4), np.random.default_rng(seed), hidden=(8, 10))

    def test_deterministic(self):
        G = self.make()
        rng = np.random.default_rng(1)
        z, v = rng.standard_normal((3, 6)), rng.random((3, 4))
        assert np.array_equal(generator_forward(z, v, G).data, generator_forward(z, v, G).data)

    def test_shared_params_for_any_condition(self):
        G = self.make()
        before = {k: id(p) for k, p in G.params.items()}
        z = np.random.default_rng(2).standard_normal((1, 6))
        seen = G.forward(z, np.array([[1.0, 0, 0, 0]]))
        unseen = G.forward(z, np.array([[0, 0, 0, 1.0]]))
        assert seen.shape == unseen.shape == (1, 3, 4, 4)
        assert {k: id(p) for k, p in G.params.items()} == before

    def test_first_layer_grad_fd(self):
        G = self.make(3)
        rng = np.random.default_rng(4)
        z, v = rng.standard_normal((5, 6)), rng.random((5, 4))
        W = G.params["W0"]
        T.backward(T.mean(G.forward(z, v)))
        analytic = W.grad.copy()
        W0 = W.data.copy()

        def f(w):
            W.data = w
            with T.no_grad():
                return float(G.forward(z, v).data.mean())

        fd = central_diff(f, W0.copy())
        W.data = W0
        assert rel_err(analytic, fd) <= 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 100.0))
    def test_output_bounded(self, seed, scale):
        G = self.make(seed % 7)
        rng = np.random.default_rng(seed)
        out = G.forward(scale * rng.standard_normal((4, 6)), scale * rng.standard_normal((4, 4)))
        assert np.max(np.abs(out.data)) <= 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            self.make().forward(np.zeros((2, 5)), np.zeros((2, 4)))
