import numpy as np
import pytest

from attnquant.errors import DefinitenessError, ShapeError
from attnquant.linalg.dense import invert_spd, relative_frobenius
from attnquant.model.gradients import (
    build_workspace,
    gaussian_seed,
    identity_seed,
    weight_gradients,
)
from attnquant.model.transformer import AttentionShape
from attnquant.quantization.hessian import (
    HessianState,
    accumulate_attention,
    accumulate_linear,
    avg_trace,
    damp,
    gauss_newton_oracle,
    inverse_upper_factor,
    is_positive_semidefinite,
    merge,
)
from attnquant.store.synthetic import random_attention


def random_spd(dim: int, seed: int = 0) -> np.ndarray:
    a = np.random.default_rng(seed).normal(size=(dim, dim))
    return a @ a.T + dim * np.eye(dim)


class Test_accumulate_linear:
    def test_zero_input(self):
        state = accumulate_linear(HessianState.empty(3), np.zeros((4, 3)))
        assert np.array_equal(state.h, np.zeros((3, 3)))
        assert state.nsamples == 1

    def test_single_token(self):
        state = accumulate_linear(HessianState.empty(2), np.array([[1.0, 2.0]]))
        assert np.array_equal(state.h, 2 * np.array([[1.0, 2.0], [2.0, 4.0]]))

    def test_features_first(self):
        x = np.random.default_rng(0).normal(size=(3, 5))
        first = accumulate_linear(HessianState.empty(3), x, features_first=True)
        second = accumulate_linear(HessianState.empty(3), x.T)
        assert np.allclose(first.h, second.h)

    def test_running_average(self):
        x = np.random.default_rng(1).normal(size=(6, 3))
        twice = accumulate_linear(accumulate_linear(HessianState.empty(3), x), x)
        batched = accumulate_linear(HessianState.empty(3), np.stack([x, x]))
        assert twice.nsamples == batched.nsamples == 2
        assert np.allclose(twice.h, batched.h, atol=1e-12)
        assert np.allclose(twice.h, 2 * x.T @ x)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            accumulate_linear(HessianState.empty(3), np.zeros((4, 2)))

    def test_damped_state(self):
        state = damp(accumulate_linear(HessianState.empty(2), np.ones((1, 2))))
        with pytest.raises(ValueError):
            accumulate_linear(state, np.ones((1, 2)))

    def test_symmetric(self):
        x = np.random.default_rng(2).normal(size=(7, 4)) * 1e3
        h = accumulate_linear(HessianState.empty(4), x).h
        assert np.array_equal(h, h.T)


class Test_accumulate_attention:
    def test_zero_gradients(self):
        state = accumulate_attention(HessianState.empty(3), [np.zeros((3, 2))])
        assert np.array_equal(state.h, np.zeros((3, 3)))

    def test_psd(self):
        g = np.random.default_rng(0).normal(size=(4, 1))
        state = accumulate_attention(HessianState.empty(4), [g])
        assert is_positive_semidefinite(state)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            accumulate_attention(HessianState.empty(3), [np.zeros((2, 3))])

    def test_wo_reduces_to_effective_input(self):
        """For W^O and the identity seed, the Hessian is 2·CᵀC of the head concatenation."""
        rng = np.random.default_rng(9)
        w = random_attention(rng, 8, 2)
        x = rng.normal(size=(6, 8))
        ws = build_workspace(w, x)
        grads = weight_gradients(ws, identity_seed(6, 8), w, "wo")
        state = accumulate_attention(HessianState.empty(8), grads)
        assert relative_frobenius(state.h, 2 * ws.concat.T @ ws.concat) < 1e-10


def test_merge_matches_sequential():
    rng = np.random.default_rng(3)
    batches = [rng.normal(size=(5, 3)) for _ in range(4)]
    sequential = HessianState.empty(3)
    for batch in batches:
        sequential = accumulate_linear(sequential, batch)
    left = accumulate_linear(accumulate_linear(HessianState.empty(3), batches[0]), batches[1])
    right = accumulate_linear(accumulate_linear(HessianState.empty(3), batches[2]), batches[3])
    merged = merge(right, left)
    assert merged.nsamples == 4
    assert relative_frobenius(merged.h, sequential.h) < 1e-12


def test_batch_order_independence():
    rng = np.random.default_rng(4)
    batches = [rng.normal(size=(5, 3)) for _ in range(6)]
    forward = backward = HessianState.empty(3)
    for batch in batches:
        forward = accumulate_linear(forward, batch)
    for batch in reversed(batches):
        backward = accumulate_linear(backward, batch)
    assert relative_frobenius(forward.h, backward.h) < 1e-10


class Test_damp:
    def test_identity(self):
        state = damp(HessianState(dim=3, h=np.eye(3), nsamples=1), 0.01)
        assert np.allclose(np.diag(state.h), 1.01)
        assert state.damped

    def test_zero_fallback(self):
        state = damp(HessianState.empty(3), 0.01)
        assert np.allclose(state.h, 0.01 * np.eye(3))

    def test_rank_deficient(self):
        g = np.array([[1.0], [2.0], [3.0]])
        state = damp(accumulate_attention(HessianState.empty(3), [g]))
        inverse_upper_factor(state)

    def test_dead_inputs(self):
        x = np.array([[1.0, 0.0, 2.0], [3.0, 0.0, 1.0]])
        state = damp(accumulate_linear(HessianState.empty(3), x))
        assert state.dead == (1,)
        upper = inverse_upper_factor(state)
        assert upper[1, 2] == 0

    def test_keeps_undamped_trace(self):
        state = damp(HessianState(dim=2, h=np.diag([4.0, 2.0]), nsamples=1))
        assert avg_trace(state).avg_trace == pytest.approx(3.0)

    def test_percent_positive(self):
        with pytest.raises(ValueError):
            damp(HessianState.empty(2), 0)


class Test_inverse_upper_factor:
    def test_identity(self):
        state = damp(HessianState(dim=3, h=np.eye(3), nsamples=1), 1e-12)
        assert np.allclose(inverse_upper_factor(state), np.eye(3))

    def test_diagonal(self):
        state = HessianState(dim=2, h=np.diag([4.0, 1.0]), nsamples=1, damped=True)
        upper = inverse_upper_factor(state)
        assert np.allclose(upper.T @ upper, np.diag([0.25, 1.0]))

    def test_random_reconstruction(self):
        state = damp(HessianState(dim=8, h=random_spd(8), nsamples=1))
        upper = inverse_upper_factor(state)
        assert np.all(np.tril(upper, k=-1) == 0)
        assert np.max(np.abs(upper.T @ upper - invert_spd(state.h))) < 1e-8

    def test_needs_damping(self):
        with pytest.raises(ValueError):
            inverse_upper_factor(HessianState(dim=2, h=np.eye(2), nsamples=1))

    def test_indefinite(self):
        state = HessianState(dim=2, h=np.diag([1.0, -1.0]), nsamples=1, damped=True)
        with pytest.raises(DefinitenessError) as exc_info:
            inverse_upper_factor(state)
        assert exc_info.value.pivot == 1


class Test_avg_trace:
    def test_identity(self):
        assert avg_trace(HessianState(dim=4, h=np.eye(4), nsamples=1)).avg_trace == 1.0

    def test_hand_computed(self):
        state = accumulate_linear(HessianState.empty(2), np.array([[1.0, 2.0]]))
        assert avg_trace(state).avg_trace == pytest.approx(5.0)

    def test_quadratic_scaling(self):
        x = np.random.default_rng(6).normal(size=(5, 3))
        base = avg_trace(accumulate_linear(HessianState.empty(3), x)).avg_trace
        scaled = avg_trace(accumulate_linear(HessianState.empty(3), 3 * x)).avg_trace
        assert scaled == pytest.approx(9 * base, rel=1e-12)

    def test_requires_samples(self):
        with pytest.raises(ValueError):
            avg_trace(HessianState.empty(2))


class Test_gauss_newton_oracle:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(12)
        w = random_attention(rng, 4, 2)
        x = rng.normal(size=(3, 4))
        return AttentionShape(n=3, d_model=4, heads=2), w, x

    def test_linear(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        weight = np.random.default_rng(1).normal(size=(4, 5))
        shape = AttentionShape(n=3, d_model=4, heads=1)
        assert np.allclose(gauss_newton_oracle(shape, weight, x, "linear"), 2 * x.T @ x)

    def test_wo(self, setup):
        shape, w, x = setup
        concat = build_workspace(w, x).intermediates.concat
        assert np.allclose(gauss_newton_oracle(shape, w, x, "wo"), 2 * concat.T @ concat)

    def test_zero_input(self, setup):
        shape, w, _ = setup
        assert np.allclose(gauss_newton_oracle(shape, w, np.zeros((3, 4)), "wv"), 0)

    def test_size_guard(self):
        shape = AttentionShape(n=16, d_model=8, heads=2)
        w = random_attention(np.random.default_rng(0), 8, 2)
        with pytest.raises(ShapeError):
            gauss_newton_oracle(shape, w, np.zeros((16, 8)), "wq")

    @pytest.mark.parametrize("target", ["wq", "wk", "wv", "wo"])
    def test_gaussian_probes_are_unbiased(self, setup, target):
        shape, w, x = setup
        oracle = gauss_newton_oracle(shape, w, x, target)
        rng = np.random.default_rng(21)
        ws = build_workspace(w, x)
        probes = 4000
        state = HessianState.empty(4)
        grads = [g for _ in range(probes)
                 for g in weight_gradients(ws, gaussian_seed(3, 4, rng).scaled(
                     1 / np.sqrt(4 * probes)), w, target)]
        state = accumulate_attention(state, grads)
        assert relative_frobenius(state.h, oracle) < 0.1
