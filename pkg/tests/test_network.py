"""Embedding MLP: forward, hand-rolled backward, and Adam."""

import numpy as np
import pytest

from hpl.core import Rng
from hpl.errors import ContractError, TrainingError
from hpl.network import AdamState, GradBuffer, Mlp, adam_step, backward, forward
from oracles import finite_diff, max_rel_err, scalar_mlp_forward


def random_net(dims, seed):
    return Mlp(dims, Rng(seed))


class TestMlpInit:
    def test_same_seed_same_weights(self):
        a = Mlp([4, 8, 3], Rng(5))
        b = Mlp([4, 8, 3], Rng(5))
        for wa, wb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(wa, wb)

    def test_glorot_bounds_and_zero_biases(self):
        net = Mlp([16, 64, 32], Rng(0))
        for w, b in zip(net.weights, net.biases):
            fan_out, fan_in = w.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.abs(w).max() <= limit
            assert np.array_equal(b, np.zeros_like(b))

    def test_parameters_order(self):
        net = Mlp([3, 5, 2], Rng(1))
        params = net.parameters()
        assert params[0] is net.weights[0]
        assert params[1] is net.biases[0]
        assert params[2] is net.weights[1]
        assert params[3] is net.biases[1]

    def test_too_few_dims_rejected(self):
        with pytest.raises(ContractError):
            Mlp([4], Rng(0))

    def test_nonpositive_dim_rejected(self):
        with pytest.raises(ContractError):
            Mlp([4, 0, 2], Rng(0))

    def test_from_arrays_shape_chain_checked(self):
        w0 = np.zeros((5, 4))
        w1 = np.zeros((2, 6))
        with pytest.raises(ContractError):
            Mlp.from_arrays([w0, w1], [np.zeros(5), np.zeros(2)])

    def test_properties(self):
        net = Mlp([7, 11, 5], Rng(2))
        assert net.input_dim == 7
        assert net.embed_dim == 5
        assert net.num_layers == 2


class TestForward:
    def test_identity_network(self):
        net = Mlp.from_arrays([np.eye(3)], [np.zeros(3)])
        x = np.array([[0.5, -2.0, 7.0]])
        emb, _ = forward(net, x)
        assert np.array_equal(emb, x)

    def test_zero_input_single_layer_gives_bias(self):
        bias = np.array([1.5, -0.5])
        net = Mlp.from_arrays([np.zeros((2, 3))], [bias])
        emb, _ = forward(net, np.zeros((1, 3)))
        assert np.array_equal(emb[0], bias)

    def test_hidden_relu_clamps(self):
        w0 = np.array([[1.0], [-1.0]])
        w1 = np.array([[1.0, 1.0]])
        net = Mlp.from_arrays([w0, w1], [np.zeros(2), np.zeros(1)])
        emb, _ = forward(net, np.array([[3.0]]))
        # hidden = relu([3, -3]) = [3, 0]
        assert emb[0, 0] == 3.0

    def test_matches_scalar_recompute(self):
        net = random_net([5, 7, 4], seed=9)
        x = Rng(10).normal(size=(6, 5))
        emb, _ = forward(net, x)
        for i in range(x.shape[0]):
            ref = scalar_mlp_forward(net.weights, net.biases, x[i])
            assert np.abs(emb[i] - ref).max() < 1e-12

    def test_batched_equals_one_at_a_time(self):
        net = random_net([6, 9, 4], seed=3)
        x = Rng(4).normal(size=(17, 6))
        whole, _ = forward(net, x)
        rows = [forward(net, x[i : i + 1])[0][0] for i in range(17)]
        assert np.array_equal(whole, np.array(rows))

    def test_positive_scaling_with_zero_biases(self):
        net = random_net([4, 6, 3], seed=8)
        x = Rng(5).normal(size=(3, 4))
        base, _ = forward(net, x)
        scaled, _ = forward(net, 2.0 * x)
        assert np.abs(scaled - 2.0 * base).max() < 1e-10

    def test_wrong_input_dim(self):
        net = random_net([4, 6, 3], seed=8)
        with pytest.raises(ContractError):
            forward(net, np.zeros((2, 5)))

    def test_empty_batch_rejected(self):
        net = random_net([4, 6, 3], seed=8)
        with pytest.raises(ContractError):
            forward(net, np.zeros((0, 4)))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        net = random_net([4, 6, 3], seed=1)
        x = Rng(2).normal(size=(5, 4))
        _, tape = forward(net, x)
        grads = backward(net, tape, np.zeros((5, 3)))
        for g in grads.flat():
            assert np.array_equal(g, np.zeros_like(g))

    def test_identity_network_bias_grad_sums_upstream(self):
        net = Mlp.from_arrays([np.eye(3)], [np.zeros(3)])
        x = Rng(0).normal(size=(4, 3))
        _, tape = forward(net, x)
        up = Rng(1).normal(size=(4, 3))
        grads = backward(net, tape, up)
        assert np.allclose(grads.d_biases[0], up.sum(axis=0))
        assert np.allclose(grads.d_weights[0], up.T @ x)

    def test_finite_difference_over_fifty_random_triples(self):
        rng = Rng(77)
        for trial in range(50):
            dims = [
                int(rng.integers(3)) + 2,
                int(rng.integers(4)) + 2,
                int(rng.integers(3)) + 2,
            ]
            net = Mlp(dims, rng.derive(100, trial))
            batch = int(rng.integers(4)) + 1
            x = rng.normal(size=(batch, dims[0]))
            up = rng.normal(size=(batch, dims[-1]))
            _, tape = forward(net, x)
            grads = backward(net, tape, up)

            for layer in range(net.num_layers):
                for arrays, analytic in (
                    (net.weights, grads.d_weights[layer]),
                    (net.biases, grads.d_biases[layer]),
                ):
                    target = arrays[layer]

                    def objective(theta):
                        saved = target.copy()
                        target[...] = theta
                        emb, _ = forward(net, x)
                        target[...] = saved
                        return float((up * emb).sum())

                    numeric = finite_diff(objective, target)
                    assert max_rel_err(analytic, numeric) < 1e-5

    def test_grad_buffer_flat_order(self):
        buf = GradBuffer(
            d_weights=[np.ones((2, 2)), np.ones((1, 2))],
            d_biases=[np.zeros(2), np.zeros(1)],
        )
        flat = buf.flat()
        assert flat[0] is buf.d_weights[0]
        assert flat[1] is buf.d_biases[0]
        assert flat[2] is buf.d_weights[1]
        assert flat[3] is buf.d_biases[1]


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = [np.array([1.0, 2.0]), np.array([[3.0]])]
        before = [p.copy() for p in params]
        state = AdamState.for_params(params, lr=0.1)
        adam_step(params, [np.zeros_like(p) for p in params], state)
        for p, b in zip(params, before):
            assert np.array_equal(p, b)

    def test_first_step_magnitude_is_learning_rate(self):
        params = [np.array([5.0])]
        state = AdamState.for_params(params, lr=0.1)
        adam_step(params, [np.array([1.0])], state)
        assert abs((5.0 - params[0][0]) - 0.1) < 1e-6

    def test_step_counter_advances(self):
        params = [np.array([1.0])]
        state = AdamState.for_params(params, lr=0.01)
        assert state.t == 0
        adam_step(params, [np.array([1.0])], state)
        adam_step(params, [np.array([1.0])], state)
        assert state.t == 2

    def test_minimizes_quadratic(self):
        params = [np.array([1.0])]
        state = AdamState.for_params(params, lr=0.05)
        for _ in range(100):
            adam_step(params, [2.0 * params[0]], state)
        assert abs(params[0][0]) < 0.2

    def test_updates_in_place(self):
        params = [np.array([1.0, 1.0])]
        ref = params[0]
        state = AdamState.for_params(params, lr=0.1)
        adam_step(params, [np.ones(2)], state)
        assert params[0] is ref

    def test_non_finite_gradient_rejected(self):
        params = [np.array([1.0])]
        state = AdamState.for_params(params, lr=0.1)
        with pytest.raises(TrainingError):
            adam_step(params, [np.array([np.nan])], state)

    def test_shape_mismatch_rejected(self):
        params = [np.array([1.0])]
        state = AdamState.for_params(params, lr=0.1)
        with pytest.raises(ContractError):
            adam_step(params, [np.ones(2)], state)

    def test_deterministic_trajectory(self):
        def run():
            params = [np.array([1.0, -2.0])]
            state = AdamState.for_params(params, lr=0.03)
            for step in range(20):
                g = params[0] * (step + 1)
                adam_step(params, [g], state)
            return params[0]

        assert np.array_equal(run(), run())
