import copy

import numpy as np
import pytest

from lowrank import activations as act
from lowrank.factorized import (
    TruncationPolicy,
    effective_weight,
    init_low_rank,
    orthonormality_defect,
)
from lowrank.linalg import frobenius_norm
from lowrank.network import Batch, DenseLayer, Network, dense_backprop, forward
from lowrank.optim import OptimizerStates, adam, euler
from lowrank.stepper import (
    PHASE_K,
    PHASE_L,
    PHASE_S,
    dense_step,
    dlrt_step,
    parameter_counts,
    phase_loss,
    phase_pass,
)
from oracles import central_difference


def random_mixed_net(rng, widths=None, all_low_rank=False):
    """2-4 layers, some factorized, some dense, softmax head."""
    if widths is None:
        depth = int(rng.integers(2, 5))
        widths = [int(rng.integers(3, 11)) for _ in range(depth + 1)]
    layers = []
    for i in range(len(widths) - 1):
        n_in, n_out = widths[i], widths[i + 1]
        a = act.SOFTMAX if i == len(widths) - 2 else act.RELU
        if all_low_rank or rng.random() < 0.7:
            r = int(rng.integers(1, min(4, n_in, n_out) + 1))
            layer = init_low_rank(n_out, n_in, r, a, rng, r_min=1)
            layer.bias = rng.standard_normal(n_out) * 0.1
            layers.append(layer)
        else:
            w = rng.standard_normal((n_out, n_in)) * 0.6
            layers.append(DenseLayer(w, rng.standard_normal(n_out) * 0.1, a))
    return Network(layers)


def random_batch(rng, net, max_b=4):
    n0 = (
        net.layers[0].n_in
        if hasattr(net.layers[0], "n_in")
        else net.layers[0].weight.shape[1]
    )
    b = int(rng.integers(1, max_b + 1))
    n_cls = (
        net.layers[-1].n_out
        if hasattr(net.layers[-1], "n_out")
        else net.layers[-1].weight.shape[0]
    )
    return Batch(rng.standard_normal((n0, b)), rng.integers(0, n_cls, size=b))


def rel_close(got, want, tol=1e-10):
    return frobenius_norm(got - want) <= tol * max(1.0, frobenius_norm(want))


class TestFactorGradientIdentities:
    def test_projection_identities_many_nets(self):
        rng = np.random.default_rng(101)
        for _ in range(60):
            net = random_mixed_net(rng)
            batch = random_batch(rng, net)
            _, tape = forward(net, batch, record=True)
            dense = dense_backprop(net, tape, batch.labels)
            kg = phase_pass(net, batch, PHASE_K).grads
            lg = phase_pass(net, batch, PHASE_L).grads
            sg = phase_pass(net, batch, PHASE_S).grads
            for i in net.low_rank_indices():
                f = net.layers[i]
                dw = dense[i]["w"]
                assert rel_close(kg[i][PHASE_K], dw @ f.v)
                assert rel_close(lg[i][PHASE_L], dw.T @ f.u)
                assert rel_close(sg[i][PHASE_S], f.u.T @ dw @ f.v)
                # bias gradient is phase independent
                assert rel_close(kg[i]["bias"], dense[i]["b"])

    def test_finite_difference_all_phases(self):
        rng = np.random.default_rng(102)
        for _ in range(8):
            net = random_mixed_net(rng)
            batch = random_batch(rng, net)
            for phase in (PHASE_K, PHASE_L, PHASE_S):
                grads = phase_pass(net, batch, phase).grads
                for i in net.low_rank_indices():
                    f = net.layers[i]
                    if phase == PHASE_K:
                        base = f.u @ f.s
                    elif phase == PHASE_L:
                        base = f.v @ f.s.T
                    else:
                        base = f.s
                    fd = central_difference(
                        lambda m: phase_loss(net, batch, phase, i, m), base
                    )
                    np.testing.assert_allclose(grads[i][phase], fd, atol=1e-6)

    def test_bias_gradient_finite_difference(self):
        rng = np.random.default_rng(103)
        net = random_mixed_net(rng)
        batch = random_batch(rng, net)
        grads = phase_pass(net, batch, PHASE_S).grads
        for i in net.low_rank_indices():
            f = net.layers[i]

            def loss_of_bias(b, f=f):
                saved = f.bias
                f.bias = b
                val = phase_loss(net, batch, PHASE_S)
                f.bias = saved
                return val

            fd = central_difference(loss_of_bias, f.bias)
            np.testing.assert_allclose(grads[i]["bias"], fd, atol=1e-6)

    def test_saturated_softmax_zero_gradients(self):
        rng = np.random.default_rng(104)
        layer = init_low_rank(3, 3, 3, act.SOFTMAX, rng)
        layer.s = np.diag([2000.0, 2000.0, 2000.0])
        net = Network([layer])
        w = effective_weight(layer)
        # feed inputs that the layer maps to hugely separated logits
        x = np.linalg.solve(w, 1000.0 * np.eye(3))
        labels = np.argmax(np.eye(3), axis=0)
        batch = Batch(x, labels)
        for phase in (PHASE_K, PHASE_L, PHASE_S):
            g = phase_pass(net, batch, phase).grads[0]
            assert np.abs(g[phase]).max() < 1e-8
            assert np.abs(g["bias"]).max() < 1e-8


class TestDlrtStep:
    def test_orthonormality_over_random_steps(self):
        rng = np.random.default_rng(111)
        for _ in range(40):
            net = random_mixed_net(rng)
            policy = (
                TruncationPolicy.adaptive(float(rng.uniform(0.05, 0.5)))
                if rng.random() < 0.7
                else TruncationPolicy.fixed(2)
            )
            integ = adam(1e-3) if rng.random() < 0.5 else euler(0.05)
            states = OptimizerStates()
            for _ in range(5):
                batch = random_batch(rng, net)
                dlrt_step(net, batch, policy, integ, states)
                for i in net.low_rank_indices():
                    assert orthonormality_defect(net.layers[i]) <= 1e-10

    def test_augmentation_exactness_hook(self):
        rng = np.random.default_rng(112)
        checked = 0

        def hook(i, u0, s0, v0, u1, s1, v1, adaptive):
            nonlocal checked
            if not adaptive:
                return
            w_old = u0 @ s0 @ v0.T
            w_proj = u1 @ s1 @ v1.T
            assert frobenius_norm(w_proj - w_old) <= 1e-10 * max(
                1.0, frobenius_norm(w_old)
            )
            checked += 1

        for _ in range(15):
            net = random_mixed_net(rng)
            states = OptimizerStates()
            policy = TruncationPolicy.adaptive(0.2)
            for _ in range(3):
                dlrt_step(net, random_batch(rng, net), policy, euler(0.05), states, hook)
        assert checked > 10

    def test_fixed_policy_never_changes_ranks(self):
        rng = np.random.default_rng(113)
        net = random_mixed_net(rng, all_low_rank=True)
        ranks0 = [net.layers[i].rank for i in net.low_rank_indices()]
        shapes0 = [net.layers[i].s.shape for i in net.low_rank_indices()]
        states = OptimizerStates()
        for _ in range(20):
            info = dlrt_step(
                net, random_batch(rng, net), TruncationPolicy.fixed(3), euler(0.1), states
            )
        assert info.ranks == ranks0
        assert [net.layers[i].s.shape for i in net.low_rank_indices()] == shapes0

    def test_zero_gradient_leaves_net_unchanged(self):
        rng = np.random.default_rng(114)
        layer = init_low_rank(3, 3, 3, act.SOFTMAX, rng)
        layer.s = np.diag([3000.0, 2500.0, 2000.0])
        net = Network([layer])
        x = np.linalg.solve(effective_weight(layer), 1000.0 * np.eye(3))
        batch = Batch(x, np.array([0, 1, 2]))
        before = copy.deepcopy(layer)
        states = OptimizerStates()
        dlrt_step(net, batch, TruncationPolicy.fixed(3), euler(0.2), states)
        # LAPACK rounding keeps this at machine precision, not bitwise
        assert frobenius_norm(
            effective_weight(layer) - effective_weight(before)
        ) <= 1e-9
        np.testing.assert_array_equal(layer.bias, before.bias)

    def test_full_rank_square_step_matches_dense_sgd(self):
        # at full rank with square layers the one-step update of the
        # effective weight reproduces plain SGD exactly
        rng = np.random.default_rng(115)
        for _ in range(10):
            n = int(rng.integers(3, 7))
            depth = int(rng.integers(2, 4))
            widths = [n] * (depth + 1)
            net = random_mixed_net(rng, widths=widths, all_low_rank=True)
            for i in net.low_rank_indices():
                f = net.layers[i]
                full = init_low_rank(n, n, n, f.activation, rng, r_min=1)
                full.bias = f.bias.copy()
                net.layers[i] = full
            batch = random_batch(rng, net)
            _, tape = forward(net, batch, record=True)
            dense = dense_backprop(net, tape, batch.labels)
            lr = 0.2
            want = [
                effective_weight(net.layers[i]) - lr * dense[i]["w"]
                for i in net.low_rank_indices()
            ]
            dlrt_step(net, batch, TruncationPolicy.fixed(n), euler(lr), OptimizerStates())
            for pos, i in enumerate(net.low_rank_indices()):
                got = effective_weight(net.layers[i])
                assert frobenius_norm(got - want[pos]) <= 1e-8

    def test_full_rank_rectangular_small_lr(self):
        # rectangular at full rank carries an O(lr^2) projection remainder,
        # so a tiny step lands within the same tolerance
        rng = np.random.default_rng(116)
        for _ in range(5):
            widths = [int(rng.integers(3, 8)) for _ in range(3)]
            net = random_mixed_net(rng, widths=widths, all_low_rank=True)
            for pos, i in enumerate(net.low_rank_indices()):
                f = net.layers[i]
                r = min(f.n_in, f.n_out)
                full = init_low_rank(f.n_out, f.n_in, r, f.activation, rng, r_min=1)
                net.layers[i] = full
            batch = random_batch(rng, net)
            _, tape = forward(net, batch, record=True)
            dense = dense_backprop(net, tape, batch.labels)
            lr = 1e-6
            snapshots = {
                i: (effective_weight(net.layers[i]), dense[i]["w"], net.layers[i].bias.copy())
                for i in net.low_rank_indices()
            }
            dlrt_step(
                net,
                batch,
                TruncationPolicy.fixed(99),
                euler(lr),
                OptimizerStates(),
            )
            for i, (w0, dw, b0) in snapshots.items():
                got = effective_weight(net.layers[i])
                assert frobenius_norm(got - (w0 - lr * dw)) <= 1e-8
                # bias moves O(lr), stays O(lr^2) from the dense twin
                assert np.abs(net.layers[i].bias - b0).max() <= lr * 10

    def test_descent_on_fixed_batch(self):
        rng = np.random.default_rng(117)
        layers = [
            init_low_rank(6, 5, 3, act.IDENTITY, rng, r_min=1),
            init_low_rank(3, 6, 2, act.SOFTMAX, rng, r_min=1),
        ]
        net = Network(layers)
        batch = Batch(rng.standard_normal((5, 16)), rng.integers(0, 3, size=16))
        states = OptimizerStates()
        losses = []
        for _ in range(50):
            info = dlrt_step(net, batch, TruncationPolicy.fixed(3), euler(0.01), states)
            losses.append(info.loss)
        drops = np.diff(losses)
        assert np.all(drops < 0.0)

    def test_adaptive_rank_change_resets_adam_state(self):
        rng = np.random.default_rng(118)
        layer = init_low_rank(10, 10, 8, act.SOFTMAX, rng)
        # nearly rank-2 core: truncation will bite hard
        layer.s = np.diag([5.0, 3.0] + [1e-8] * 6)
        net = Network([layer])
        states = OptimizerStates()
        batch = Batch(rng.standard_normal((10, 4)), rng.integers(0, 10, size=4))
        dlrt_step(net, batch, TruncationPolicy.adaptive(0.1), adam(), states)
        assert layer.rank < 8
        for tag in ("k", "l", "s"):
            assert (0, tag) not in states.entries

    def test_step_info_reports_preupdate_loss(self):
        rng = np.random.default_rng(119)
        net = random_mixed_net(rng)
        batch = random_batch(rng, net)
        loss_before = phase_loss(net, batch, PHASE_K)
        info = dlrt_step(
            net, batch, TruncationPolicy.adaptive(0.3), euler(0.05), OptimizerStates()
        )
        assert info.loss == pytest.approx(loss_before, abs=1e-12)


class TestDenseStep:
    def test_matches_direct_update(self):
        rng = np.random.default_rng(121)
        w = rng.standard_normal((4, 5))
        b = rng.standard_normal(4)
        net = Network([DenseLayer(w.copy(), b.copy(), act.SOFTMAX)])
        batch = Batch(rng.standard_normal((5, 3)), rng.integers(0, 4, size=3))
        _, tape = forward(net, batch, record=True)
        g = dense_backprop(net, tape, batch.labels)
        dense_step(net, batch, euler(0.3), OptimizerStates())
        np.testing.assert_allclose(net.layers[0].weight, w - 0.3 * g[0]["w"], atol=1e-12)
        np.testing.assert_allclose(net.layers[0].bias, b - 0.3 * g[0]["b"], atol=1e-12)

    def test_rejects_factorized_layers(self):
        rng = np.random.default_rng(122)
        net = Network([init_low_rank(4, 4, 2, act.SOFTMAX, rng)])
        batch = Batch(rng.standard_normal((4, 2)), np.array([0, 1]))
        with pytest.raises(ValueError):
            dense_step(net, batch, euler(0.1), OptimizerStates())


class TestParameterCounts:
    def test_dense_layer(self):
        net = Network([DenseLayer(np.zeros((7, 5)), np.zeros(7), act.SOFTMAX)])
        rep = parameter_counts(net)
        assert rep.eval_params == rep.train_params == rep.full_params == 35

    def test_low_rank_layer_formulas(self):
        rng = np.random.default_rng(131)
        net = Network([init_low_rank(8, 6, 3, act.SOFTMAX, rng)])
        rep = parameter_counts(net)
        assert rep.full_params == 48
        assert rep.eval_params == 3 * (8 + 6)
        assert rep.train_params == 2 * 3 * (8 + 6) + 4 * 9
        assert rep.eval_compression == pytest.approx(1 - 42 / 48)

    def test_mixed_net_sums(self):
        rng = np.random.default_rng(132)
        net = Network(
            [
                init_low_rank(6, 5, 2, act.RELU, rng),
                DenseLayer(np.zeros((3, 6)), np.zeros(3), act.SOFTMAX),
            ]
        )
        rep = parameter_counts(net)
        assert rep.eval_params == 2 * 11 + 18
        assert rep.train_params == (4 * 11 + 16) + 18
        assert rep.full_params == 30 + 18
