"""Batched network objective, probe estimators, deterministic baseline."""

from __future__ import annotations

import tracemalloc

import numpy as np
import pytest
from numpy.testing import assert_allclose

from curvprop.estimators import NoiseDraw, active_node_ids, sweep_s
from curvprop.exact import exact_hessian, hessian_vector_product
from curvprop.graph import evaluate, gradient
from curvprop.mlp import (
    CpNoise,
    Mlp,
    averaged_diagonal,
    becker_lecun_diagonal,
    diagonal_samples,
    init_mlp,
    load_checkpoint,
    mlp_as_graph,
    mlp_cp_diagonal,
    mlp_objective_and_gradient,
    mlp_simple_diagonal,
    sample_cp_noise,
    sample_weight_noise,
    save_checkpoint,
    train_sgd,
)


def small_problem(sizes=(4, 3, 2), batch=2, seed=0, weight_std=0.5, act="tanh"):
    rng = np.random.default_rng(seed)
    mlp = init_mlp(sizes, rng, weight_std=weight_std, activation=act)
    x = rng.standard_normal((sizes[0], batch))
    t = rng.standard_normal((sizes[-1], batch))
    return mlp, x, t


class TestObjectiveAndGradient:
    def test_zero_weights_value_and_gradient_structure(self):
        mlp, x, t = small_problem(seed=3)
        zero = mlp.with_flat_params(np.zeros(mlp.num_params))
        loss, grad, _ = mlp_objective_and_gradient(zero, x, t)
        batch = x.shape[1]
        assert loss == pytest.approx(0.5 * np.sum(t * t) / batch)
        # with tanh(0) = 0 everywhere only the output bias sees a signal
        blocks = []
        at = 0
        for w in zero.weights:
            blocks.append(grad[at : at + w.size].reshape(w.shape))
            at += w.size
        assert_allclose(blocks[-1][:, -1], -t.sum(axis=1) / batch)
        blocks[-1][:, -1] = 0.0
        for b in blocks:
            assert_allclose(b, 0.0)

    def test_parameter_count(self):
        mlp, _, _ = small_problem((5, 4, 3, 2))
        sizes = mlp.sizes
        want = sum(sizes[i + 1] * (sizes[i] + 1) for i in range(len(sizes) - 1))
        assert mlp.num_params == want
        g = mlp_as_graph(mlp, np.zeros((5, 2)), np.zeros((2, 2)))
        assert g.nodes[g.source].n == want

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_graph_bridge(self, seed):
        sizes = [(4, 3, 2), (3, 4, 4, 2), (5, 2, 3)][seed % 3]
        act = ["tanh", "logistic", "softplus"][seed % 3]
        mlp, x, t = small_problem(sizes, batch=3, seed=seed, act=act)
        loss, grad, _ = mlp_objective_and_gradient(mlp, x, t)
        g = mlp_as_graph(mlp, x, t)
        tape = evaluate(g, mlp.flat_params())
        assert abs(tape.value - loss) <= 1e-10 * max(1.0, abs(loss))
        ggrad = gradient(g, tape).grad(g)
        assert np.abs(ggrad - grad).max() <= 1e-10 * max(1.0, np.abs(grad).max())

    def test_matches_finite_differences(self):
        mlp, x, t = small_problem(seed=11)
        _, grad, _ = mlp_objective_and_gradient(mlp, x, t)
        theta = mlp.flat_params()
        fd = np.zeros_like(theta)
        for j in range(theta.size):
            eps = 1e-6
            up = mlp.with_flat_params(theta + eps * _basis(theta.size, j))
            dn = mlp.with_flat_params(theta - eps * _basis(theta.size, j))
            fd[j] = (
                mlp_objective_and_gradient(up, x, t)[0]
                - mlp_objective_and_gradient(dn, x, t)[0]
            ) / (2 * eps)
        assert np.abs(grad - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())

    def test_shape_validation(self):
        mlp, x, t = small_problem()
        with pytest.raises(ValueError, match="rows"):
            mlp_objective_and_gradient(mlp, x[:-1], t)
        with pytest.raises(ValueError, match="targets"):
            mlp_objective_and_gradient(mlp, x, t[:-1])


def _basis(n, j):
    e = np.zeros(n)
    e[j] = 1.0
    return e


class TestCpDiagonal:
    def test_linear_single_output_sign_probe_is_exact(self):
        # identity activation kills the hidden injections and a one
        # dimensional sign probe squares to one, so a single draw equals
        # the curvature (here Gauss-Newton equals the full Hessian)
        mlp, x, t = small_problem((4, 3, 1), batch=3, seed=5, act="identity")
        noise = sample_cp_noise(mlp, 3, "rademacher", np.random.default_rng(0))
        est = mlp_cp_diagonal(mlp, x, t, noise)
        g = mlp_as_graph(mlp, x, t)
        exact = np.diag(exact_hessian(g, mlp.flat_params()))
        assert np.abs(est.diag - exact).max() <= 1e-12 * max(1, exact.max())

    @pytest.mark.parametrize("variant", ("s", "tu"))
    @pytest.mark.parametrize("dist", ("gaussian", "rademacher"))
    def test_monte_carlo_unbiased(self, variant, dist):
        mlp, x, t = small_problem(seed=0)
        g = mlp_as_graph(mlp, x, t)
        exact = np.diag(exact_hessian(g, mlp.flat_params()))
        draws = np.stack(
            diagonal_samples(mlp, x, t, variant, dist, seed=7, count=10_000)
        )
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(mean - exact) <= 4 * se + 1e-12)

    def test_equals_generic_graph_sweep_per_case(self):
        # one batched pass must agree with per-case graph sweeps that
        # keep the full-batch loss scale and drop matmul curvature
        mlp, x, t = small_problem(seed=2)
        batch = x.shape[1]
        noise = sample_cp_noise(mlp, batch, "gaussian", np.random.default_rng(4))
        est = mlp_cp_diagonal(mlp, x, t, noise)

        total = np.zeros(mlp.num_params)
        for b in range(batch):
            g = mlp_as_graph(
                mlp, x[:, b : b + 1], t[:, b : b + 1], loss_scale=1.0 / batch
            )
            tape = evaluate(g, mlp.flat_params())
            gs = gradient(g, tape)
            active = active_node_ids(g, zero_affine=True)
            v = {}
            hidden_level = 1
            for nid in active:
                if nid == g.sink:
                    v[nid] = noise.at_loss[:, b]
                else:
                    v[nid] = noise.at_hidden[hidden_level - 1][:, b]
                    hidden_level += 1
            s = sweep_s(g, tape, gs, NoiseDraw(dist="gaussian", v=v))
            total += s.real**2 - s.imag**2
        assert np.abs(est.diag - total).max() <= 1e-10 * max(1, np.abs(total).max())

    def test_batched_call_equals_average_of_single_case_calls(self):
        mlp, x, t = small_problem(seed=6, batch=4)
        batch = x.shape[1]
        noise = sample_cp_noise(mlp, batch, "rademacher", np.random.default_rng(1))
        batched = mlp_cp_diagonal(mlp, x, t, noise)
        acc = np.zeros(mlp.num_params)
        for b in range(batch):
            one = CpNoise(
                at_loss=noise.at_loss[:, b : b + 1],
                at_hidden=tuple(v[:, b : b + 1] for v in noise.at_hidden),
            )
            acc += mlp_cp_diagonal(mlp, x[:, b : b + 1], t[:, b : b + 1], one).diag
        assert np.abs(batched.diag - acc / batch).max() <= 1e-12

    def test_probe_shape_validation(self):
        mlp, x, t = small_problem()
        noise = sample_cp_noise(mlp, 2, "gaussian", np.random.default_rng(0))
        bad = CpNoise(at_loss=noise.at_loss[:, :1], at_hidden=noise.at_hidden)
        with pytest.raises(ValueError, match="probe"):
            mlp_cp_diagonal(mlp, x, t, bad)

    def test_peak_memory_stays_near_activation_scale(self):
        # the probe pass must not hold weight-sized per-case history
        sizes = (128, 64, 64, 64, 8)
        batch = 400
        mlp, x, t = small_problem(sizes, batch=batch, seed=0, weight_std=0.1)
        _, _, tape = mlp_objective_and_gradient(mlp, x, t)
        noise = sample_cp_noise(mlp, batch, "gaussian", np.random.default_rng(2))
        mlp_cp_diagonal(mlp, x, t, noise, tape=tape)  # warm any caches
        tracemalloc.start()
        mlp_cp_diagonal(mlp, x, t, noise, tape=tape)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        budget = 8 * 8 * (batch * (max(sizes) + 1) + mlp.num_params)
        history_size = 8 * batch * max(w.size for w in mlp.weights)
        assert peak <= budget
        assert budget < history_size  # the bound genuinely forbids history


class TestBeckerLecun:
    @pytest.mark.parametrize("sizes", ((1, 1, 1), (1, 1, 1, 1)))
    def test_exact_on_width_one_nets(self, sizes):
        mlp, x, t = small_problem(sizes, batch=3, seed=1)
        g = mlp_as_graph(mlp, x, t)
        exact = np.diag(exact_hessian(g, mlp.flat_params()))
        est = becker_lecun_diagonal(mlp, x, t)
        rel = np.linalg.norm(est.diag - exact) / np.linalg.norm(exact)
        assert rel <= 1e-8

    def test_single_linear_layer_equals_curvature_diagonal(self):
        mlp, x, t = small_problem((3, 2), batch=4, seed=2, act="identity")
        est = becker_lecun_diagonal(mlp, x, t)
        g = mlp_as_graph(mlp, x, t)
        exact = np.diag(exact_hessian(g, mlp.flat_params()))
        assert_allclose(est.diag, exact, atol=1e-12)

    def test_exact_at_one_hidden_layer(self):
        # the only intermediate Hessian it approximates is already
        # diagonal, so no bias can appear at this depth
        mlp, x, t = small_problem((4, 3, 2), seed=4)
        g = mlp_as_graph(mlp, x, t)
        exact = np.diag(exact_hessian(g, mlp.flat_params()))
        est = becker_lecun_diagonal(mlp, x, t)
        assert np.linalg.norm(est.diag - exact) <= 1e-12 * np.linalg.norm(exact)

    def test_bias_witnessed_at_two_hidden_layers(self):
        mlp, x, t = small_problem((6, 5, 4, 2), batch=2, seed=0)
        g = mlp_as_graph(mlp, x, t)
        exact = np.diag(exact_hessian(g, mlp.flat_params()))
        est = becker_lecun_diagonal(mlp, x, t)
        rel = np.linalg.norm(est.diag - exact) / np.linalg.norm(exact)
        assert rel > 1e-3

    def test_deterministic(self):
        mlp, x, t = small_problem(seed=8)
        a = becker_lecun_diagonal(mlp, x, t)
        b = becker_lecun_diagonal(mlp, x, t)
        assert_allclose(a.diag, b.diag, rtol=0, atol=0)
        assert a.samples == 0


class TestSimpleDiagonal:
    def test_single_case_matches_graph_hessian_product(self):
        mlp, x, t = small_problem(batch=1, seed=9)
        wn = sample_weight_noise(mlp, 1, "gaussian", np.random.default_rng(3))
        est = mlp_simple_diagonal(mlp, x, t, wn)
        g = mlp_as_graph(mlp, x, t)
        w = np.concatenate([v[:, :, 0].ravel() for v in wn])
        hw = hessian_vector_product(g, mlp.flat_params(), w)
        assert np.abs(est.diag - hw * w).max() <= 1e-10 * max(1, np.abs(hw).max())

    def test_monte_carlo_unbiased(self):
        mlp, x, t = small_problem(seed=1)
        g = mlp_as_graph(mlp, x, t)
        exact = np.diag(exact_hessian(g, mlp.flat_params()))
        draws = np.stack(
            diagonal_samples(mlp, x, t, "simple", "gaussian", seed=13, count=8000)
        )
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(mean - exact) <= 4 * se + 1e-12)


class TestSamplingUtilities:
    def test_prefix_of_longer_run_matches_shorter_run(self):
        mlp, x, t = small_problem(seed=5)
        short = diagonal_samples(mlp, x, t, "s", "gaussian", seed=3, count=4)
        longer = diagonal_samples(mlp, x, t, "s", "gaussian", seed=3, count=16)
        for a, b in zip(short, longer):
            assert_allclose(a, b, rtol=0, atol=0)

    def test_averaged_diagonal_reports_variance(self):
        mlp, x, t = small_problem(seed=5)
        est = averaged_diagonal(mlp, x, t, "tu", "rademacher", samples=8, seed=2)
        assert est.samples == 8
        assert np.isfinite(est.variance).all()
        single = averaged_diagonal(mlp, x, t, "tu", "rademacher", samples=1, seed=2)
        assert np.isnan(single.variance).all()


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        mlp, _, _ = small_problem((5, 4, 2), seed=7, act="softplus")
        path = tmp_path / "net.ckpt"
        save_checkpoint(mlp, path)
        back = load_checkpoint(path)
        assert back.sizes == mlp.sizes
        assert back.activation == mlp.activation
        for a, b in zip(back.weights, mlp.weights):
            assert_allclose(a, b, rtol=0, atol=0)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        mlp, _, _ = small_problem((3, 2), seed=0)
        path = tmp_path / "net.ckpt"
        save_checkpoint(mlp, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)


class TestTraining:
    def test_sgd_reduces_the_loss(self):
        mlp, x, t = small_problem((6, 4, 2), batch=32, seed=3, weight_std=0.1)
        before, _, _ = mlp_objective_and_gradient(mlp, x, t)
        trained = train_sgd(mlp, x, t, epochs=20, lr=0.1, batch_size=8,
                            rng=np.random.default_rng(0))
        after, _, _ = mlp_objective_and_gradient(trained, x, t)
        assert after < before
