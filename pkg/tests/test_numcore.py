import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ilr import numcore as nc

F64 = torch.float64


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=F64) * 2 - 1


def fd_error(f, x, step=1e-5):
    x = x.detach().clone().requires_grad_(True)
    (g,) = nc.grad(f(x), [x])
    return nc.grad_check_error(g, nc.finite_diff_grad(f, x, step), atol=1e-12)


class TestMatmul:
    def test_identity(self):
        eye = torch.eye(2, dtype=F64)
        assert torch.equal(nc.matmul(eye, eye), eye)
        a = nc.tensor([[1, 2], [3, 4]])
        assert torch.equal(nc.matmul(a, eye), a)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="inner extents"):
            nc.matmul(rand(3, 4), rand(3, 2))

    def test_gradients_match_finite_differences(self):
        a, b, w = rand(3, 4, seed=1), rand(4, 2, seed=2), rand(3, 2, seed=3)
        assert fd_error(lambda x: (nc.matmul(x, b) * w).sum(), a) < 1e-7
        assert fd_error(lambda x: (nc.matmul(a, x) * w).sum(), b) < 1e-7


class TestElementwise:
    def test_add_zero(self):
        x = rand(3, 4)
        assert torch.equal(nc.add(x, torch.zeros_like(x)), x)

    def test_silu_zero(self):
        assert float(nc.silu(torch.zeros(1, dtype=F64))) == 0.0

    def test_silu_grad_at_one(self):
        assert fd_error(lambda x: nc.silu(x).sum(), torch.ones(1, dtype=F64)) < 1e-7
        # analytic: sigmoid(1) * (1 + 1 * (1 - sigmoid(1)))
        s = 1 / (1 + math.exp(-1))
        x = torch.ones(1, dtype=F64, requires_grad=True)
        (g,) = nc.grad(nc.silu(x).sum(), [x])
        assert abs(float(g) - s * (2 - s)) < 1e-15

    def test_row_vector_broadcast_and_rejection(self):
        x, v = rand(3, 4), rand(4)
        assert nc.mul(x, v).shape == (3, 4)
        with pytest.raises(ValueError, match="incompatible"):
            nc.add(x, rand(3))

    def test_scale_and_neg(self):
        x = rand(2, 2)
        assert torch.equal(nc.scale(x, 2.0), 2 * x)
        assert torch.equal(nc.neg(x), -x)


class TestSoftmax:
    def test_uniform_row(self):
        out = nc.softmax_rows(torch.full((1, 5), 3.0, dtype=F64))
        assert torch.allclose(out, torch.full((1, 5), 0.2, dtype=F64), atol=0, rtol=1e-15)

    def test_masked_position_is_exactly_zero(self):
        out = nc.softmax_rows(torch.zeros(1, 2, dtype=F64), torch.tensor([[0.0, float("-inf")]], dtype=F64))
        assert out.tolist() == [[1.0, 0.0]]

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError, match="fully masked"):
            nc.softmax_rows(torch.zeros(2, 2, dtype=F64),
                            torch.tensor([[0.0, 0.0], [float("-inf")] * 2], dtype=F64))

    def test_rows_sum_to_one_and_grad(self):
        x, w = rand(4, 6, seed=4), rand(4, 6, seed=5)
        out = nc.softmax_rows(x)
        assert float((out.sum(-1) - 1).abs().max()) <= 1e-12
        assert fd_error(lambda z: (nc.softmax_rows(z) * w).sum(), x) < 1e-7

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 7), elements=st.floats(-30, 30)))
    def test_property_rows_are_distributions(self, x):
        out = nc.softmax_rows(torch.as_tensor(x))
        assert float((out.sum(-1) - 1).abs().max()) <= 1e-12
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


class TestRmsNorm:
    def test_constant_vector_normalises_to_one(self):
        out = nc.rms_norm(torch.full((5,), 3.0, dtype=F64), torch.ones(5, dtype=F64), 1e-12)
        assert torch.allclose(out, torch.ones(5, dtype=F64), rtol=1e-12, atol=0)

    def test_zero_vector(self):
        out = nc.rms_norm(torch.zeros(4, dtype=F64), torch.ones(4, dtype=F64), 1e-5)
        assert torch.equal(out, torch.zeros(4, dtype=F64))

    def test_grad(self):
        x, w, c = rand(2, 6, seed=6), rand(6, seed=7), rand(2, 6, seed=8)
        assert fd_error(lambda z: (nc.rms_norm(z, w, 1e-5) * c).sum(), x) < 1e-7
        assert fd_error(lambda z: (nc.rms_norm(x, z, 1e-5) * c).sum(), w) < 1e-7

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            nc.rms_norm(rand(3), torch.ones(3, dtype=F64), 0.0)


class TestEmbedding:
    def test_lookup(self):
        table = rand(4, 3)
        assert torch.equal(nc.embedding_gather(table, [0]), table[:1])

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            nc.embedding_gather(rand(4, 3), [4])

    def test_repeated_ids_accumulate(self):
        table = rand(4, 3).requires_grad_(True)
        w = rand(2, 3, seed=9)
        (g,) = nc.grad((nc.embedding_gather(table, [2, 2]) * w).sum(), [table])
        assert torch.equal(g[2], w[0] + w[1])
        assert float(g[[0, 1, 3]].abs().max()) == 0.0

    def test_grad(self):
        table, w = rand(5, 3, seed=10), rand(4, 3, seed=11)
        assert fd_error(lambda t: (nc.embedding_gather(t, [1, 3, 1, 0]) * w).sum(), table) < 1e-7


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = nc.cross_entropy_mean(torch.zeros(4, 7, dtype=F64), [0, 3, 6, 2])
        assert abs(float(loss) - math.log(7)) < 1e-15

    def test_confident_limit(self):
        logits = torch.full((2, 5), -1e4, dtype=F64)
        logits[0, 1] = logits[1, 4] = 1e4
        assert float(nc.cross_entropy_mean(logits, [1, 4])) == 0.0

    def test_matches_scalar_oracle(self):
        logits = rand(3, 5, seed=12) * 4
        targets = [2, 0, 4]
        expected = 0.0
        for t, y in enumerate(targets):
            row = logits[t].tolist()
            expected -= math.log(math.exp(row[y]) / sum(math.exp(z) for z in row))
        assert abs(float(nc.cross_entropy_mean(logits, targets)) - expected / 3) < 1e-14
        assert fd_error(lambda z: nc.cross_entropy_mean(z, targets), logits) < 1e-7

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            nc.cross_entropy_mean(rand(3, 5), [0, 1])


class TestBackward:
    def test_sum_gives_ones(self):
        x = rand(3, 2).requires_grad_(True)
        nc.backward(x.sum())
        assert torch.equal(x.grad, torch.ones_like(x))

    def test_non_scalar_rejected(self):
        x = rand(3).requires_grad_(True)
        with pytest.raises(ValueError, match="scalar"):
            nc.backward(x * 2)

    def test_reused_weight_accumulates_per_application(self):
        # f(x) = tanh(x @ w) applied twice with the same w
        w = rand(3, 3, seed=13).requires_grad_(True)
        x = rand(2, 3, seed=14)

        def f(h, weight):
            return torch.tanh(nc.matmul(h, weight))

        nc.backward(f(f(x, w), w).sum())
        total = w.grad.clone()
        h1 = f(x, w.detach())
        w1 = w.detach().clone().requires_grad_(True)
        (g_first,) = nc.grad(f(f(x, w1), w.detach()).sum(), [w1])
        w2 = w.detach().clone().requires_grad_(True)
        (g_second,) = nc.grad(f(h1, w2).sum(), [w2])
        assert nc.max_abs_diff(total, g_first + g_second) < 1e-14

    def test_deterministic(self):
        def run():
            w = rand(5, 5, seed=15).requires_grad_(True)
            nc.backward(torch.tanh(nc.matmul(rand(4, 5, seed=16), w)).pow(2).sum())
            return w.grad
        assert torch.equal(run(), run())


class TestFiniteDiff:
    def test_sum(self):
        x = rand(4)
        assert torch.allclose(nc.finite_diff_grad(lambda z: z.sum(), x), torch.ones(4, dtype=F64), atol=1e-10)

    def test_square(self):
        g = nc.finite_diff_grad(lambda z: (z ** 2).sum(), torch.tensor([3.0], dtype=F64))
        assert abs(float(g) - 6.0) < 1e-8

    def test_step_positive(self):
        with pytest.raises(ValueError):
            nc.finite_diff_grad(lambda z: z.sum(), rand(2), 0.0)

    def test_agrees_with_backward_on_mlp(self):
        w1, w2, x = rand(4, 6, seed=17), rand(6, 1, seed=18), rand(5, 4, seed=19)

        def loss(w):
            return nc.matmul(nc.silu(nc.matmul(x, w)), w2).pow(2).sum()

        assert fd_error(loss, w1) < 1e-6

    def test_batched_matches_loop(self):
        w = rand(3, 3, seed=20)

        def f(v):
            return torch.tanh(v @ w).sum()

        x = rand(2, 3, seed=21)
        assert nc.max_abs_diff(nc.finite_diff_grad(f, x, 1e-5), nc.finite_diff_grad_batched(f, x, 1e-5)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["matmul", "silu", "softmax", "rms", "ce"]))
def test_property_backward_matches_finite_differences(seed, op):
    x = rand(3, 4, seed=seed)
    c = rand(3, 4, seed=seed + 1)
    fns = {
        "matmul": lambda z: (nc.matmul(z, rand(4, 4, seed=seed + 2)) * c).sum(),
        "silu": lambda z: (nc.silu(z) * c).sum(),
        "softmax": lambda z: (nc.softmax_rows(z) * c).sum(),
        "rms": lambda z: (nc.rms_norm(z, rand(4, seed=seed + 3), 1e-5) * c).sum(),
        "ce": lambda z: nc.cross_entropy_mean(z, [0, 3, 1]),
    }
    assert fd_error(fns[op], x) < 1e-6
