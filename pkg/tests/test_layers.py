import math

import numpy as np
import pytest
import torch

from prompthash.gradcheck import check_gradients, check_module, randomize_parameters
from prompthash.layers import (
    FLIP_AXES,
    GlobalResponseNorm,
    MultiHeadSelfAttention,
    ResidualMLP,
    SelectiveSSM,
    TransformerEncoderLayer,
    flip,
    inverse_softplus,
    selective_scan,
)


def naive_scan(x, delta, A, B, C, skip):
    """Plain nested-loop recurrence, float64 numpy."""
    m, length, d = x.shape
    n = A.shape[1]
    y = np.zeros((m, length, d))
    for b in range(m):
        h = np.zeros((d, n))
        for t in range(length):
            for i in range(d):
                for s in range(n):
                    h[i, s] = math.exp(delta[b, t, i] * A[i, s]) * h[i, s] + delta[b, t, i] * B[b, t, s] * x[b, t, i]
                y[b, t, i] = sum(C[b, t, s] * h[i, s] for s in range(n)) + skip[i] * x[b, t, i]
    return y


def random_scan_inputs(rng, m, length, d, n):
    return dict(
        x=rng.standard_normal((m, length, d)),
        delta=rng.uniform(0.01, 1.0, (m, length, d)),
        A=-rng.uniform(0.1, 2.0, (d, n)),
        B=rng.standard_normal((m, length, n)),
        C=rng.standard_normal((m, length, n)),
        skip=rng.standard_normal(d),
    )


class TestFlip:
    @pytest.mark.parametrize("axis", FLIP_AXES)
    def test_involution(self, axis):
        x = torch.randn(2, 5, 7)
        assert torch.equal(flip(flip(x, axis), axis), x)

    def test_axes(self):
        x = torch.arange(6.0).reshape(1, 2, 3)
        assert torch.equal(flip(x, "seq")[0, 0], x[0, 1])
        assert torch.equal(flip(x, "feat")[0, :, 0], x[0, :, 2])
        assert torch.equal(flip(x, "both")[0, 0, 0], x[0, 1, 2])

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            flip(torch.zeros(1, 2, 3), "time")


class TestGRN:
    def test_identity_at_init(self):
        x = torch.randn(3, 6, 8, dtype=torch.float64)
        assert torch.equal(GlobalResponseNorm(8).double()(x), x)

    def test_matches_formula(self):
        torch.manual_seed(0)
        grn = randomize_parameters(GlobalResponseNorm(4).double(), seed=1, scale=1.0)
        x = torch.randn(2, 3, 4, dtype=torch.float64)
        g = x.norm(dim=-1, keepdim=True)
        expected = grn.weight * (x * (g / (g.mean(dim=1, keepdim=True) + grn.eps))) + grn.bias + x
        torch.testing.assert_close(grn(x), expected, rtol=0, atol=1e-14)

    def test_zero_block_finite(self):
        out = GlobalResponseNorm(4)(torch.zeros(1, 3, 4))
        assert torch.isfinite(out).all()
        assert torch.equal(out, torch.zeros(1, 3, 4))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        grn = randomize_parameters(GlobalResponseNorm(5).double(), seed, scale=1.0)
        x = torch.randn(2, 4, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        assert check_module(grn, {"x": x}).passed


class TestTransformerLayer:
    def test_identity_at_init(self):
        x = torch.randn(2, 5, 8)
        assert torch.equal(TransformerEncoderLayer(8, num_heads=2)(x), x)

    def test_zero_input_passthrough(self):
        x = torch.zeros(1, 4, 8)
        assert torch.equal(TransformerEncoderLayer(8, num_heads=2)(x), x)

    def test_permutation_equivariant(self):
        torch.manual_seed(0)
        layer = randomize_parameters(TransformerEncoderLayer(8, num_heads=2).double(), seed=2)
        x = torch.randn(2, 4, 8, dtype=torch.float64)
        perm = torch.tensor([2, 0, 3, 1])
        torch.testing.assert_close(layer(x[:, perm]), layer(x)[:, perm], rtol=0, atol=1e-12)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            MultiHeadSelfAttention(10, 4)

    @pytest.mark.parametrize("seed", range(2))
    def test_gradients(self, seed):
        torch.manual_seed(seed)
        layer = randomize_parameters(TransformerEncoderLayer(4, num_heads=2, mlp_ratio=2).double(), seed)
        assert check_module(layer, {"x": torch.randn(2, 3, 4, dtype=torch.float64)}).passed


class TestResidualMLP:
    def test_identity_at_init(self):
        x = torch.randn(3, 7)
        assert torch.equal(ResidualMLP(7)(x), x)


class TestSelectiveScan:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_recurrence(self, seed):
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 33)), int(rng.integers(1, 9)), int(rng.integers(1, 17)))
        inputs = random_scan_inputs(rng, *shape)
        expected = naive_scan(**inputs)
        got = selective_scan(**{k: torch.from_numpy(v) for k, v in inputs.items()}).numpy()
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)

    def test_zero_drive_gives_skip_only(self):
        rng = np.random.default_rng(0)
        inputs = {k: torch.from_numpy(v) for k, v in random_scan_inputs(rng, 2, 5, 3, 4).items()}
        inputs["B"] = torch.zeros_like(inputs["B"])
        out = selective_scan(**inputs)
        torch.testing.assert_close(out, inputs["skip"] * inputs["x"], rtol=0, atol=0)

    def test_causal(self):
        rng = np.random.default_rng(1)
        inputs = {k: torch.from_numpy(v) for k, v in random_scan_inputs(rng, 1, 8, 3, 4).items()}
        base = selective_scan(**inputs)
        inputs["x"] = inputs["x"].clone()
        inputs["x"][:, 5:] += 1.0
        changed = selective_scan(**inputs)
        assert torch.equal(base[:, :5], changed[:, :5])

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        inputs = {k: torch.from_numpy(v) for k, v in random_scan_inputs(rng, 2, 6, 3, 4).items()}
        assert check_gradients(selective_scan, inputs).passed

    def test_matches_torch_gradcheck(self):
        rng = np.random.default_rng(5)
        inputs = {k: torch.from_numpy(v).requires_grad_() for k, v in random_scan_inputs(rng, 2, 4, 2, 3).items()}
        assert torch.autograd.gradcheck(lambda *a: selective_scan(*a), tuple(inputs.values()))


class TestSelectiveSSM:
    def test_decay_in_unit_interval(self):
        torch.manual_seed(0)
        ssm = SelectiveSSM(6, 8)
        x = 5 * torch.randn(3, 5, 6)
        delta, _, _ = ssm.discretization(x)
        decay = torch.exp(delta.unsqueeze(-1) * ssm.A)
        assert (ssm.A < 0).all() and (delta > 0).all()
        assert (decay > 0).all() and (decay <= 1).all()

    def test_delta_bias_init(self):
        assert inverse_softplus(0.1) == pytest.approx(math.log(math.expm1(0.1)))
        ssm = SelectiveSSM(4)
        delta, _, _ = ssm.discretization(torch.zeros(1, 1, 4))
        torch.testing.assert_close(delta, torch.full((1, 1, 4), 0.1))

    def test_gradients(self):
        torch.manual_seed(0)
        ssm = randomize_parameters(SelectiveSSM(4, 3).double(), seed=0, scale=0.1)
        assert check_module(ssm, {"x": torch.randn(2, 5, 4, dtype=torch.float64)}).passed
