import pytest
import torch
import torch.nn.functional as F

from prompthash.agsf import AdaptiveGatedFusion, BoundaryError, FusedSequence, concat_segments
from prompthash.gradcheck import check_module, randomize_parameters
from prompthash.layers import FLIP_AXES, flip

D = 8


class FixedGate(AdaptiveGatedFusion):
    """Fusion module with theta and tau pinned to exact values."""

    def __init__(self, theta, tau):
        super().__init__(D, 4, num_heads=2, mlp_ratio=2)
        self._theta, self._tau = torch.tensor(theta, dtype=torch.float64), torch.tensor(tau, dtype=torch.float64)

    @property
    def theta(self):
        return self._theta

    @property
    def tau(self):
        return self._tau


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


@pytest.fixture
def agsf():
    torch.manual_seed(0)
    return AdaptiveGatedFusion(D, 4, num_heads=2, mlp_ratio=2).double()


class TestSegments:
    def test_split_inverts_concat(self):
        a, b = rand(2, 3, D), rand(2, 5, D, seed=1)
        fused = concat_segments(a, b)
        assert fused.boundary == 3 and fused.tensor.shape == (2, 8, D)
        x, y = fused.split()
        assert torch.equal(x, a) and torch.equal(y, b)

    def test_missing_boundary(self):
        with pytest.raises(BoundaryError):
            FusedSequence(rand(1, 4, D), None).split()

    def test_mismatched_segments(self):
        with pytest.raises(ValueError):
            concat_segments(rand(2, 3, D), rand(2, 3, D + 1))


class TestGateAndFuse:
    def test_branches_are_silu_at_init(self, agsf):
        image, text = rand(2, 4, D), rand(2, 3, D, seed=1)
        fused = agsf.gate_and_fuse(image, text)
        assert fused.tensor.shape == (2, 7, D)
        img, txt = fused.split()
        torch.testing.assert_close(img, F.silu(image), rtol=0, atol=0)
        torch.testing.assert_close(txt, F.silu(text), rtol=0, atol=0)

    def test_dim_mismatch(self, agsf):
        with pytest.raises(ValueError):
            agsf.gate_and_fuse(rand(1, 2, D), rand(1, 2, D - 1))


class TestMultiAxis:
    def test_zero_input(self, agsf):
        randomize_parameters(agsf, seed=3, scale=0.3)
        out = agsf.multi_axis_ssm(torch.zeros(2, 5, D, dtype=torch.float64))
        assert all(torch.equal(v, torch.zeros(2, 5, D, dtype=torch.float64)) for v in out.values())

    def test_matches_composed_primitives(self, agsf):
        randomize_parameters(agsf, seed=4, scale=0.3)
        x = rand(2, 6, D)
        out = agsf.multi_axis_ssm(x)
        for axis in FLIP_AXES:
            torch.testing.assert_close(out[axis], flip(agsf.ssm(flip(x, axis)), axis), rtol=0, atol=1e-12)

    def test_palindrome(self, agsf):
        randomize_parameters(agsf, seed=5, scale=0.3)
        half = rand(1, 3, D)
        x = torch.cat([half, half.flip(1)], dim=1)
        # flipping a palindrome is a no-op, so undoing the outer flip recovers the plain scan
        torch.testing.assert_close(flip(agsf.multi_axis_ssm(x)["seq"], "seq"), agsf.ssm(x), rtol=0, atol=1e-12)


class TestAdaptiveCombine:
    def branches(self, seed=0):
        return {a: rand(2, 5, D, seed=seed + i) for i, a in enumerate(FLIP_AXES)}, rand(2, 5, D, seed=seed + 9)

    def test_theta_zero(self):
        flipped, fusion = self.branches()
        assert torch.equal(FixedGate(0.0, 1.7).double().adaptive_combine(flipped, fusion), fusion)

    def test_theta_one(self):
        flipped, fusion = self.branches()
        out = FixedGate(1.0, 1.0).double().adaptive_combine(flipped, fusion)
        assert torch.equal(out, flipped["seq"] + flipped["feat"] + flipped["both"])

    def test_hand_value(self):
        ones = torch.ones(1, 2, D, dtype=torch.float64)
        out = FixedGate(0.5, 2.0).double().adaptive_combine(dict.fromkeys(FLIP_AXES, ones), ones)
        assert torch.equal(out, torch.full_like(ones, 3.5))

    def test_shape_mismatch(self, agsf):
        flipped, fusion = self.branches()
        flipped["feat"] = flipped["feat"][:, :4]
        with pytest.raises(ValueError):
            agsf.adaptive_combine(flipped, fusion)

    def test_default_gate_values(self, agsf):
        assert agsf.theta.item() == pytest.approx(0.5)
        assert agsf.tau.item() == pytest.approx(1.0)
        assert AdaptiveGatedFusion(D, 4, num_heads=2, per_feature_theta=True).theta.shape == (D,)


class TestRefineSplit:
    def test_identity_path(self, agsf):
        fit = concat_segments(rand(3, 4, D), rand(3, 2, D, seed=1))
        image, text = agsf.refine_split(fit)
        torch.testing.assert_close(image, F.normalize(fit.tensor[:, :4].mean(1), dim=-1), rtol=0, atol=1e-15)
        torch.testing.assert_close(text, F.normalize(fit.tensor[:, 4:].mean(1), dim=-1), rtol=0, atol=1e-15)

    def test_segment_swap(self, agsf):
        randomize_parameters(agsf, seed=6)
        a, b = rand(2, 4, D), rand(2, 3, D, seed=1)
        image, text = agsf.refine_split(concat_segments(a, b))
        first, second = agsf.refine_split(concat_segments(b, a))
        torch.testing.assert_close(first, text, rtol=0, atol=1e-12)
        torch.testing.assert_close(second, image, rtol=0, atol=1e-12)

    def test_missing_boundary(self, agsf):
        with pytest.raises(BoundaryError):
            agsf.refine_split(FusedSequence(rand(1, 4, D), None))


class TestPipeline:
    def test_unit_norm_outputs(self, agsf):
        randomize_parameters(agsf, seed=7, scale=0.1)
        image, text = agsf(rand(5, 4, D), rand(5, 6, D, seed=1))
        torch.testing.assert_close(image.norm(dim=-1), torch.ones(5, dtype=torch.float64))
        torch.testing.assert_close(text.norm(dim=-1), torch.ones(5, dtype=torch.float64))

    @pytest.mark.parametrize("magnitude", [1.0, 1e2, 1e3])
    def test_finite_at_large_inputs(self, agsf, magnitude):
        randomize_parameters(agsf, seed=8, scale=0.3)
        image, text = agsf(magnitude * rand(2, 4, D), magnitude * rand(2, 4, D, seed=1))
        assert torch.isfinite(image).all() and torch.isfinite(text).all()

    def test_gradients(self, agsf):
        randomize_parameters(agsf, seed=0, scale=0.1)
        assert check_module(agsf, {"image": rand(2, 4, D), "prompt_text": rand(2, 4, D, seed=1)}).passed
