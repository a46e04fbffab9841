import math

import numpy as np
import pytest
import torch

from prompthash.pacl import (
    PaclConfig,
    dynamic_temperature,
    global_prompt_alignment_loss,
    inter_class_affinity_loss,
    intra_class_affinity_loss,
    js_divergence,
    local_prompt_alignment_loss,
    symmetric_info_nce,
)


def unit_rows(gen, m, d):
    x = torch.randn(m, d, generator=gen, dtype=torch.float64)
    return x / x.norm(dim=1, keepdim=True)


def info_nce_oracle(a, b, tau):
    a, b = np.asarray(a), np.asarray(b)
    m = len(a)
    total = 0.0
    for i in range(m):
        row = [float(a[i] @ b[j]) / tau for j in range(m)]
        col = [float(a[j] @ b[i]) / tau for j in range(m)]
        total += -(row[i] - math.log(sum(math.exp(v) for v in row)))
        total += -(col[i] - math.log(sum(math.exp(v) for v in col)))
    return total / m


def pair_nll_oracle(Q, S):
    return sum(math.log1p(math.exp(Q[i][j])) - S[i][j] * Q[i][j] for i in range(len(Q)) for j in range(len(Q[0])))


def inter_oracle(hp, hv, S):
    hp, hv, S = hp.tolist(), hv.tolist(), S.tolist()
    m, n = len(hp), len(hv)
    theta = [[0.5 * sum(a * b for a, b in zip(hp[i], hv[j])) for j in range(n)] for i in range(m)]
    phi = [[0.5 * sum(a * b for a, b in zip(hv[i], hp[j])) for j in range(n)] for i in range(m)]
    return (pair_nll_oracle(theta, S) + pair_nll_oracle(phi, S)) / (m * n)


def intra_oracle(hp, S):
    hp, S = hp.tolist(), S.tolist()
    m = len(hp)
    omega = [[0.5 * sum(a * b for a, b in zip(hp[i], hp[j])) for j in range(m)] for i in range(m)]
    return pair_nll_oracle(omega, S) / (m * m)


class TestInfoNCE:
    def test_single_sample_is_zero(self):
        x = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
        assert global_prompt_alignment_loss(x, x).item() == 0.0
        assert local_prompt_alignment_loss(x, x, 0.05).item() == 0.0

    def test_orthogonal_pair(self):
        e = torch.eye(2, dtype=torch.float64)
        per_direction = -math.log(math.exp(1 / 0.07) / (math.exp(1 / 0.07) + 1))
        # both directions summed per sample, then averaged over the batch
        assert global_prompt_alignment_loss(e, e, 0.07).item() == pytest.approx(2 * per_direction, rel=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_straight_line_oracle(self, seed):
        gen = torch.Generator().manual_seed(seed)
        a, b = unit_rows(gen, 4, 6), unit_rows(gen, 4, 6)
        assert abs(global_prompt_alignment_loss(a, b, 0.07).item() - info_nce_oracle(a, b, 0.07)) <= 1e-10
        assert abs(local_prompt_alignment_loss(a, b, 0.05).item() - info_nce_oracle(a, b, 0.05)) <= 1e-10

    def test_local_equals_global_at_same_temperature(self):
        gen = torch.Generator().manual_seed(9)
        a, b = unit_rows(gen, 5, 4), unit_rows(gen, 5, 4)
        assert local_prompt_alignment_loss(a, b, 0.07).item() == global_prompt_alignment_loss(a, b, 0.07).item()

    def test_rotation_invariant(self):
        gen = torch.Generator().manual_seed(4)
        a, b = unit_rows(gen, 6, 5), unit_rows(gen, 6, 5)
        Q, _ = torch.linalg.qr(torch.randn(5, 5, generator=gen, dtype=torch.float64))
        torch.testing.assert_close(symmetric_info_nce(a @ Q, b @ Q, 0.07), symmetric_info_nce(a, b, 0.07), rtol=0, atol=1e-12)

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(2)
        for _ in range(20):
            assert symmetric_info_nce(unit_rows(gen, 3, 4), unit_rows(gen, 3, 4), 0.07).item() > 0

    def test_bad_temperature(self):
        x = torch.eye(2)
        with pytest.raises(ValueError):
            global_prompt_alignment_loss(x, x, 0.0)
        with pytest.raises(ValueError):
            PaclConfig(tau=-1)


class TestDynamicTemperature:
    def test_identical_features(self):
        x = torch.randn(4, 6, dtype=torch.float64)
        assert dynamic_temperature(x, x, 0.07).item() == pytest.approx(0.07, abs=1e-15)

    def test_disjoint_distributions(self):
        p = torch.tensor([1.0, 0.0], dtype=torch.float64)
        q = torch.tensor([0.0, 1.0], dtype=torch.float64)
        js = js_divergence(p, q)
        assert js.item() == pytest.approx(math.log(2), abs=1e-10)
        assert 0.07 / (1 + js.item()) == pytest.approx(0.04134, abs=1e-5)

    def test_bounds_on_random_batches(self):
        gen = torch.Generator().manual_seed(0)
        lo = 0.07 / (1 + math.log(2))
        for _ in range(100):
            scale = float(torch.rand(1, generator=gen)) * 20
            t = dynamic_temperature(scale * torch.randn(8, 16, generator=gen, dtype=torch.float64),
                                    scale * torch.randn(8, 16, generator=gen, dtype=torch.float64), 0.07).item()
            assert lo <= t <= 0.07


class TestAffinity:
    def test_inter_at_zero_similarity(self):
        h = torch.zeros(3, 8, dtype=torch.float64)
        S = torch.tensor([[1, 0, 1], [0, 1, 0], [1, 1, 1]], dtype=torch.float64)
        assert inter_class_affinity_loss(h, h, S).item() == pytest.approx(2 * math.log(2), abs=1e-15)

    def test_intra_at_zero_codes(self):
        h = torch.zeros(4, 8, dtype=torch.float64)
        S = torch.eye(4, dtype=torch.float64)
        assert intra_class_affinity_loss(h, S).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_scalar_loop_oracles_all_sizes(self):
        gen = torch.Generator().manual_seed(0)
        for m in range(1, 9):
            for n in range(1, 9):
                hp, hv = torch.tanh(torch.randn(m, 6, generator=gen, dtype=torch.float64)), torch.tanh(torch.randn(m, 6, generator=gen, dtype=torch.float64))
                hp_c, hv_c = torch.tanh(torch.randn(n, 6, generator=gen, dtype=torch.float64)), torch.tanh(torch.randn(n, 6, generator=gen, dtype=torch.float64))
                S = (torch.rand(m, n, generator=gen) < 0.5).double()
                got = inter_class_affinity_loss(hp, hv, S, hp_c, hv_c).item()
                theta = (0.5 * hp @ hv_c.T).tolist()
                phi = (0.5 * hv @ hp_c.T).tolist()
                want = (pair_nll_oracle(theta, S.tolist()) + pair_nll_oracle(phi, S.tolist())) / (m * n)
                assert abs(got - want) <= 1e-12
                got = intra_class_affinity_loss(hp, S, hp_c).item()
                omega = (0.5 * hp @ hp_c.T).tolist()
                assert abs(got - pair_nll_oracle(omega, S.tolist()) / (m * n)) <= 1e-12

    def test_full_loop_oracle_square(self):
        gen = torch.Generator().manual_seed(3)
        hp, hv = torch.tanh(torch.randn(3, 5, generator=gen, dtype=torch.float64)), torch.tanh(torch.randn(3, 5, generator=gen, dtype=torch.float64))
        S = (torch.rand(3, 3, generator=gen) < 0.5).double()
        assert abs(inter_class_affinity_loss(hp, hv, S).item() - inter_oracle(hp, hv, S)) <= 1e-12
        assert abs(intra_class_affinity_loss(hp, S).item() - intra_oracle(hp, S)) <= 1e-12

    def test_positive_pair_monotone(self):
        S = torch.ones(1, 1, dtype=torch.float64)
        values = [inter_class_affinity_loss(torch.full((1, 4), c, dtype=torch.float64),
                                            torch.full((1, 4), c, dtype=torch.float64), S).item()
                  for c in np.linspace(0, 0.99, 12)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_intra_symmetric_under_transpose(self):
        gen = torch.Generator().manual_seed(1)
        hp = torch.tanh(torch.randn(5, 4, generator=gen, dtype=torch.float64))
        S = (torch.rand(5, 5, generator=gen) < 0.5).double()
        S = ((S + S.T) > 0).double()
        torch.testing.assert_close(intra_class_affinity_loss(hp, S), intra_class_affinity_loss(hp, S.T))

    def test_shape_mismatch(self):
        h = torch.zeros(3, 4)
        with pytest.raises(ValueError):
            inter_class_affinity_loss(h, h, torch.zeros(3, 2))
        with pytest.raises(ValueError):
            intra_class_affinity_loss(h, torch.zeros(2, 3))
