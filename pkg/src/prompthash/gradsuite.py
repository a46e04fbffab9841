"""Finite-difference checks for every differentiable operation, over many seeds."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import torch

from .agsf import AdaptiveGatedFusion
from .gradcheck import GradCheckReport, check_gradients, check_module, randomize_parameters
from .hashing import HashHead, binarize, quantization_loss, reconstruction_loss
from .layers import GlobalResponseNorm, SelectiveSSM, TransformerEncoderLayer, selective_scan
from .pacl import (
    dynamic_temperature,
    global_prompt_alignment_loss,
    inter_class_affinity_loss,
    intra_class_affinity_loss,
    local_prompt_alignment_loss,
)
from .taap import TextAffinityPrompt

M, L, D, N_STATE, K = 3, 5, 8, 4, 8


def _randn(gen: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _labels(gen: torch.Generator, m: int, n: int) -> torch.Tensor:
    return (torch.rand(m, n, generator=gen) < 0.5).to(torch.float64)


def _grn(seed, gen):
    mod = randomize_parameters(GlobalResponseNorm(D).double(), seed, scale=1.0)
    return check_module(mod, {"x": _randn(gen, M, L, D)}, seed=seed)


def _transformer(seed, gen):
    mod = randomize_parameters(TransformerEncoderLayer(D, num_heads=2, mlp_ratio=2).double(), seed)
    return check_module(mod, {"x": _randn(gen, M, L, D)}, seed=seed)


def _selective_ssm(seed, gen):
    torch.manual_seed(seed)
    mod = randomize_parameters(SelectiveSSM(D, N_STATE).double(), seed, scale=0.1)
    return check_module(mod, {"x": _randn(gen, M, L, D)}, seed=seed)


def _scan_raw(seed, gen):
    inputs = {
        "x": _randn(gen, M, L, D),
        "delta": torch.rand(M, L, D, generator=gen, dtype=torch.float64) + 0.05,
        "A": -torch.rand(D, N_STATE, generator=gen, dtype=torch.float64) - 0.1,
        "B": _randn(gen, M, L, N_STATE),
        "C": _randn(gen, M, L, N_STATE),
        "skip": _randn(gen, D),
    }
    return check_gradients(selective_scan, inputs, seed=seed)


def _taap_fuse(seed, gen):
    torch.manual_seed(seed)
    mod = TextAffinityPrompt(_randn(gen, 12, D).float(), 4, num_heads=2, mlp_ratio=2).double()
    randomize_parameters(mod, seed)
    tokens = torch.randint(0, 12, (M, 4), generator=gen)
    return check_module(mod, {"tokens": tokens, "text": _randn(gen, M, L, D)}, seed=seed)


def _agsf(seed, gen):
    torch.manual_seed(seed)
    mod = randomize_parameters(AdaptiveGatedFusion(D, N_STATE, num_heads=2, mlp_ratio=2).double(), seed, scale=0.1)
    return check_module(mod, {"image": _randn(gen, 2, 4, D), "prompt_text": _randn(gen, 2, 4, D)}, seed=seed)


def _gpa(seed, gen):
    return check_gradients(global_prompt_alignment_loss, {"image": _randn(gen, M, D), "text": _randn(gen, M, D)}, seed=seed)


def _lpa(seed, gen):
    # the temperature stays inside the graph so its gradient is checked too
    def fn(image, prompt):
        return local_prompt_alignment_loss(image, prompt, dynamic_temperature(image, prompt))

    return check_gradients(fn, {"image": _randn(gen, M, D), "prompt": _randn(gen, M, D)}, seed=seed)


def _inter(seed, gen):
    S = _labels(gen, M, M)
    return check_gradients(lambda hp, hv: inter_class_affinity_loss(hp, hv, S),
                           {"hp": torch.tanh(_randn(gen, M, K)), "hv": torch.tanh(_randn(gen, M, K))}, seed=seed)


def _intra(seed, gen):
    S = _labels(gen, M, M)
    return check_gradients(lambda hp: intra_class_affinity_loss(hp, S), {"hp": torch.tanh(_randn(gen, M, K))}, seed=seed)


def _quan(seed, gen):
    f_v, f_t = _randn(gen, M, K), _randn(gen, M, K)
    b_v, b_t = binarize(f_v), binarize(f_t)

    def fn(f_v, f_t):
        return quantization_loss(b_v, torch.tanh(f_v), f_v, b_t, torch.tanh(f_t), f_t)

    return check_gradients(fn, {"f_v": f_v, "f_t": f_t}, seed=seed)


def _recon(seed, gen):
    h_v, h_t = torch.tanh(_randn(gen, M, K)), torch.tanh(_randn(gen, M, K))
    b_v, b_t = binarize(h_v), binarize(h_t)
    return check_gradients(lambda h_v, h_t: reconstruction_loss(h_v, b_v, h_t, b_t), {"h_v": h_v, "h_t": h_t}, seed=seed)


def _hash_head(seed, gen):
    torch.manual_seed(seed)
    return check_module(HashHead(D, K).double(), {"features": _randn(gen, M, D)}, seed=seed)


CASES: dict[str, Callable[[int, torch.Generator], GradCheckReport]] = {
    "grn": _grn,
    "transformer_layer": _transformer,
    "ssm_scan": _scan_raw,
    "selective_ssm": _selective_ssm,
    "taap_fuse": _taap_fuse,
    "agsf": _agsf,
    "loss_gpa": _gpa,
    "loss_lpa": _lpa,
    "loss_inter": _inter,
    "loss_intra": _intra,
    "loss_quan": _quan,
    "loss_recon": _recon,
    "hash_head": _hash_head,
}


@dataclass
class SuiteResult:
    tolerance: float
    reports: dict[str, list[GradCheckReport]] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for reps in self.reports.values() for r in reps)

    def worst(self, case: str) -> float:
        return max(r.max_rel_error for r in self.reports[case])

    def lines(self) -> list[str]:
        out = []
        for case, reps in self.reports.items():
            failed = sum(not r.passed for r in reps)
            status = "pass" if not failed else f"FAIL ({failed}/{len(reps)} seeds)"
            out.append(f"{case:18s} {status:10s} worst rel err {self.worst(case):.2e} over {len(reps)} seeds")
        return out


def run_suite(seeds: int = 20, tolerance: float = 1e-4, cases: list[str] | None = None) -> SuiteResult:
    names = list(CASES) if cases is None else cases
    unknown = set(names) - set(CASES)
    if unknown:
        raise ValueError(f"unknown gradient cases {sorted(unknown)}")
    result = SuiteResult(tolerance)
    start = time.perf_counter()
    for name in names:
        reps = []
        for seed in range(seeds):
            gen = torch.Generator().manual_seed(1000 * seed + 7)
            rep = CASES[name](seed, gen)
            rep.passed = rep.failure is None and rep.max_rel_error <= tolerance
            reps.append(rep)
        result.reports[name] = reps
    result.seconds = time.perf_counter() - start
    return result
