"""Prompt alignment contrastive losses and label-affinity likelihood losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

JS_EPS = 1e-12


@dataclass
class PaclConfig:
    tau: float = 0.07  # base temperature of the local (image-prompt) loss
    tau1: float = 0.07  # temperature of the global (image-text) loss

    def __post_init__(self):
        if self.tau <= 0 or self.tau1 <= 0:
            raise ValueError("temperatures must be positive")


def symmetric_info_nce(a: torch.Tensor, b: torch.Tensor, temperature: float | torch.Tensor) -> torch.Tensor:
    """Both directions of in-batch InfoNCE, summed per sample and averaged over the batch.

    Row ``i`` of ``a`` is matched with row ``i`` of ``b``; the other rows are negatives.
    """
    if not isinstance(temperature, torch.Tensor) and temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = a @ b.T / temperature
    target = torch.arange(a.shape[0], device=a.device)
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def global_prompt_alignment_loss(image: torch.Tensor, text: torch.Tensor, tau1: float = 0.07) -> torch.Tensor:
    return symmetric_info_nce(image, text, tau1)


def js_divergence(p: torch.Tensor, q: torch.Tensor, eps: float = JS_EPS) -> torch.Tensor:
    """Jensen-Shannon divergence (natural log) between probability vectors on the last axis."""
    m = 0.5 * (p + q)
    kl_pm = (p * (torch.log(p + eps) - torch.log(m + eps))).sum(-1)
    kl_qm = (q * (torch.log(q + eps) - torch.log(m + eps))).sum(-1)
    return 0.5 * (kl_pm + kl_qm)


def dynamic_temperature(image: torch.Tensor, prompt: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """tau / (1 + JS) between softmaxed batch-mean features; lies in [tau / (1 + ln 2), tau]."""
    p = torch.softmax(image.mean(dim=0), dim=-1)
    q = torch.softmax(prompt.mean(dim=0), dim=-1)
    return tau / (1 + js_divergence(p, q))


def local_prompt_alignment_loss(image: torch.Tensor, prompt: torch.Tensor, tau2: float | torch.Tensor) -> torch.Tensor:
    return symmetric_info_nce(image, prompt, tau2)


def _pair_nll(similarity: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
    # -(S * Q - log(1 + e^Q)), summed
    return (F.softplus(similarity) - S * similarity).sum()


def inter_class_affinity_loss(
    h_prompt: torch.Tensor,
    h_image: torch.Tensor,
    S: torch.Tensor,
    h_prompt_cand: torch.Tensor | None = None,
    h_image_cand: torch.Tensor | None = None,
) -> torch.Tensor:
    """Pairwise logistic likelihood over prompt->image and image->prompt similarities.

    Rows index the batch (``h_prompt``, ``h_image``: M x K) and columns the
    candidate set (N x K; defaults to the batch itself).  ``S`` is M x N.
    """
    h_prompt_cand = h_prompt if h_prompt_cand is None else h_prompt_cand
    h_image_cand = h_image if h_image_cand is None else h_image_cand
    m, n = h_prompt.shape[0], h_image_cand.shape[0]
    if S.shape != (m, n) or h_image.shape[0] != m or h_prompt_cand.shape[0] != n:
        raise ValueError(f"similarity matrix {tuple(S.shape)} does not match codes ({m}, {n})")
    S = S.to(h_prompt.dtype)
    theta = 0.5 * h_prompt @ h_image_cand.T
    phi = 0.5 * h_image @ h_prompt_cand.T
    return (_pair_nll(theta, S) + _pair_nll(phi, S)) / (m * n)


def intra_class_affinity_loss(
    h_prompt: torch.Tensor, S: torch.Tensor, h_prompt_cand: torch.Tensor | None = None
) -> torch.Tensor:
    h_prompt_cand = h_prompt if h_prompt_cand is None else h_prompt_cand
    m, n = h_prompt.shape[0], h_prompt_cand.shape[0]
    if S.shape != (m, n):
        raise ValueError(f"similarity matrix {tuple(S.shape)} does not match codes ({m}, {n})")
    omega = 0.5 * h_prompt @ h_prompt_cand.T
    return _pair_nll(omega, S.to(h_prompt.dtype)) / (m * n)
