"""End-to-end model assembled according to an ablation variant's wiring."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..agsf import AdaptiveGatedFusion
from ..hashing import HashHead, binarize, quantization_loss, reconstruction_loss
from ..pacl import (
    dynamic_temperature,
    global_prompt_alignment_loss,
    inter_class_affinity_loss,
    intra_class_affinity_loss,
    local_prompt_alignment_loss,
)
from ..taap import TextAffinityPrompt
from .config import ExperimentConfig, Wiring


class PromptHashModel(nn.Module):
    """Frozen surrogate features -> (prompt fusion) -> (gated SSM fusion) -> hash heads.

    Bypassed modules are not constructed.  Prompt codes come from the text
    head, so only two hash functions exist (one with ``tie_hash_heads``).
    """

    def __init__(self, config: ExperimentConfig, token_embedding: torch.Tensor):
        super().__init__()
        self.config = config
        self.wiring: Wiring = config.wiring
        dim = token_embedding.shape[1]
        mc = config.model
        self.bits = config.bits
        # unit-norm features scaled to unit RMS per coordinate, so initial logits are O(1)
        scale = dim**0.5
        self.image_head = HashHead(dim, config.bits, input_scale=scale)
        if mc.tie_hash_heads:
            self.text_head = self.image_head
        else:
            # common starting point: aligned features start with matching codes
            self.text_head = HashHead(dim, config.bits, input_scale=scale)
            self.text_head.load_state_dict(self.image_head.state_dict())
        self.taap = (
            TextAffinityPrompt(
                token_embedding, config.dataset.prompt_tokens, mc.taap_depth, mc.num_heads,
                mc.mlp_ratio, mc.train_token_embedding,
            )
            if self.wiring.taap
            else None
        )
        self.agsf = (
            AdaptiveGatedFusion(dim, mc.ssm_state, mc.num_heads, mc.mlp_ratio, mc.per_feature_theta)
            if self.wiring.agsf
            else None
        )

    def parameter_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(backbone-side, prompt/fusion) trainable parameters."""
        backbone = list(dict.fromkeys([*self.image_head.parameters(), *self.text_head.parameters()]))
        modules = []
        if self.taap is not None:
            for name, p in self.taap.named_parameters():
                if p.requires_grad:
                    (backbone if name.startswith("token_embedding") else modules).append(p)
        if self.agsf is not None:
            modules += list(self.agsf.parameters())
        return backbone, modules

    def forward(self, image: torch.Tensor, text: torch.Tensor, tokens: torch.Tensor) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        if self.taap is not None:
            t = self.taap(tokens, text)
            text_seq, text_vec = t["prompt_text_seq"], t["prompt_text"]
            out["prompt_feat"] = F.normalize(t["encoded_prompt"].mean(dim=1), dim=-1)
        else:
            text_seq, text_vec = text, text.mean(dim=1)

        if self.agsf is not None:
            image_feat, text_feat = self.agsf(image, text_seq)
        else:
            image_feat = F.normalize(image.mean(dim=1), dim=-1)
            text_feat = F.normalize(text_vec, dim=-1)
        out["image_feat"], out["text_feat"] = image_feat, text_feat

        out["image_logits"], out["image_h"] = self.image_head(image_feat)
        out["text_logits"], out["text_h"] = self.text_head(text_feat)
        if "prompt_feat" in out:
            out["prompt_logits"], out["prompt_h"] = self.text_head(out["prompt_feat"])
        return out

    @torch.no_grad()
    def encode(self, image: torch.Tensor, text: torch.Tensor, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.forward(image, text, tokens)
        return binarize(out["image_h"]), binarize(out["text_h"])

    def losses(self, out: dict[str, torch.Tensor], S: torch.Tensor, num_samples: int | None = None) -> dict[str, torch.Tensor]:
        """All six loss terms; terms disabled by the wiring are exact zeros.

        ``num_samples`` is the training-set size N in the quantization normaliser.
        """
        active = self.wiring.active_losses()
        temps = self.config.temperatures
        zero = out["image_h"].new_zeros(())
        parts = dict.fromkeys(active, zero)

        b_v, b_t = binarize(out["image_h"]), binarize(out["text_h"])
        parts["quan"] = quantization_loss(b_v, out["image_h"], out["image_logits"], b_t, out["text_h"], out["text_logits"], num_samples)
        parts["recon"] = reconstruction_loss(out["image_h"], b_v, out["text_h"], b_t)

        if self.wiring.pacl and self.wiring.agsf:
            image_c, text_c, prompt_c = out["image_feat"], out["text_feat"], out["prompt_feat"]
        else:
            # pooled surrogate image features are frozen without fusion, and without the
            # affinity losses nothing else reaches the heads: align the continuous codes
            image_c = F.normalize(out["image_h"], dim=-1)
            text_c = F.normalize(out["text_h"], dim=-1)
            prompt_c = F.normalize(out["prompt_h"], dim=-1) if "prompt_h" in out else None
        parts["gpa"] = global_prompt_alignment_loss(image_c, text_c, temps.tau1)

        if self.wiring.pacl:
            tau2 = dynamic_temperature(image_c, prompt_c, temps.tau)
            parts["lpa"] = local_prompt_alignment_loss(image_c, prompt_c, tau2)
            parts["inter"] = inter_class_affinity_loss(out["prompt_h"], out["image_h"], S)
            parts["intra"] = intra_class_affinity_loss(out["prompt_h"], S)
        return parts
