"""Adaptive gated state-space fusion of image and prompt-text token sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import FLIP_AXES, GlobalResponseNorm, ResidualMLP, SelectiveSSM, TransformerEncoderLayer, flip


class BoundaryError(ValueError):
    pass


@dataclass
class FusedSequence:
    """Concatenated (M, L^v + L^pt, D) sequence with the index where the text segment starts."""

    tensor: torch.Tensor
    boundary: int | None

    def with_tensor(self, tensor: torch.Tensor) -> "FusedSequence":
        return FusedSequence(tensor, self.boundary)

    def split(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self.boundary is None:
            raise BoundaryError("fused sequence carries no segment boundary")
        return self.tensor[:, : self.boundary], self.tensor[:, self.boundary :]


def concat_segments(first: torch.Tensor, second: torch.Tensor) -> FusedSequence:
    if first.shape[-1] != second.shape[-1] or first.shape[0] != second.shape[0]:
        raise ValueError(f"cannot concatenate {tuple(first.shape)} and {tuple(second.shape)}")
    return FusedSequence(torch.cat([first, second], dim=1), first.shape[1])


class ModalityGate(nn.Module):
    """SiLU(MLP(GRN(x))) applied token-wise."""

    def __init__(self, dim: int):
        super().__init__()
        self.grn = GlobalResponseNorm(dim)
        self.mlp = ResidualMLP(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.silu(self.mlp(self.grn(x)))


class AdaptiveGatedFusion(nn.Module):
    def __init__(
        self,
        dim: int,
        state_size: int = 16,
        num_heads: int = 4,
        mlp_ratio: int = 4,
        per_feature_theta: bool = False,
        theta_init: float = 0.5,
        tau_init: float = 1.0,
    ):
        super().__init__()
        self.image_gate = ModalityGate(dim)
        self.text_gate = ModalityGate(dim)
        self.ssm = SelectiveSSM(dim, state_size)
        theta_shape = (dim,) if per_feature_theta else ()
        self.theta_raw = nn.Parameter(torch.full(theta_shape, math.log(theta_init / (1 - theta_init))))
        # softplus^-1(tau_init)
        self.tau_raw = nn.Parameter(torch.tensor(tau_init + math.log(-math.expm1(-tau_init))))
        self.refine_mlp = ResidualMLP(dim)
        self.refine_layer = TransformerEncoderLayer(dim, num_heads, mlp_ratio)

    @property
    def theta(self) -> torch.Tensor:
        return torch.sigmoid(self.theta_raw)

    @property
    def tau(self) -> torch.Tensor:
        return F.softplus(self.tau_raw)

    def gate_and_fuse(self, image: torch.Tensor, prompt_text: torch.Tensor) -> FusedSequence:
        if image.shape[-1] != prompt_text.shape[-1]:
            raise ValueError(f"feature dims differ: {image.shape[-1]} vs {prompt_text.shape[-1]}")
        return concat_segments(self.image_gate(image), self.text_gate(prompt_text))

    def multi_axis_ssm(self, fusion: torch.Tensor) -> dict[str, torch.Tensor]:
        """flip -> scan -> flip back, for each axis, with shared scan parameters."""
        # the three passes run as one scan over a 3x batch
        scanned = self.ssm(torch.cat([flip(fusion, axis) for axis in FLIP_AXES])).chunk(len(FLIP_AXES))
        return {axis: flip(y, axis) for axis, y in zip(FLIP_AXES, scanned)}

    def adaptive_combine(self, flipped: dict[str, torch.Tensor], fusion: torch.Tensor) -> torch.Tensor:
        branches = [flipped[a] for a in FLIP_AXES]
        if any(b.shape != fusion.shape for b in branches):
            raise ValueError("flipped branches and fused sequence must share a shape")
        theta = self.theta
        return theta * self.tau * sum(branches) + (1 - theta) * fusion

    def refine_split(self, fit: FusedSequence) -> tuple[torch.Tensor, torch.Tensor]:
        """MLP, encoder layer, split at the boundary, mean-pool and L2-normalise each segment."""
        if fit.boundary is None:
            raise BoundaryError("refine_split needs the segment boundary")
        refined = fit.with_tensor(self.refine_layer(self.refine_mlp(fit.tensor)))
        image, text = refined.split()
        return F.normalize(image.mean(dim=1), dim=-1), F.normalize(text.mean(dim=1), dim=-1)

    def forward(self, image: torch.Tensor, prompt_text: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        fused = self.gate_and_fuse(image, prompt_text)
        flipped = self.multi_axis_ssm(fused.tensor)
        fit = fused.with_tensor(self.adaptive_combine(flipped, fused.tensor))
        return self.refine_split(fit)
