"""Text affinity-aware prompting: label prompts with a learnable context gate the text features."""

from __future__ import annotations

import torch
from torch import nn

from .layers import TransformerEncoderLayer


class TextAffinityPrompt(nn.Module):
    """Prompt embedding, prompt encoder and multiplicative prompt-text fusion.

    The token table is frozen by default (it plays the role of the pretrained
    text embedding); the context, encoder and fusion matrix are learned.
    """

    def __init__(
        self,
        token_embedding: torch.Tensor,
        prompt_length: int,
        depth: int = 1,
        num_heads: int = 4,
        mlp_ratio: int = 4,
        train_token_embedding: bool = False,
        context_std: float = 0.02,
    ):
        super().__init__()
        vocab, dim = token_embedding.shape
        self.dim = dim
        self.token_embedding = nn.Embedding(vocab, dim)
        with torch.no_grad():
            self.token_embedding.weight.copy_(token_embedding)
        self.token_embedding.weight.requires_grad_(train_token_embedding)
        self.context = nn.Parameter(context_std * torch.randn(prompt_length, dim))
        self.encoder = nn.ModuleList(
            TransformerEncoderLayer(dim, num_heads, mlp_ratio) for _ in range(depth)
        )
        self.eta = nn.Parameter(torch.eye(dim))

    def build_prompt_features(self, tokens: torch.Tensor) -> torch.Tensor:
        """(M, L^p) token ids -> (M, L^p, D): embeddings plus the shared context."""
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.token_embedding.num_embeddings):
            raise IndexError("prompt token id out of vocabulary range")
        return self.token_embedding(tokens) + self.context

    def encode(self, prompt: torch.Tensor) -> torch.Tensor:
        for layer in self.encoder:
            prompt = layer(prompt)
        return prompt

    def gate(self, encoded_prompt: torch.Tensor) -> torch.Tensor:
        """Global average of the encoded prompt over its sequence: (M, D)."""
        return encoded_prompt.mean(dim=1)

    def fuse(self, encoded_prompt: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        """(M, L^p, D) prompt and (M, L^t, D) text -> (M, D) fused prompt-text feature."""
        if encoded_prompt.shape[-1] != text.shape[-1]:
            raise ValueError(f"feature dims differ: {encoded_prompt.shape[-1]} vs {text.shape[-1]}")
        return (self.gate(encoded_prompt) * text.mean(dim=1)) @ self.eta

    def fuse_sequence(self, encoded_prompt: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        """Token-level form of :meth:`fuse`; its mean over tokens equals ``fuse``."""
        return (self.gate(encoded_prompt).unsqueeze(1) * text) @ self.eta

    def forward(self, tokens: torch.Tensor, text: torch.Tensor) -> dict[str, torch.Tensor]:
        prompt = self.build_prompt_features(tokens)
        encoded = self.encode(prompt)
        return {
            "prompt": prompt,
            "encoded_prompt": encoded,
            "prompt_text": self.fuse(encoded, text),
            "prompt_text_seq": self.fuse_sequence(encoded, text),
        }
