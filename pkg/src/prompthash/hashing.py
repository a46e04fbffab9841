"""Hash heads, binarisation, hashing losses, the weighted objective and packed code files."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

SUPPORTED_BITS = (16, 32, 64)
CODE_MAGIC = b"PHSH"
CODE_VERSION = 1
LOSS_NAMES = ("gpa", "lpa", "inter", "intra", "quan", "recon")


class HashHead(nn.Module):
    """Linear map to K logits followed by tanh.

    ``input_scale`` multiplies the features before the linear map (a fixed
    reparameterisation of the weights, not a learned quantity).
    """

    def __init__(self, dim: int, bits: int, input_scale: float = 1.0):
        super().__init__()
        self.bits = bits
        self.input_scale = input_scale
        self.linear = nn.Linear(dim, bits)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.linear(features * self.input_scale)
        return logits, torch.tanh(logits)


def binarize(h: torch.Tensor) -> torch.Tensor:
    """sign(h) with sign(0) = +1."""
    return torch.where(h >= 0, torch.ones_like(h), -torch.ones_like(h))


def _check_binary(b: torch.Tensor) -> None:
    if not bool(((b == 1) | (b == -1)).all()):
        raise ValueError("binary codes must contain only -1 and +1")


def quantization_loss(
    b_image: torch.Tensor,
    h_image: torch.Tensor,
    logits_image: torch.Tensor,
    b_text: torch.Tensor,
    h_text: torch.Tensor,
    logits_text: torch.Tensor,
    num_samples: int | None = None,
) -> torch.Tensor:
    """Distance of each code to the mean of its tanh output and logits, over N*M.

    ``num_samples`` (N) defaults to the batch size; binary codes carry no gradient.
    """
    _check_binary(b_image)
    _check_binary(b_text)
    m = h_image.shape[0]
    n = m if num_samples is None else num_samples
    err_v = b_image.detach() - 0.5 * (h_image + logits_image)
    err_t = b_text.detach() - 0.5 * (h_text + logits_text)
    return ((err_v**2).sum() + (err_t**2).sum()) / (n * m)


def reconstruction_loss(h_image: torch.Tensor, b_image: torch.Tensor, h_text: torch.Tensor, b_text: torch.Tensor) -> torch.Tensor:
    if h_image.shape != b_image.shape or h_text.shape != b_text.shape:
        raise ValueError("continuous and binary codes must have equal shapes")
    m = h_image.shape[0]
    return (((h_image - b_image.detach()) ** 2).sum() + ((h_text - b_text.detach()) ** 2).sum()) / m


@dataclass
class LossWeights:
    alpha: float = 5.0  # global prompt alignment
    beta: float = 5.0  # local prompt alignment
    gamma: float = 0.005  # inter-class affinity
    mu: float = 5.0  # intra-class affinity
    sigma: float = 0.1  # quantization
    zeta: float = 0.001  # reconstruction

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and nonnegative, got {value}")

    @classmethod
    def coco(cls) -> "LossWeights":
        return cls(5.0, 5.0, 0.005, 20.0, 1.0, 0.001)

    def for_losses(self) -> dict[str, float]:
        return dict(zip(LOSS_NAMES, (self.alpha, self.beta, self.gamma, self.mu, self.sigma, self.zeta)))


WEIGHT_NAMES = ("alpha", "beta", "gamma", "mu", "sigma", "zeta")
PRESETS = {"mirflickr": LossWeights(), "nuswide": LossWeights(), "coco": LossWeights.coco()}


def total_loss(parts: dict, weights: LossWeights):
    """Weighted sum over the six named loss components."""
    missing = [k for k in LOSS_NAMES if k not in parts]
    if missing:
        raise KeyError(f"missing loss components: {missing}")
    w = weights.for_losses()
    return sum(w[k] * parts[k] for k in LOSS_NAMES)


# ---------------------------------------------------------------------------
# packed codes


def pack_codes(b) -> np.ndarray:
    """(rows, K) codes in {-1, +1} -> (rows, K/8) uint8, MSB-first, +1 -> bit 1."""
    b = np.asarray(b.detach().cpu() if isinstance(b, torch.Tensor) else b)
    if b.ndim == 1:
        b = b[None]
    if b.shape[1] % 8:
        raise ValueError(f"code length {b.shape[1]} is not a multiple of 8")
    if not np.isin(b, (-1, 1)).all():
        raise ValueError("binary codes must contain only -1 and +1")
    return np.packbits(b > 0, axis=1, bitorder="big")


def unpack_codes(packed: np.ndarray, bits: int | None = None) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim == 1:
        packed = packed[None]
    bits = bits or packed.shape[1] * 8
    return np.unpackbits(packed, axis=1, count=bits, bitorder="big").astype(np.int8) * 2 - 1


def write_code_file(path: str | Path, packed: np.ndarray, bits: int) -> Path:
    packed = np.ascontiguousarray(packed, dtype=np.uint8)
    if packed.ndim != 2 or packed.shape[1] * 8 != bits:
        raise ValueError(f"packed rows of shape {packed.shape} do not hold {bits}-bit codes")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CODE_MAGIC)
        fh.write(struct.pack("<BHQ", CODE_VERSION, bits, packed.shape[0]))
        fh.write(packed.tobytes())
    return path


def read_code_file(path: str | Path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != CODE_MAGIC:
        raise ValueError("not a hash code file")
    version, bits, rows = struct.unpack_from("<BHQ", raw, 4)
    if version != CODE_VERSION:
        raise ValueError(f"unsupported code file version {version}")
    header = 4 + struct.calcsize("<BHQ")
    width = bits // 8
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != rows * width:
        raise ValueError("code file is truncated")
    return body.reshape(rows, width).copy(), bits
