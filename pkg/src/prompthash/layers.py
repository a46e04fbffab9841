"""Differentiable building blocks shared by the prompt and fusion modules.

All modules take and return ``(batch, seq, features)`` tensors and work in
float32 or float64 (call ``.double()`` for gradient checks).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

FLIP_AXES = ("seq", "feat", "both")
_FLIP_DIMS = {"seq": (1,), "feat": (2,), "both": (1, 2)}


def flip(x: torch.Tensor, axis: str) -> torch.Tensor:
    """Reverse the sequence axis, the feature axis, or both.  Self-inverse."""
    try:
        dims = _FLIP_DIMS[axis]
    except KeyError:
        raise ValueError(f"axis must be one of {FLIP_AXES}, got {axis!r}") from None
    return torch.flip(x, dims)


class GlobalResponseNorm(nn.Module):
    """Token-wise response normalisation with a residual path.

    Each token's L2 norm over features is divided by the mean norm across the
    sequence; ``weight`` and ``bias`` start at zero so the layer is the
    identity at initialisation.
    """

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.zeros(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gx = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
        nx = gx / (gx.mean(dim=-2, keepdim=True) + self.eps)
        return self.weight * (x * nx) + self.bias + x


class ResidualMLP(nn.Module):
    """``x + W2 act(W1 x)``; with ``zero_init`` the block starts as the identity."""

    def __init__(self, dim: int, hidden: int | None = None, zero_init: bool = True):
        super().__init__()
        hidden = hidden or 2 * dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        if zero_init:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(F.gelu(self.fc1(x)))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"num_heads ({num_heads}) must divide dim ({dim})")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        m, length, d = x.shape
        qkv = self.qkv(x).reshape(m, length, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(m, length, d)
        return self.proj(out)


class TransformerEncoderLayer(nn.Module):
    """Pre-norm encoder layer: ``x + MHSA(LN(x))`` then ``x + MLP(LN(x))``.

    No positional signal is added, so the layer is equivariant to permutations
    of the sequence.  ``zero_init_residual`` zeroes both output projections,
    making the fresh layer an exact identity.
    """

    def __init__(self, dim: int, num_heads: int = 4, mlp_ratio: int = 4, zero_init_residual: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)
        if zero_init_residual:
            for lin in (self.attn.proj, self.fc2):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def selective_scan(
    x: torch.Tensor, delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor, C: torch.Tensor, skip: torch.Tensor
) -> torch.Tensor:
    """Sequential diagonal selective scan.

    Shapes: x, delta (M, L, D); A (D, N); B, C (M, L, N); skip (D,).
    ``h_t = exp(delta_t A) * h_{t-1} + delta_t B_t x_t`` per channel, with
    ``y_t = C_t . h_t + skip * x_t`` and ``h_0 = 0``.
    """
    return _SelectiveScan.apply(x, delta, A, B, C) + skip * x


class _SelectiveScan(torch.autograd.Function):
    """Scan with a hand-written adjoint pass.

    Works time-major, (L, M, D, N), so every step touches contiguous memory;
    the backward runs the adjoint recurrence in reverse time rather than
    differentiating through L autograd nodes.
    """

    @staticmethod
    def forward(ctx, x, delta, A, B, C):
        m, length, d = x.shape
        n = A.shape[1]
        xt = x.transpose(0, 1).contiguous()
        dt = delta.transpose(0, 1).contiguous()
        Bt = B.transpose(0, 1).contiguous()
        Ct = C.transpose(0, 1).contiguous()
        decay = torch.exp(dt.unsqueeze(-1) * A)
        u = dt * xt
        states = torch.empty_like(decay)
        h = torch.zeros_like(decay[0])
        for t in range(length):
            torch.mul(decay[t], h, out=states[t])
            states[t].addcmul_(u[t].unsqueeze(-1), Bt[t].unsqueeze(1))
            h = states[t]
        y = torch.bmm(states.view(length * m, d, n), Ct.view(length * m, n, 1)).view(length, m, d)
        ctx.save_for_backward(xt, dt, A, Bt, Ct, decay, u, states)
        return y.transpose(0, 1)

    @staticmethod
    def backward(ctx, grad_y):
        xt, dt, A, Bt, Ct, decay, u, states = ctx.saved_tensors
        length, m, d, n = states.shape
        lm = length * m
        gy = grad_y.transpose(0, 1).contiguous()
        grad_C = torch.bmm(states.view(lm, d, n).transpose(1, 2), gy.view(lm, d, 1)).view(length, m, n)

        # G[t] = dLoss/dh_t, accumulated backwards through the decay
        G = torch.empty_like(states)
        torch.mul(gy[-1].unsqueeze(-1), Ct[-1].unsqueeze(1), out=G[-1])
        for t in range(length - 2, -1, -1):
            torch.mul(decay[t + 1], G[t + 1], out=G[t])
            G[t].addcmul_(gy[t].unsqueeze(-1), Ct[t].unsqueeze(1))

        Gf = G.view(lm, d, n)
        grad_u = torch.bmm(Gf, Bt.view(lm, n, 1)).view(length, m, d)
        grad_B = torch.bmm(Gf.transpose(1, 2), u.view(lm, d, 1)).view(length, m, n)

        # gradient w.r.t. the exponent delta * A; zero at t = 0 since h_0 = 0
        gz = torch.zeros_like(states)
        torch.mul(G[1:], states[:-1], out=gz[1:])
        gz.mul_(decay)
        grad_delta = (gz * A).sum(-1) + grad_u * xt
        grad_A = torch.einsum("lmdn,lmd->dn", gz, dt)
        grad_x = grad_u * dt
        return (grad_x.transpose(0, 1), grad_delta.transpose(0, 1), grad_A,
                grad_B.transpose(0, 1), grad_C.transpose(0, 1))


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class SelectiveSSM(nn.Module):
    """Input-dependent state space layer over ``(M, L, D)`` sequences.

    ``A = -exp(A_log)`` stays strictly negative and ``delta = softplus(.)``
    strictly positive, so every per-step decay lies in (0, 1).
    """

    def __init__(self, dim: int, state_size: int = 16, delta_init: float = 0.1):
        super().__init__()
        self.dim = dim
        self.state_size = state_size
        a_log = torch.empty(dim, state_size).uniform_(math.log(0.5), math.log(1.5))
        self.A_log = nn.Parameter(a_log)
        self.B_proj = nn.Linear(dim, state_size)
        self.C_proj = nn.Linear(dim, state_size)
        self.delta_proj = nn.Linear(dim, dim)
        nn.init.constant_(self.delta_proj.bias, inverse_softplus(delta_init))
        self.skip = nn.Parameter(torch.ones(dim))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def discretization(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (delta, B, C) for input ``x``."""
        return F.softplus(self.delta_proj(x)), self.B_proj(x), self.C_proj(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta, B, C = self.discretization(x)
        return selective_scan(x, delta, self.A, B, C, self.skip)
