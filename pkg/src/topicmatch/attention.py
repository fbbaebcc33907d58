"""Multi-head attention and feed-forward blocks shared by the coarse
matcher. Pre-norm residual layout; all dense products are MAC-counted.
"""

from __future__ import annotations

import torch
from torch import nn

from .counting import CountedLinear, counted_matmul
from .errors import ShapeError


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two dims.

    Shapes: q (..., Nq, d), k (..., Nk, d), v (..., Nk, dv).
    """
    d = q.shape[-1]
    scores = counted_matmul(q, k.transpose(-1, -2)) / (d**0.5)
    weights = torch.softmax(scores, dim=-1)
    return counted_matmul(weights, v)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.proj_q = CountedLinear(dim, dim)
        self.proj_k = CountedLinear(dim, dim)
        self.proj_v = CountedLinear(dim, dim)
        self.proj_out = CountedLinear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        return x.view(n, self.heads, self.dim // self.heads).transpose(0, 1)

    def forward(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if queries.shape[-1] != self.dim or context.shape[-1] != self.dim:
            raise ShapeError(
                f"expected channel width {self.dim}, got {queries.shape[-1]}/{context.shape[-1]}"
            )
        q = self._split(self.proj_q(queries))
        k = self._split(self.proj_k(context))
        v = self._split(self.proj_v(context))
        attended = scaled_dot_attention(q, k, v)
        merged = attended.transpose(0, 1).reshape(queries.shape[0], self.dim)
        return self.proj_out(merged)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__()
        self.lin1 = CountedLinear(dim, dim * mult)
        self.act = nn.GELU(approximate="tanh")
        self.lin2 = CountedLinear(dim * mult, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(self.act(self.lin1(x)))


class AttentionBlock(nn.Module):
    """Pre-norm residual attention + feed-forward sublayer.

    ``residual=False`` / ``ffn_mult=0`` strip the block down to the bare
    attention operator; the degenerate configurations exist so tests can
    check the attention arithmetic against closed-form oracles.
    """

    def __init__(self, dim: int, heads: int, ffn_mult: int = 2, residual: bool = True):
        super().__init__()
        self.residual = residual
        self.norm_q = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        if ffn_mult > 0:
            self.norm_ffn = nn.LayerNorm(dim)
            self.ffn = FeedForward(dim, ffn_mult)
        else:
            self.norm_ffn = None
            self.ffn = None

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        attended = self.attn(self.norm_q(x), self.norm_ctx(context))
        x = x + attended if self.residual else attended
        if self.ffn is not None:
            x = x + self.ffn(self.norm_ffn(x))
        return x

    def strip_to_bare_attention(self) -> None:
        """Make the block compute plain softmax(q k^T / sqrt(d)) v.

        Sets all projections to identity and disables norms; used by
        oracle tests only.
        """
        self.residual = False
        self.norm_q = nn.Identity()
        self.norm_ctx = nn.Identity()
        self.norm_ffn = None
        self.ffn = None
        with torch.no_grad():
            for proj in (self.attn.proj_q, self.attn.proj_k, self.attn.proj_v, self.attn.proj_out):
                proj.weight.copy_(torch.eye(self.attn.dim))
                proj.bias.zero_()
