"""Minimal neural building blocks shared by the hierarchical decoder.

Patch-embedding transformer encoder with bottleneck adapters in the FFN
path, sinusoidal 2-D positional encoding, a bare softmax attention
primitive (no learned projections; used verbatim by the decoder heads),
and a two-stage transposed-convolution pixel decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


@dataclass(frozen=True)
class NetConfig:
    embed_dim: int = 64
    encoder_blocks: int = 2
    heads: int = 4
    patch_size: int = 4
    adapter_bottleneck_ratio: float = 0.25
    mlp_ratio: float = 4.0
    adapters_enabled: bool = True
    decoder_heads: int = 1  # printed head equations are single-head

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4 != 0:
            raise ShapeError("embed_dim must be divisible by 4 (pixel decoder channels)")
        if not (0 < self.adapter_bottleneck_ratio <= 1):
            raise ShapeError("adapter_bottleneck_ratio must be in (0, 1]")

    @property
    def mask_dim(self) -> int:
        """Channel count after the pixel decoder."""
        return self.embed_dim // 4


@dataclass
class ImageEmbedding:
    """Encoder output: G x G token grid plus the positional encoding."""

    tokens: torch.Tensor  # (B, G, G, d)
    pos: torch.Tensor  # (G, G, d), pure function of (G, d)


def position_encoding(grid: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Sinusoidal 2-D positional encoding, (grid, grid, dim).

    First half of the channels encodes the row coordinate, second half the
    column, each with the standard sin/cos frequency ladder. Bit-stable:
    depends only on (grid, dim).
    """
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(0, half, 2, dtype=torch.float64) / half
    )
    coords = torch.arange(grid, dtype=torch.float64)
    angles = coords[:, None] * freqs[None, :]  # (grid, half/2)
    enc_1d = torch.zeros(grid, half, dtype=torch.float64)
    enc_1d[:, 0::2] = torch.sin(angles)
    enc_1d[:, 1::2] = torch.cos(angles)
    out = torch.zeros(grid, grid, dim, dtype=torch.float64)
    out[:, :, :half] = enc_1d[:, None, :]
    out[:, :, half : 2 * half] = enc_1d[None, :, :]
    return out.to(dtype=dtype, device=device)


def attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    pos_q: torch.Tensor | None = None,
    pos_k: torch.Tensor | None = None,
    heads: int = 1,
) -> torch.Tensor:
    """softmax((Q+pos_q)(K+pos_k)^T / sqrt(d_head)) V, added residually to Q.

    Shapes: query (..., n_q, d), key/value (..., n_k, d). No learned
    projections; positional terms are optional.
    """
    if query.shape[-1] != key.shape[-1] or key.shape[:-1] != value.shape[:-1]:
        raise ShapeError(
            f"attention shapes inconsistent: q{tuple(query.shape)} "
            f"k{tuple(key.shape)} v{tuple(value.shape)}"
        )
    d = query.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"dim {d} not divisible by heads {heads}")
    q = query if pos_q is None else query + pos_q
    k = key if pos_k is None else key + pos_k
    d_head = d // heads
    qh = q.unflatten(-1, (heads, d_head)).transpose(-3, -2)  # (..., heads, n_q, d_head)
    kh = k.unflatten(-1, (heads, d_head)).transpose(-3, -2)
    vh = value.unflatten(-1, (heads, d_head)).transpose(-3, -2)
    weights = torch.softmax(qh @ kh.transpose(-2, -1) / math.sqrt(d_head), dim=-1)
    out = (weights @ vh).transpose(-3, -2).flatten(-2)
    return query + out


class Adapter(nn.Module):
    """Bottleneck residual adapter; zero-initialized up-projection so the
    freshly inserted adapter is an exact identity."""

    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = max(1, int(dim * ratio))
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)
        self.enabled = True

    def forward(self, x):
        if not self.enabled:
            return x
        return x + self.up(F.gelu(self.down(x)))


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer block: projected multi-head self-attention,
    FFN, and a post-FFN adapter."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        d = cfg.embed_dim
        self.heads = cfg.heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        hidden = int(d * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))
        self.adapter = Adapter(d, cfg.adapter_bottleneck_ratio)
        self.adapter.enabled = cfg.adapters_enabled

    def forward(self, x, pos):
        # x: (B, n, d); pos: (n, d) added to q and k only
        h = self.norm1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        attended = attention(q, k, v, pos_q=pos, pos_k=pos, heads=self.heads) - q
        x = x + self.proj(attended)
        x = x + self.mlp(self.norm2(x))
        return self.adapter(x)


class ImageEncoder(nn.Module):
    """Patch embedding followed by transformer blocks over the token grid."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        self.blocks = nn.ModuleList(SelfAttentionBlock(cfg) for _ in range(cfg.encoder_blocks))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, image: torch.Tensor) -> ImageEmbedding:
        """image: (B, H, W, 3) or (H, W, 3), H == W divisible by patch_size."""
        squeeze = image.dim() == 3
        if squeeze:
            image = image[None]
        if image.dim() != 4 or image.shape[-1] != 3:
            raise ShapeError(f"expected (B, H, W, 3) image, got {tuple(image.shape)}")
        b, h, w, _ = image.shape
        if h != w or h % self.cfg.patch_size != 0:
            raise ShapeError(f"image must be square and divisible by patch size, got {h}x{w}")
        x = self.patch_embed(image.permute(0, 3, 1, 2))  # (B, d, G, G)
        g = x.shape[-1]
        pos = position_encoding(g, self.cfg.embed_dim, dtype=x.dtype, device=x.device)
        tokens = x.permute(0, 2, 3, 1).reshape(b, g * g, -1)
        flat_pos = pos.reshape(g * g, -1)
        for block in self.blocks:
            tokens = block(tokens, flat_pos)
        tokens = self.norm(tokens).reshape(b, g, g, -1)
        return ImageEmbedding(tokens=tokens, pos=pos)


class PixelDecoder(nn.Module):
    """Two 2x2 stride-2 transposed convolutions: (B,G,G,d) -> (B,4G,4G,d/4)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        d = cfg.embed_dim
        self.up1 = nn.ConvTranspose2d(d, d // 2, 2, stride=2)
        self.up2 = nn.ConvTranspose2d(d // 2, d // 4, 2, stride=2)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 4:
            raise ShapeError(f"expected (B, G, G, d) tokens, got {tuple(tokens.shape)}")
        x = tokens.permute(0, 3, 1, 2)
        x = self.up2(F.gelu(self.up1(x)))
        return x.permute(0, 2, 3, 1)  # (B, 4G, 4G, d/4)


def mlp_head(dim_in: int, dim_hidden: int, dim_out: int) -> nn.Sequential:
    """3-layer MLP used for mask embeddings and the confidence head."""
    return nn.Sequential(
        nn.Linear(dim_in, dim_hidden),
        nn.GELU(),
        nn.Linear(dim_hidden, dim_hidden),
        nn.GELU(),
        nn.Linear(dim_hidden, dim_out),
    )
