"""Residual visual encoder with attention pooling.

The pooling layer carries the whole design: the image-level embedding is the
attention output for a mean-token query, and dense per-cell embeddings reuse
the same value/output projections without attention, so every cell lands in
the text-embedding space and similarity is a plain cosine. Global average
pooling has no such projection to borrow, which is why this family of
backbones is the one worth dumping.

Inference only; weights come either from a fixed seed (stub variant) or a
pretrained checkpoint (adapter in models.py). BatchNorm stays in eval mode
throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

# standard RGB normalization used by the pretrained family this mirrors
IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class VisualFeatures:
    """Everything one forward pass yields, as numpy, channels last."""

    mid: np.ndarray              # (Hm, Wm, Cm) second-to-last stage
    patch: np.ndarray            # (H, W, D) projected final-stage cells
    image_embedding: np.ndarray  # (D,) unit norm
    stride: int                  # pixels per final-stage cell
    mid_stride: int


class _Block(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.short = None
        if stride != 1 or c_in != c_out:
            self.short = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                                       nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.short is None else self.short(x)
        return F.relu(out + skip)


class AttentionPool(nn.Module):
    """Mean-token-query attention over spatial cells.

    `forward` gives the image embedding; `dense` gives the per-cell
    value/output projection of the same layer. The positional table is stored
    for one grid and bilinearly resampled when the input grid differs.
    """

    def __init__(self, grid: int, width: int, embed_dim: int, heads: int = 4):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.grid = grid
        self.heads = heads
        self.positional = nn.Parameter(torch.randn(grid * grid + 1, width) / width ** 0.5)
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.c_proj = nn.Linear(width, embed_dim)

    def _positional(self, h: int, w: int) -> torch.Tensor:
        if h == self.grid and w == self.grid:
            return self.positional
        table = self.positional[1:].reshape(self.grid, self.grid, -1).permute(2, 0, 1)
        table = F.interpolate(table[None], size=(h, w), mode="bilinear",
                              align_corners=False)[0]
        table = table.permute(1, 2, 0).reshape(h * w, -1)
        return torch.cat([self.positional[:1], table])

    def _tokens(self, fmap: torch.Tensor) -> torch.Tensor:
        # (C, H, W) -> (HW + 1, C) with the mean token first, positions added
        c, h, w = fmap.shape
        tokens = fmap.reshape(c, h * w).T
        tokens = torch.cat([tokens.mean(dim=0, keepdim=True), tokens])
        return tokens + self._positional(h, w)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        x = self._tokens(fmap)
        n, c = x.shape
        hd = c // self.heads
        q = self.q_proj(x[:1]).reshape(1, self.heads, hd).transpose(0, 1)
        k = self.k_proj(x).reshape(n, self.heads, hd).transpose(0, 1)
        v = self.v_proj(x).reshape(n, self.heads, hd).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(hd), dim=-1)
        pooled = (attn @ v).transpose(0, 1).reshape(1, c)
        return self.c_proj(pooled)[0]

    def dense(self, fmap: torch.Tensor) -> torch.Tensor:
        # (C, H, W) -> (H, W, D): value then output projection, no attention
        c, h, w = fmap.shape
        x = self._tokens(fmap)[1:]
        return self.c_proj(self.v_proj(x)).reshape(h, w, -1)


class ResidualEncoder(nn.Module):
    """Four stride-2 stages and an attention pool; total stride 16.

    Stage outputs are named stage1..stage4; the dump's mid layer defaults to
    the second-to-last (stage3, stride 8).
    """

    stride = 16
    mid_stride = 8

    def __init__(self, widths=(16, 24, 32, 48), embed_dim=32, pool_grid=8, heads=4):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]), nn.ReLU(inplace=True))
        self.stage2 = _Block(widths[0], widths[1], 2)
        self.stage3 = _Block(widths[1], widths[2], 2)
        self.stage4 = _Block(widths[2], widths[3], 2)
        self.pool = AttentionPool(pool_grid, widths[3], embed_dim, heads)
        self.embed_dim = embed_dim

    def trunk(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(1, 3, H, W) -> (mid map, final map), both (C, h, w)."""
        x = self.stem(x)
        x = self.stage2(x)
        mid = self.stage3(x)
        final = self.stage4(mid)
        return mid[0], final[0]

    def forward(self, x: torch.Tensor) -> VisualFeatures:
        mid, final = self.trunk(x)
        emb = self.pool(final)
        emb = emb / emb.norm()
        patch = self.pool.dense(final)
        return VisualFeatures(
            mid=mid.permute(1, 2, 0).numpy().astype(np.float32),
            patch=patch.numpy().astype(np.float32),
            image_embedding=emb.numpy().astype(np.float32),
            stride=self.stride, mid_stride=self.mid_stride)

    def embed_map(self, final: torch.Tensor) -> torch.Tensor:
        """Attention-pool an arbitrary (C, h, w) map to a unit embedding."""
        emb = self.pool(final)
        return emb / emb.norm()
