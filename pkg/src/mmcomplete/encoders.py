"""Trainable fine-grained feature extractors for partial clouds and images."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def knn_indices(x: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k nearest points (self included); x is (B, N, 3)."""
    d = torch.cdist(x, x)
    return d.topk(k, dim=-1, largest=False, sorted=True).indices


def fps_indices(x: torch.Tensor, k: int, start: int = 0) -> torch.Tensor:
    """Batched farthest-point sampling from a fixed start index; (B, N, 3) -> (B, k)."""
    b, n, _ = x.shape
    idx = torch.empty(b, k, dtype=torch.long, device=x.device)
    idx[:, 0] = start
    dist = torch.full((b, n), float("inf"), dtype=x.dtype, device=x.device)
    rows = torch.arange(b, device=x.device)
    for i in range(1, k):
        last = x[rows, idx[:, i - 1]]
        dist = torch.minimum(dist, ((x - last[:, None, :]) ** 2).sum(-1))
        idx[:, i] = dist.argmax(dim=1)
    return idx


def gather_points(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x (B, N, C), idx (B, ...) -> (B, ..., C)."""
    b = x.shape[0]
    flat = idx.reshape(b, -1)
    out = torch.gather(x, 1, flat[..., None].expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


class EdgeConv(nn.Module):
    """Shared MLP over edge features [x_i, x_j - x_i], max over neighbours."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2 * in_dim, out_dim), nn.GELU(), nn.Linear(out_dim, out_dim))

    def forward(self, feats, nbr):
        center = feats[:, :, None, :].expand(-1, -1, nbr.shape[-1], -1)
        edge = torch.cat([center, gather_points(feats, nbr) - center], dim=-1)
        return self.mlp(edge).max(dim=2).values


class PointEncoder(nn.Module):
    """Partial cloud (B, N, 3) -> token features (B, channels, tokens).

    Two edge convolutions on a static coordinate kNN graph, then each
    farthest-point token max-pools the point features of its neighbourhood.
    """

    def __init__(self, channels=256, tokens=128, k=16, hidden=64):
        super().__init__()
        self.tokens = tokens
        self.k = k
        self.conv1 = EdgeConv(3, hidden)
        self.conv2 = EdgeConv(hidden, hidden)
        self.proj = nn.Sequential(nn.Linear(3 + 2 * hidden, channels), nn.GELU(), nn.Linear(channels, channels))

    def forward(self, x):
        if not torch.isfinite(x).all():
            raise ValueError("point encoder input has non-finite coordinates")
        n = x.shape[1]
        if n < self.tokens:
            raise ValueError(f"need at least {self.tokens} points, got {n}")
        k = min(self.k, n)
        with torch.no_grad():
            nbr = knn_indices(x, k)
            centers = fps_indices(x, self.tokens)
        f1 = self.conv1(x, nbr)
        f2 = self.conv2(f1, nbr)
        point_feats = self.proj(torch.cat([x, f1, f2], dim=-1))
        token_nbr = gather_points(nbr, centers)  # (B, T, k) neighbourhoods of token centers
        tok = gather_points(point_feats, token_nbr).max(dim=2).values
        return tok.transpose(1, 2).contiguous()


def _grid_for(tokens: int) -> tuple[int, int]:
    h = max(d for d in range(1, int(tokens**0.5) + 1) if tokens % d == 0)
    return h, tokens // h


class ImageEncoder(nn.Module):
    """Image (B, 3, 224, 224) -> token features (B, channels, tokens).

    Four stride-2 convolutions, then average pooling onto an h x w grid with
    h * w == tokens, flattened row-major.
    """

    def __init__(self, channels=256, tokens=128, width=16):
        super().__init__()
        self.grid = _grid_for(tokens)
        dims = [3, width, 2 * width, 4 * width, channels]
        layers = []
        for i in range(4):
            layers.append(nn.Conv2d(dims[i], dims[i + 1], 3, stride=2, padding=1))
            if i < 3:
                layers.append(nn.GELU())
        self.stages = nn.Sequential(*layers)

    def forward(self, img):
        if img.dim() != 4 or tuple(img.shape[1:]) != (3, 224, 224):
            raise ValueError(f"expected (B, 3, 224, 224) images, got {tuple(img.shape)}")
        f = F.adaptive_avg_pool2d(self.stages(img), self.grid)
        return f.flatten(2)
