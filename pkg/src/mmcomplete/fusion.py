"""Two-stage multimodal fusion network and its end-to-end forward pass."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .embedders import EMBED_DIM, EmbedderBackend, RenderedImage, TextPrompt
from .encoders import ImageEncoder, PointEncoder
from .geometry import PointCloud, chamfer_loss, resample


class ConfigError(ValueError):
    pass


class FusionDisabledError(RuntimeError):
    pass


@dataclass
class FusionConfig:
    use_visual_global: bool = True
    use_text_global: bool = True
    fuse_stage1: bool = True
    fuse_stage2: bool = True
    use_rich_text: bool = True
    channels: int = 256
    tokens: int = 128
    attention_heads: int = 4
    output_points: int = 2048
    input_points: int = 2048
    k_neighbors: int = 16
    point_hidden: int = 64
    image_width: int = 16
    fuse_hidden: int = 512
    init_seed: int = 0

    def validate(self):
        if self.output_points <= 0 or self.tokens <= 0 or self.channels <= 0:
            raise ConfigError("channels, tokens and output_points must be positive")
        if self.channels % self.attention_heads:
            raise ConfigError(f"channels={self.channels} not divisible by attention_heads={self.attention_heads}")
        if self.output_points % self.tokens:
            raise ConfigError(f"output_points={self.output_points} not divisible by tokens={self.tokens}")
        if self.input_points < self.tokens:
            raise ConfigError("input_points must be at least tokens")
        return self

    @property
    def global_dim(self) -> int:
        return EMBED_DIM * (int(self.use_visual_global) + int(self.use_text_global))

    @property
    def stage1_active(self) -> bool:
        return self.fuse_stage1 and self.global_dim > 0

    @property
    def stage2_active(self) -> bool:
        return self.fuse_stage2 and self.global_dim > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def toy_config(**overrides) -> FusionConfig:
    """channels=8, tokens=4, output_points=16: the size used by gradient checks."""
    base = dict(channels=8, tokens=4, attention_heads=2, output_points=16, input_points=8,
                k_neighbors=4, point_hidden=8, image_width=4, fuse_hidden=16)
    base.update(overrides)
    return FusionConfig(**base).validate()


class StageFuse(nn.Module):
    """Broadcast concatenated globals to every token and mix with a shared MLP."""

    def __init__(self, channels, global_dim, hidden=512):
        super().__init__()
        self.global_dim = global_dim
        self.mlp = nn.Sequential(nn.Linear(channels + global_dim, hidden), nn.GELU(), nn.Linear(hidden, channels))

    def forward(self, tokens, g_vis=None, g_txt=None):
        # text first, then vision
        present = [g for g in (g_txt, g_vis) if g is not None]
        if not present:
            raise FusionDisabledError("stage fusion called without any global feature")
        g = torch.cat(present, dim=-1)
        if g.shape[-1] != self.global_dim:
            raise ConfigError(f"expected {self.global_dim} global dims, got {g.shape[-1]}")
        t = tokens.transpose(1, 2)
        g = g[:, None, :].expand(-1, t.shape[1], -1)
        return self.mlp(torch.cat([g, t], dim=-1)).transpose(1, 2)


class MultiHeadAttention(nn.Module):
    def __init__(self, channels, heads):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels={channels} not divisible by heads={heads}")
        self.heads = heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.o = nn.Linear(channels, channels)

    def forward(self, query, context):
        # (B, T, C) token-major
        b, tq, c = query.shape
        h = self.heads

        def split(x):
            return x.view(b, -1, h, c // h).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(self.q(query)), split(self.k(context)), split(self.v(context)))
        return self.o(out.transpose(1, 2).reshape(b, tq, c))


class AttentionBlock(nn.Module):
    """Residual attention followed by a residual pointwise feed-forward."""

    def __init__(self, channels, heads, ff_mult=2):
        super().__init__()
        self.attn = MultiHeadAttention(channels, heads)
        self.ff = nn.Sequential(nn.Linear(channels, ff_mult * channels), nn.GELU(), nn.Linear(ff_mult * channels, channels))

    def forward(self, queries, keys_values=None):
        # (B, C, T) channel-major in and out
        q = queries.transpose(1, 2)
        kv = q if keys_values is None else keys_values.transpose(1, 2)
        x = q + self.attn(q, kv)
        x = x + self.ff(x)
        return x.transpose(1, 2)


class Decoder(nn.Module):
    """Self-attention over tokens, then each token emits a center and offsets."""

    def __init__(self, channels, tokens, heads, output_points):
        super().__init__()
        if output_points % tokens:
            raise ConfigError(f"output_points={output_points} not divisible by tokens={tokens}")
        self.per_token = output_points // tokens
        self.block = AttentionBlock(channels, heads)
        self.center = nn.Linear(channels, 3)
        self.offsets = nn.Linear(channels, 3 * self.per_token)

    def forward(self, fused):
        x = self.block(fused).transpose(1, 2)
        b, t, _ = x.shape
        pts = self.center(x)[:, :, None, :] + self.offsets(x).view(b, t, self.per_token, 3)
        return pts.reshape(b, t * self.per_token, 3)


def _init_weights(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for mod in module.modules():
        if isinstance(mod, (nn.Linear, nn.Conv2d)):
            fan_in = mod.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                mod.weight.copy_(torch.empty_like(mod.weight).uniform_(-bound, bound, generator=gen))
                if mod.bias is not None:
                    mod.bias.copy_(torch.empty_like(mod.bias).uniform_(-bound, bound, generator=gen))


class CompletionModel(nn.Module):
    """Point/image encoders, optional global fusion stages, cross-attention, decoder."""

    def __init__(self, config: FusionConfig):
        super().__init__()
        config.validate()
        self.config = config
        c, t = config.channels, config.tokens
        self.point_encoder = PointEncoder(c, t, config.k_neighbors, config.point_hidden)
        self.image_encoder = ImageEncoder(c, t, config.image_width)
        self.stage1 = StageFuse(c, config.global_dim, config.fuse_hidden) if config.stage1_active else None
        self.cross = AttentionBlock(c, config.attention_heads)
        self.stage2 = StageFuse(c, config.global_dim, config.fuse_hidden) if config.stage2_active else None
        self.decoder = Decoder(c, t, config.attention_heads, config.output_points)
        _init_weights(self, config.init_seed)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def weight_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups

    def forward(self, partial, image, g_vis=None, g_txt=None):
        cfg = self.config
        g_vis = g_vis if cfg.use_visual_global else None
        g_txt = g_txt if cfg.use_text_global else None
        if cfg.global_dim and (cfg.use_visual_global and g_vis is None or cfg.use_text_global and g_txt is None):
            raise ValueError("model expects global features that were not supplied")
        y = self.point_encoder(partial)
        if self.stage1 is not None:
            y = self.stage1(y, g_vis, g_txt)
        y = self.cross(y, self.image_encoder(image))
        if self.stage2 is not None:
            y = self.stage2(y, g_vis, g_txt)
        return self.decoder(y)


def loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Batch-mean Chamfer distance."""
    return chamfer_loss(pred, gt).mean()


def prepare_inputs(model: CompletionModel, partial: PointCloud, image: RenderedImage,
                   prompt: Optional[TextPrompt], embedder: EmbedderBackend, seed: int = 0):
    """Tensors for a single sample, batch dimension included."""
    cfg = model.config
    dtype = next(model.parameters()).dtype
    pts = resample(partial, cfg.input_points, "random", seed=seed).points
    x = torch.tensor(pts, dtype=dtype)[None]
    img = torch.tensor(image.pixels, dtype=dtype)[None]
    g_vis = g_txt = None
    if cfg.use_visual_global:
        g_vis = torch.tensor(embedder.embed_image(image).values, dtype=dtype)[None]
    if cfg.use_text_global:
        if prompt is None:
            raise ValueError("text-enabled model needs a prompt")
        g_txt = torch.tensor(embedder.embed_text(prompt).values, dtype=dtype)[None]
    return x, img, g_vis, g_txt


def forward(model: CompletionModel, partial: PointCloud, image: RenderedImage,
            prompt: Optional[TextPrompt], embedder: EmbedderBackend, seed: int = 0) -> PointCloud:
    """Complete one partial cloud."""
    with torch.no_grad():
        out = model(*prepare_inputs(model, partial, image, prompt, embedder, seed))
    return PointCloud(out[0].double().numpy())

