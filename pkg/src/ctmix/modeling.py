"""Volume encoders, projection/classification heads, and 2D->3D kernel inflation.

The hybrid encoder stacks four stages of blocks with a shared layout: a
depthwise-conv position embedding, a relation layer (depthwise convolution in
early stages, multi-head self-attention over the flattened grid in late
stages), and a pointwise feed-forward, every sub-layer pre-normed and
residual. Per-sample norms (GroupNorm/LayerNorm) keep forward passes
independent across the batch, which the data-parallel equivalence contract
relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument, InvalidConfig

BACKBONE_HYBRID = "hybrid_transformer"
BACKBONE_RESIDUAL = "residual_cnn"

INFLATE_CENTER = "center"
INFLATE_REPEAT = "repeat"

# per-stage (T, H, W) downsampling factors; product gives the shape divisors
STAGE_STRIDES = ((1, 4, 4), (2, 2, 2), (2, 2, 2), (1, 1, 1))


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = BACKBONE_HYBRID
    stage_depths: tuple[int, ...] = (2, 2, 4, 2)
    channels: tuple[int, ...] = (32, 64, 128, 256)
    attention_heads: int = 4
    global_stage_start: int = 3  # 1-based; stages >= this use global attention
    d_e: int = 256
    d_p: int = 128
    proj_hidden: int | None = None

    def __post_init__(self):
        if self.backbone not in (BACKBONE_HYBRID, BACKBONE_RESIDUAL):
            raise InvalidConfig(f"unknown backbone {self.backbone!r}")
        if len(self.stage_depths) != 4 or len(self.channels) != 4:
            raise InvalidConfig("stage_depths and channels must list exactly 4 stages")
        if any(d < 0 for d in self.stage_depths) or any(c < 1 for c in self.channels):
            raise InvalidConfig("stage depths must be >= 0 and channels >= 1")
        if self.d_e != self.channels[-1]:
            raise InvalidConfig(
                f"d_e ({self.d_e}) must equal the final stage channel count ({self.channels[-1]})"
            )
        if not (1 <= self.global_stage_start <= 5):
            raise InvalidConfig("global_stage_start must be in 1..5")
        for idx in range(self.global_stage_start - 1, 4):
            if self.channels[idx] % self.attention_heads != 0:
                raise InvalidConfig(
                    f"attention_heads ({self.attention_heads}) must divide stage "
                    f"channels ({self.channels[idx]})"
                )

    @property
    def shape_divisors(self) -> tuple[int, int, int]:
        div = [1, 1, 1]
        for stride in STAGE_STRIDES:
            for a in range(3):
                div[a] *= stride[a]
        return tuple(div)


class DynamicPositionEmbedding(nn.Module):
    """Residual 3x3x3 depthwise convolution encoding position by content."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, padding=1, groups=channels)

    def forward(self, x):
        return x + self.conv(x)


class LocalRelationBlock(nn.Module):
    """Conv-style block: DPE, depthwise 5x5x5 aggregation, pointwise FFN."""

    def __init__(self, channels: int):
        super().__init__()
        self.dpe = DynamicPositionEmbedding(channels)
        self.norm1 = nn.GroupNorm(1, channels)
        self.aggregate = nn.Sequential(
            nn.Conv3d(channels, channels, 1),
            nn.Conv3d(channels, channels, 5, padding=2, groups=channels),
            nn.Conv3d(channels, channels, 1),
        )
        self.norm2 = nn.GroupNorm(1, channels)
        self.ffn = nn.Sequential(
            nn.Conv3d(channels, 4 * channels, 1),
            nn.GELU(),
            nn.Conv3d(4 * channels, channels, 1),
        )

    def forward(self, x):
        x = self.dpe(x)
        x = x + self.aggregate(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x


class MultiHeadSelfAttention(nn.Module):
    """Plain dense self-attention over a token sequence."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise InvalidConfig(f"heads ({heads}) must divide channels ({channels})")
        self.heads = heads
        self.head_dim = channels // heads
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, tokens):
        b, n, c = tokens.shape
        qkv = self.qkv(tokens).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b, heads, n, head_dim)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class GlobalRelationBlock(nn.Module):
    """Transformer-style block: DPE, global attention over the grid, token FFN."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.dpe = DynamicPositionEmbedding(channels)
        self.norm1 = nn.LayerNorm(channels)
        self.attn = MultiHeadSelfAttention(channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, 4 * channels),
            nn.GELU(),
            nn.Linear(4 * channels, channels),
        )

    def forward(self, x):
        x = self.dpe(x)
        b, c, t, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # (b, t*h*w, c)
        tokens = tokens + self.attn(self.norm1(tokens))
        tokens = tokens + self.ffn(self.norm2(tokens))
        return tokens.transpose(1, 2).reshape(b, c, t, h, w)


class ResidualBlock3D(nn.Module):
    """Two 3x3x3 convolutions with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        y = self.conv1(F.relu(self.norm1(x)))
        y = self.conv2(F.relu(self.norm2(y)))
        return x + y


def _downsample(cin: int, cout: int, stride, first: bool) -> nn.Module:
    kernel = (3, 4, 4) if first else (3, 3, 3)
    padding = (1, 0, 0) if first else (1, 1, 1)
    return nn.Conv3d(cin, cout, kernel, stride=stride, padding=padding)


class VolumeEncoder(nn.Module):
    """Four-stage encoder; blocks per stage follow the configured backbone."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        cin = 1
        for idx, (depth, cout, stride) in enumerate(
            zip(cfg.stage_depths, cfg.channels, STAGE_STRIDES)
        ):
            layers: list[nn.Module] = [_downsample(cin, cout, stride, first=idx == 0)]
            use_global = (
                cfg.backbone == BACKBONE_HYBRID and (idx + 1) >= cfg.global_stage_start
            )
            for _ in range(depth):
                if cfg.backbone == BACKBONE_RESIDUAL:
                    layers.append(ResidualBlock3D(cout))
                elif use_global:
                    layers.append(GlobalRelationBlock(cout, cfg.attention_heads))
                else:
                    layers.append(LocalRelationBlock(cout))
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def check_input(self, x: torch.Tensor) -> None:
        div = self.cfg.shape_divisors
        shape = tuple(x.shape[-3:])
        if any(s % d != 0 for s, d in zip(shape, div)):
            raise InvalidArgument(
                f"input shape {shape} must be divisible by {div} (depth, height, width)"
            )

    def forward_grid(self, x: torch.Tensor) -> torch.Tensor:
        """Final-stage feature grid (B, d_e, T', H', W') before pooling."""
        if x.ndim == 4:
            x = x.unsqueeze(1)
        if x.ndim != 5 or x.shape[1] != 1:
            raise InvalidArgument(f"expected (B,1,T,H,W) or (B,T,H,W) volumes, got {tuple(x.shape)}")
        self.check_input(x)
        for stage in self.stages:
            x = stage(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled features (B, d_e); input resolution may vary."""
        grid = self.forward_grid(x)
        return grid.mean(dim=(2, 3, 4))


class ProjectionHead(nn.Module):
    """Two affine layers with ReLU; output rows L2-normalized (eps-guarded)."""

    def __init__(self, d_e: int, d_p: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d_e
        self.fc1 = nn.Linear(d_e, hidden)
        self.fc2 = nn.Linear(hidden, d_p)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        z = self.fc2(F.relu(self.fc1(r)))
        return z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class VolumeClassifier(nn.Module):
    """Encoder + projection head + linear classifier over two classes."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = VolumeEncoder(cfg)
        self.projection = ProjectionHead(cfg.d_e, cfg.d_p, cfg.proj_hidden)
        self.classifier = nn.Linear(cfg.d_e, 2)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def project(self, r: torch.Tensor) -> torch.Tensor:
        return self.projection(r)

    def classify(self, r: torch.Tensor) -> torch.Tensor:
        return self.classifier(r)

    def forward(self, x: torch.Tensor):
        r = self.encode(x)
        return r, self.project(r), self.classify(r)


def build_model(cfg: EncoderConfig, seed: int | None = None) -> VolumeClassifier:
    """Construct a model, optionally with deterministic initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return VolumeClassifier(cfg)


def inflate_2d_weights(w2d, t_k: int, mode: str):
    """Expand (Cout, Cin, k, k) kernels to (Cout, Cin, t_k, k, k).

    ``center`` places the 2D kernel at temporal index t_k//2 with zeros
    elsewhere; ``repeat`` spreads w2d/t_k across every temporal index. Both
    modes sum to the original kernel along the temporal axis.
    """
    if t_k < 1:
        raise InvalidArgument(f"temporal kernel size must be >= 1, got {t_k}")
    if mode not in (INFLATE_CENTER, INFLATE_REPEAT):
        raise InvalidArgument(f"unknown inflation mode {mode!r}")
    is_torch = isinstance(w2d, torch.Tensor)
    arr = w2d.detach().cpu().numpy() if is_torch else np.asarray(w2d)
    if arr.ndim != 4:
        raise InvalidArgument(f"expected (Cout,Cin,k,k) kernel, got shape {arr.shape}")
    cout, cin, kh, kw = arr.shape
    w3d = np.zeros((cout, cin, t_k, kh, kw), dtype=arr.dtype)
    if mode == INFLATE_CENTER:
        w3d[:, :, t_k // 2] = arr
    else:
        w3d[:] = arr[:, :, None] / t_k
    return torch.from_numpy(w3d) if is_torch else w3d
