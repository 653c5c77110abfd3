"""Trainable blocks: encoder, momentum twin, projection heads, refiner, head.

The encoder is a small 4-stage convolutional network (depthwise 7x7 blocks
with inverted-bottleneck MLPs) with total stride 32, sized to train on CPU.
All shape contracts live in the forward methods.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dim of an NCHW tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.ln = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.ln(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ConvBlock(nn.Module):
    """Residual depthwise-conv block; ``zero_init`` makes it the identity."""

    def __init__(self, channels: int, zero_init: bool = False):
        super().__init__()
        self.dwconv = nn.Conv2d(channels, channels, 7, padding=3, groups=channels)
        self.norm = LayerNorm2d(channels)
        self.pw1 = nn.Conv2d(channels, 4 * channels, 1)
        self.act = nn.GELU()
        self.pw2 = nn.Conv2d(4 * channels, channels, 1)
        if zero_init:
            nn.init.zeros_(self.pw2.weight)
            nn.init.zeros_(self.pw2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pw2(self.act(self.pw1(self.norm(self.dwconv(x)))))


class Encoder(nn.Module):
    """Image -> (N, C1, H/stride, W/stride) representation.

    Stem downsamples by 4, every later stage by 2; stage widths double up to
    ``repr_channels``. Inputs whose spatial dims are not multiples of the
    stride are rejected rather than silently padded.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stride = cfg.stride
        self.out_channels = cfg.repr_channels
        n_stages = int(math.log2(cfg.stride // 4)) + 1
        widths = [cfg.repr_channels // 2 ** (n_stages - 1 - i) for i in range(n_stages)]

        layers: list[nn.Module] = [
            nn.Conv2d(3, widths[0], 4, stride=4),
            LayerNorm2d(widths[0]),
            ConvBlock(widths[0]),
        ]
        for i in range(1, n_stages):
            layers += [
                nn.Conv2d(widths[i - 1], widths[i], 2, stride=2),
                LayerNorm2d(widths[i]),
                ConvBlock(widths[i]),
            ]
        self.stages = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"input {h}x{w} not divisible by encoder stride {self.stride}"
            )
        return self.stages(x)


class ProjectionHead(nn.Module):
    """Pool a representation and project it to a unit-norm embedding.

    A degenerate all-zero post-MLP vector maps to the zero vector (the norm
    clamp avoids dividing by zero); every other input comes out unit-norm.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.repr_channels, cfg.proj_hidden)
        self.fc2 = nn.Linear(cfg.proj_hidden, cfg.embed_dim)

    def forward(self, rep: torch.Tensor) -> torch.Tensor:
        pooled = rep.mean(dim=(-2, -1))
        z = self.fc2(F.relu(self.fc1(pooled)))
        return F.normalize(z, dim=-1, eps=1e-12)


class Refiner(nn.Module):
    """Shape-preserving residual stack mapping representations between domains.

    The final projection of every block is zero-initialized, so a fresh
    refiner is exactly the identity.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.channels = cfg.repr_channels
        self.blocks = nn.Sequential(
            *[ConvBlock(cfg.repr_channels, zero_init=True) for _ in range(cfg.refiner_depth)]
        )

    def forward(self, rep: torch.Tensor) -> torch.Tensor:
        if rep.shape[-3] != self.channels:
            raise ValueError(
                f"refiner expects {self.channels} channels, got {rep.shape[-3]}"
            )
        return self.blocks(rep)


class CountingHead(nn.Module):
    """Representation -> nonnegative density map via stacked x2 deconvs.

    Output resolution is ``head_upsample`` times the representation grid; the
    map is rectified with ``abs`` so its sum is a valid count while gradients
    keep flowing near zero.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n_up = int(math.log2(cfg.head_upsample))
        layers: list[nn.Module] = []
        ch = cfg.repr_channels
        for _ in range(n_up):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 2, stride=2), nn.GELU()]
            ch //= 2
        layers.append(nn.Conv2d(ch, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, rep: torch.Tensor) -> torch.Tensor:
        return self.net(rep).abs().squeeze(-3)


@torch.no_grad()
def momentum_update(target: nn.Module, source: nn.Module, m: float) -> None:
    """EMA update ``target <- m * target + (1 - m) * source``, in place.

    Parameter structures must match exactly; ``m=0`` copies the source and
    ``m=1`` leaves the target untouched.
    """
    if not (0.0 <= m <= 1.0):
        raise ValueError(f"momentum {m} outside [0, 1]")
    t_params = dict(target.named_parameters())
    s_params = dict(source.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("parameter structures differ between target and source")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        t.mul_(m).add_(s, alpha=1.0 - m)


def build_wrl_models(cfg: ModelConfig) -> dict[str, nn.Module]:
    """Fresh encoder/projection pairs plus counting head for stage one.

    The momentum branch starts as an exact copy of the query branch and is
    excluded from gradient updates.
    """
    cfg.validate()
    encoder = Encoder(cfg)
    proj_q = ProjectionHead(cfg)
    head = CountingHead(cfg)
    encoder_k = Encoder(cfg)
    proj_k = ProjectionHead(cfg)
    encoder_k.load_state_dict(encoder.state_dict())
    proj_k.load_state_dict(proj_q.state_dict())
    for module in (encoder_k, proj_k):
        for p in module.parameters():
            p.requires_grad_(False)
    return {
        "encoder": encoder,
        "proj_q": proj_q,
        "head": head,
        "encoder_k": encoder_k,
        "proj_k": proj_k,
    }
