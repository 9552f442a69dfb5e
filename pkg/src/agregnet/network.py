"""Segmentation-gated U-shaped density regression network.

Encoder: five stages of ConvNeXt-style residual blocks at widths
stage_channels, block counts stage_blocks. Stage 1 runs at full resolution
(stride-1 stem); 2x downsampling sits between stages 1-2, 2-3 and 3-4; stage 5
keeps the 1/8 resolution and uses dilated convolutions instead of further
downsampling, so stage outputs sit at scales (1, 1/2, 1/4, 1/8, 1/8).

Decoder: the stage-5 output is merged through a 1x1 convolution and then each
level concatenates an (optionally CBAM-gated) encoder skip with the upsampled
deeper features, followed by two 3x3 dilated convolutions that halve the
concatenated width, layer normalization and GELU. Bilinear interpolation does
the x2 upsampling, so three decoder levels restore full resolution.

Heads: a segmentation head (two dilated 3x3 convolutions + sigmoid) predicts
a foreground probability map which multiplicatively gates the decoder features
feeding the density head (two dilated 3x3 convolutions, no activation).

Block internals follow the standard ConvNeXt recipe (depthwise 7x7, LN, 1x1
expansion x4, GELU, 1x1 projection, residual add); stochastic depth and layer
scale are intentionally not implemented at this scale. When enabled, CBAM sits
on the residual branch of every encoder block and on each encoder-to-decoder
skip connection.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError


@dataclass
class NetworkConfig:
    """Architecture description; defaults give the full-size model."""

    stage_blocks: list[int] = field(default_factory=lambda: [1, 1, 3, 1, 1])
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    stage5_dilation: int = 2
    decoder_dilation: int = 2
    use_cbam: bool = True
    use_segmentation_branch: bool = True
    cbam_reduction: int = 8
    cbam_spatial_kernel: int = 7

    def __post_init__(self) -> None:
        if len(self.stage_blocks) != 5 or len(self.stage_channels) != 5:
            raise ConfigError("stage_blocks and stage_channels must have 5 entries")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("stage_blocks must be positive")
        if any(c <= 0 for c in self.stage_channels):
            raise ConfigError("stage_channels must be positive")
        if any(a >= b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError("stage_channels must be strictly increasing")
        if self.stage5_dilation < 1 or self.decoder_dilation < 1:
            raise ConfigError("dilation rates must be >= 1")
        if self.cbam_spatial_kernel % 2 != 1:
            raise ConfigError("cbam_spatial_kernel must be odd")
        if self.use_cbam and any(
            c % self.cbam_reduction != 0 for c in self.stage_channels
        ):
            raise ConfigError(
                f"stage_channels {self.stage_channels} must be divisible by "
                f"cbam_reduction {self.cbam_reduction}"
            )


@dataclass
class ModelOutput:
    """Predicted density raster and, when the branch exists, the segmentation
    probability map at the same spatial size."""

    density: Tensor
    segmentation: Tensor | None


def variant_name(use_cbam: bool, use_segmentation_branch: bool) -> str:
    """Ablation row label for a flag combination."""
    name = "Mod.ConvNeXt-T"
    if use_cbam:
        name += "+CBAM"
    if use_segmentation_branch:
        name += "+Seg."
    return name


class LayerNorm2d(nn.Module):
    """Layer normalization over the channel dimension of NCHW tensors."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction != 0:
            raise ConfigError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden, bias=False),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels, bias=False),
        )

    def forward(self, x: Tensor) -> Tensor:
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        gate = torch.sigmoid(self.mlp(avg) + self.mlp(mx))
        return gate[:, :, None, None]


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAM(nn.Module):
    """Sequential channel-then-spatial attention, applied multiplicatively."""

    def __init__(self, channels: int, reduction: int = 8, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_kernel)

    def forward(self, x: Tensor) -> Tensor:
        x = x * self.channel(x)
        x = x * self.spatial(x)
        return x


class EncoderBlock(nn.Module):
    """ConvNeXt-style residual block; CBAM (if any) gates the branch output
    before the residual add."""

    def __init__(self, dim: int, dilation: int = 1, cbam: CBAM | None = None):
        super().__init__()
        self.dwconv = nn.Conv2d(
            dim, dim, kernel_size=7, padding=3 * dilation, dilation=dilation, groups=dim
        )
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.pwconv2 = nn.Linear(4 * dim, dim)
        self.cbam = cbam

    def forward(self, x: Tensor) -> Tensor:
        residual = x
        x = self.dwconv(x)
        x = x.permute(0, 2, 3, 1)
        x = self.norm(x)
        x = self.pwconv1(x)
        x = self.act(x)
        x = self.pwconv2(x)
        x = x.permute(0, 3, 1, 2)
        if self.cbam is not None:
            x = self.cbam(x)
        return residual + x


class DecoderBlock(nn.Module):
    """Concatenate a skip with (upsampled) deeper features, then two dilated
    3x3 convolutions halving the concatenated width, LN and GELU."""

    def __init__(self, in_channels: int, skip_channels: int, dilation: int = 2):
        super().__init__()
        cat = in_channels + skip_channels
        if cat % 2 != 0:
            raise ConfigError(f"concatenated width {cat} is odd, cannot halve")
        self.conv1 = nn.Conv2d(cat, cat, kernel_size=3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv2d(cat, cat // 2, kernel_size=3, padding=dilation, dilation=dilation)
        self.norm = LayerNorm2d(cat // 2)
        self.act = nn.GELU()
        self.out_channels = cat // 2

    def forward(self, current: Tensor, skip: Tensor) -> Tensor:
        ch, cw = current.shape[-2:]
        sh, sw = skip.shape[-2:]
        if (ch, cw) == (sh, sw):
            pass
        elif (2 * ch, 2 * cw) == (sh, sw):
            current = F.interpolate(current, size=(sh, sw), mode="bilinear", align_corners=False)
        else:
            raise ValueError(
                f"decoder spatial mismatch: current {ch}x{cw} vs skip {sh}x{sw}"
            )
        x = torch.cat([current, skip], dim=1)
        x = self.conv1(x)
        x = self.conv2(x)
        x = self.norm(x)
        return self.act(x)


def _head(channels: int, dilation: int, sigmoid: bool) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Conv2d(channels, channels, kernel_size=3, padding=dilation, dilation=dilation),
        nn.Conv2d(channels, 1, kernel_size=3, padding=dilation, dilation=dilation),
    ]
    if sigmoid:
        layers.append(nn.Sigmoid())
    return nn.Sequential(*layers)


class AgRegNet(nn.Module):
    """Encoder-decoder density regressor with optional CBAM and an optional
    segmentation branch gating the density head."""

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        if config is None:
            config = NetworkConfig()
        self.config = config
        ch = config.stage_channels

        def make_cbam(dim: int) -> CBAM | None:
            if not config.use_cbam:
                return None
            return CBAM(dim, config.cbam_reduction, config.cbam_spatial_kernel)

        self.stem = nn.Sequential(
            nn.Conv2d(3, ch[0], kernel_size=3, stride=1, padding=1),
            LayerNorm2d(ch[0]),
        )
        self.stages = nn.ModuleList()
        for i, (dim, depth) in enumerate(zip(ch, config.stage_blocks)):
            dilation = config.stage5_dilation if i == 4 else 1
            self.stages.append(
                nn.Sequential(
                    *[EncoderBlock(dim, dilation, make_cbam(dim)) for _ in range(depth)]
                )
            )
        # downsampling transitions between stages 1-2, 2-3, 3-4
        self.downs = nn.ModuleList(
            nn.Sequential(
                LayerNorm2d(ch[i]),
                nn.Conv2d(ch[i], ch[i + 1], kernel_size=2, stride=2),
            )
            for i in range(3)
        )
        # stage 4 -> 5 transition: dilated, resolution-preserving
        self.trans5 = nn.Sequential(
            LayerNorm2d(ch[3]),
            nn.Conv2d(
                ch[3],
                ch[4],
                kernel_size=3,
                padding=config.stage5_dilation,
                dilation=config.stage5_dilation,
            ),
        )
        self.skip_cbam = nn.ModuleList(
            (make_cbam(ch[i]) or nn.Identity()) for i in range(4)
        )

        self.merge5 = nn.Conv2d(ch[4], ch[3], kernel_size=1)
        d = config.decoder_dilation
        self.dec4 = DecoderBlock(ch[3], ch[3], d)
        self.dec3 = DecoderBlock(self.dec4.out_channels, ch[2], d)
        self.dec2 = DecoderBlock(self.dec3.out_channels, ch[1], d)
        self.dec1 = DecoderBlock(self.dec2.out_channels, ch[0], d)
        feat = self.dec1.out_channels

        if config.use_segmentation_branch:
            self.seg_head = _head(feat, d, sigmoid=True)
        else:
            self.seg_head = None
        self.density_head = _head(feat, d, sigmoid=False)

        self.apply(_init_weights)
        # oneDNN runs these convolutions substantially faster channels-last
        self.to(memory_format=torch.channels_last)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def encode(self, x: Tensor) -> list[Tensor]:
        """Stage outputs at scales (1, 1/2, 1/4, 1/8, 1/8) of the input."""
        x = self.stem(x)
        feats = []
        x = self.stages[0](x)
        feats.append(x)
        for i in range(3):
            x = self.downs[i](x)
            x = self.stages[i + 1](x)
            feats.append(x)
        x = self.trans5(x)
        x = self.stages[4](x)
        feats.append(x)
        return feats

    def decoder_features(self, x: Tensor) -> Tensor:
        """Full-resolution decoder feature map feeding both heads."""
        s1, s2, s3, s4, s5 = self.encode(x)
        skips = [gate(s) for gate, s in zip(self.skip_cbam, (s1, s2, s3, s4))]
        y = self.merge5(s5)
        y = self.dec4(y, skips[3])
        y = self.dec3(y, skips[2])
        y = self.dec2(y, skips[1])
        return self.dec1(y, skips[0])

    def forward(self, image: Tensor) -> ModelOutput:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected a 3-channel image tensor, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 8 != 0 or w % 8 != 0:
            raise ValueError(f"input size {h}x{w} must be divisible by 8")
        image = image.contiguous(memory_format=torch.channels_last)
        feat = self.decoder_features(image)
        if self.seg_head is not None:
            seg = self.seg_head(feat)
            density = self.density_head(feat * seg)
        else:
            seg = None
            density = self.density_head(feat)
        density = density.contiguous()
        seg = seg.contiguous() if seg is not None else None
        if squeeze:
            density = density.squeeze(0)
            seg = seg.squeeze(0) if seg is not None else None
        return ModelOutput(density=density, segmentation=seg)


def _init_weights(module: nn.Module) -> None:
    # random layers start from N(0, 0.01); norms keep identity init
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        nn.init.normal_(module.weight, mean=0.0, std=0.01)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def build_model(config: NetworkConfig | None = None) -> AgRegNet:
    """Construct the network; the returned module reports its own size via
    parameter_count()."""
    return AgRegNet(config)


def save_checkpoint(model: AgRegNet, path: str | Path) -> None:
    """Single-archive checkpoint: config as JSON plus the parameter table."""
    torch.save(
        {
            "config_json": json.dumps(asdict(model.config)),
            "state_dict": model.state_dict(),
        },
        str(path),
    )


def load_checkpoint(path: str | Path, model: AgRegNet | None = None) -> AgRegNet:
    """Load a checkpoint; config equality is validated before any weight is
    assigned. With model=None a fresh model is built from the stored config."""
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    stored = NetworkConfig(**json.loads(blob["config_json"]))
    if model is None:
        model = AgRegNet(stored)
    elif model.config != stored:
        raise ConfigError(
            f"checkpoint config {stored} does not match model config {model.config}"
        )
    model.load_state_dict(blob["state_dict"])
    return model


def load_encoder_weights(model: AgRegNet, path: str | Path) -> dict[str, list[str]]:
    """Map an original-layout ConvNeXt-T state dict onto encoder stages 1-4.

    Source keys follow the reference layout (downsample_layers.N...,
    stages.N.M.{dwconv,norm,pwconv1,pwconv2}...). Entries whose mapped target
    exists with an identical shape are copied; everything else is skipped.
    Returns {"loaded": [...], "skipped": [...]} with source key names.
    """
    source = torch.load(str(path), map_location="cpu", weights_only=False)
    if "state_dict" in source and isinstance(source["state_dict"], dict):
        source = source["state_dict"]
    if "model" in source and isinstance(source["model"], dict):
        source = source["model"]
    target = model.state_dict()
    loaded, skipped = [], []
    for key, value in source.items():
        mapped = _map_encoder_key(key)
        if mapped is None or mapped not in target:
            skipped.append(key)
            continue
        if tuple(target[mapped].shape) != tuple(value.shape):
            skipped.append(key)
            continue
        target[mapped] = value
        loaded.append(key)
    model.load_state_dict(target)
    return {"loaded": loaded, "skipped": skipped}


def _map_encoder_key(key: str) -> str | None:
    parts = key.split(".")
    if parts[0] == "stages" and len(parts) >= 4:
        stage = int(parts[1])
        if stage > 3 or parts[3] == "gamma" or (len(parts) > 3 and parts[-1] == "gamma"):
            return None
        return key
    if parts[0] == "downsample_layers" and len(parts) == 4:
        idx = int(parts[1])
        if idx == 0:
            return f"stem.{parts[2]}.{parts[3]}"
        if 1 <= idx <= 3:
            return f"downs.{idx - 1}.{parts[2]}.{parts[3]}"
    return None
