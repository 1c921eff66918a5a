"""Content encoder, style encoder, AdaIN decoder and segmentation head.

All four networks live in one :class:`ModelBundle` so a single optimizer can
own every parameter. Tensors are NCHW throughout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from uniddg.core import ShapeError

IN_EPS = 1e-5
LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0
# keeps float32 tanh from saturating onto +-1 exactly
CONTENT_BOUND = 1.0 - 1e-6


@dataclass
class ModelConfig:
    in_channels: int = 3
    unet_widths: tuple = (16, 32, 64, 128, 256)
    content_channels: int = 8
    style_widths: tuple = (32, 64, 128, 256)
    style_dim: int = 48
    decoder_width: int = 64
    decoder_blocks: int = 3
    mlp_hidden: int = 128
    seg_width: int = 32
    num_classes: int = 3
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.unet_widths = tuple(self.unet_widths)
        self.style_widths = tuple(self.style_widths)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_widths"] = list(self.unet_widths)
        d["style_widths"] = list(self.style_widths)
        return d

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.unet_widths) - 1)


def _conv_bn_act(cin, cout, momentum):
    return [
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout, momentum=momentum),
        nn.LeakyReLU(0.2),
    ]


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout, momentum=0.1):
        super().__init__(*_conv_bn_act(cin, cout, momentum), *_conv_bn_act(cout, cout, momentum))


class UNetEncoder(nn.Module):
    """U-Net whose head emits `content_channels` maps squashed by tanh."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.unet_widths
        m = cfg.bn_momentum
        self.factor = cfg.downsample_factor
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for cout in w:
            self.down.append(DoubleConv(cin, cout, m))
            cin = cout
        self.up_proj = nn.ModuleList()
        self.up = nn.ModuleList()
        for lo, hi in zip(reversed(w[:-1]), reversed(w[1:])):
            self.up_proj.append(nn.Conv2d(hi, lo, 3, padding=1))
            self.up.append(DoubleConv(2 * lo, lo, m))
        self.head = nn.Conv2d(w[0], cfg.content_channels, 1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ShapeError(f"content encoder needs H, W divisible by {self.factor}, got {h}x{w}")
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        skips.pop()
        for proj, block in zip(self.up_proj, self.up):
            x = proj(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = block(torch.cat([x, skips.pop()], dim=1))
        return torch.tanh(self.head(x)).clamp(-CONTENT_BOUND, CONTENT_BOUND)


class StyleEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        cin = cfg.in_channels
        for cout in cfg.style_widths:
            layers += [
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                nn.InstanceNorm2d(cout),
                nn.LeakyReLU(0.2),
            ]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.fc_mean = nn.Linear(cin, cfg.style_dim)
        self.fc_logvar = nn.Linear(cin, cfg.style_dim)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.features[0].in_channels:
            raise ShapeError(f"style encoder expects (N, 3, H, W), got {tuple(x.shape)}")
        h = self.features(x).mean(dim=(2, 3))
        return self.fc_mean(h), self.fc_logvar(h)


def sample_style(mean, log_variance, generator=None):
    """Reparameterized draw ``mean + exp(0.5 * logvar) * eps``.

    No KL term is attached; the prior is never consulted.
    """
    log_variance = log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX)
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    return mean + torch.exp(0.5 * log_variance) * eps


def adain(features, alpha, beta, eps=IN_EPS):
    """Renormalize each channel to scale `alpha` and bias `beta`.

    `features` is (N, K, H, W); `alpha`/`beta` are (K,) or (N, K). Statistics
    are per-instance, per-channel with population variance.
    """
    k = features.shape[1]
    if alpha.shape[-1] != k or beta.shape[-1] != k:
        raise ShapeError(
            f"AdaIN params have length {alpha.shape[-1]}/{beta.shape[-1]}, features have {k} channels"
        )
    if features.shape[2] * features.shape[3] < 2:
        raise ShapeError("AdaIN needs at least 2 spatial elements per channel")
    mean = features.mean(dim=(2, 3), keepdim=True)
    # clamp keeps sqrt differentiable on constant channels
    std = features.var(dim=(2, 3), unbiased=False, keepdim=True).clamp_min(1e-20).sqrt()
    if alpha.ndim == 1:
        alpha, beta = alpha[None], beta[None]
    return alpha[..., None, None] * (features - mean) / (std + eps) + beta[..., None, None]


class StyleMLP(nn.Module):
    """Maps a style code to (alpha, beta) for every repainting block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.width = cfg.decoder_width
        self.blocks = cfg.decoder_blocks
        n_out = 2 * self.width * self.blocks
        self.hidden = nn.Linear(cfg.style_dim, cfg.mlp_hidden)
        self.act = nn.LeakyReLU(0.2)
        self.out = nn.Linear(cfg.mlp_hidden, n_out)
        nn.init.zeros_(self.out.weight)
        with torch.no_grad():
            bias = self.out.bias.view(self.blocks, 2, self.width)
            bias[:, 0] = 1.0
            bias[:, 1] = 0.0

    def forward(self, s):
        p = self.out(self.act(self.hidden(s)))
        p = p.view(s.shape[0], self.blocks, 2, self.width)
        return [(p[:, b, 0], p[:, b, 1]) for b in range(self.blocks)]


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.content_channels = cfg.content_channels
        self.style_dim = cfg.style_dim
        self.mlp = StyleMLP(cfg)
        self.convs = nn.ModuleList()
        cin = cfg.content_channels
        for _ in range(cfg.decoder_blocks):
            self.convs.append(nn.Conv2d(cin, cfg.decoder_width, 3, padding=1))
            cin = cfg.decoder_width
        self.act = nn.LeakyReLU(0.2)
        self.out = nn.Conv2d(cin, cfg.in_channels, 3, padding=1)

    def forward(self, content, style):
        if content.ndim != 4 or content.shape[1] != self.content_channels:
            raise ShapeError(f"decoder content must be (N, {self.content_channels}, H, W)")
        if style.ndim != 2 or style.shape != (content.shape[0], self.style_dim):
            raise ShapeError(f"decoder style must be (N, {self.style_dim}), got {tuple(style.shape)}")
        h = content
        for conv, (alpha, beta) in zip(self.convs, self.mlp(style)):
            h = self.act(adain(conv(h), alpha, beta))
        return torch.tanh(self.out(h))


class Segmenter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.content_channels = cfg.content_channels
        self.block = nn.Sequential(*_conv_bn_act(cfg.content_channels, cfg.seg_width, cfg.bn_momentum))
        self.head = nn.Conv2d(cfg.seg_width, cfg.num_classes, 1)

    def forward(self, content):
        if content.ndim != 4 or content.shape[1] != self.content_channels:
            raise ShapeError(f"segmenter expects (N, {self.content_channels}, H, W)")
        return torch.softmax(self.head(self.block(content)), dim=1)


class ModelBundle(nn.Module):
    """The four cooperating networks plus their shared config."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.config = cfg or ModelConfig()
        self.content_encoder = UNetEncoder(self.config)
        self.style_encoder = StyleEncoder(self.config)
        self.decoder = Decoder(self.config)
        self.segmenter = Segmenter(self.config)

    @property
    def mode(self) -> str:
        return "training" if self.training else "evaluation"

    def encode_content(self, x):
        return self.content_encoder(x)

    def encode_style(self, x):
        return self.style_encoder(x)

    def decode(self, content, style):
        return self.decoder(content, style)

    def segment(self, content):
        return self.segmenter(content)

    def forward(self, x):
        return self.segment(self.encode_content(x))


def build_model(cfg: ModelConfig | None = None, seed: int | None = None, dtype=torch.float32) -> ModelBundle:
    if seed is not None:
        torch.manual_seed(seed)
    return ModelBundle(cfg).to(dtype)
