"""Counting network.

backbone (/16) -> x2 bilinear upsample -> global message passing -> 1x1 conv
-> single-channel coarse map z at 1/8 input resolution. The count estimate is
||z||_1 and training minimizes | ||z||_1 - y |.
"""

import logging
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from cellcount.errors import ConfigError, LabelError, ShapeError
from cellcount.gmp import GlobalMessagePassing

log = logging.getLogger(__name__)

BACKBONES = ("vgg19_truncated", "tiny_cnn")
DOWNSAMPLE = 16

# VGG-19 feature config without its fifth (last) max-pool.
VGG19_TRUNCATED = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                   512, 512, 512, 512, "M", 512, 512, 512, 512]


@dataclass(frozen=True)
class CounterConfig:
    backbone: str = "tiny_cnn"
    pretrained: bool = False
    gmp_heads: int = 8
    gmp_enabled: bool = True
    gmp_residual: bool = False
    head_nonneg: bool = True
    widths: tuple = (16, 32, 64, 64)
    in_channels: int = 3

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"counter.backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.gmp_heads < 1:
            raise ConfigError(f"counter.gmp_heads must be >= 1, got {self.gmp_heads}")
        if self.backbone == "tiny_cnn" and len(self.widths) != 4:
            raise ConfigError("counter.widths must list 4 block widths for tiny_cnn")
        return self

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def make_vgg_layers(cfg, in_channels=3):
    layers = []
    for v in cfg:
        if v == "M":
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        else:
            layers += [nn.Conv2d(in_channels, v, kernel_size=3, padding=1), nn.ReLU(inplace=True)]
            in_channels = v
    return nn.Sequential(*layers), in_channels


def tiny_cnn(widths, in_channels=3):
    """Four conv blocks, each halving resolution: same /16 contract as VGG."""
    layers = []
    for w in widths:
        layers += [
            nn.Conv2d(in_channels, w, kernel_size=3, padding=1),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=2, stride=2),
        ]
        in_channels = w
    return nn.Sequential(*layers), in_channels


def _load_imagenet_vgg(features):
    """Copy torchvision VGG-19 ImageNet weights if they are available offline."""
    try:
        from torchvision.models import VGG19_Weights, vgg19
        ref = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
    except Exception as e:  # no torchvision, no cached weights, no network
        log.warning("ImageNet VGG-19 weights unavailable (%s); using random init", e)
        return False
    src = [m for m in ref if isinstance(m, nn.Conv2d)]
    dst = [m for m in features if isinstance(m, nn.Conv2d)]
    for a, b in zip(src, dst):
        b.load_state_dict(a.state_dict())
    return True


def _init_trunk(trunk):
    # He init as for plain VGG: keeps activation scale through the ReLU stack
    for m in trunk.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)


IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _input_stats(channels):
    if channels == 3:
        return IMAGENET_MEAN, IMAGENET_STD
    return (sum(IMAGENET_MEAN) / 3,) * channels, (sum(IMAGENET_STD) / 3,) * channels


class Counter(nn.Module):
    def __init__(self, cfg=CounterConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        if cfg.backbone == "vgg19_truncated":
            self.backbone, channels = make_vgg_layers(VGG19_TRUNCATED, cfg.in_channels)
            _init_trunk(self.backbone)
            self.pretrained_loaded = _load_imagenet_vgg(self.backbone) if cfg.pretrained else False
        else:
            self.backbone, channels = tiny_cnn(cfg.widths, cfg.in_channels)
            _init_trunk(self.backbone)
            self.pretrained_loaded = False
        mean, std = _input_stats(cfg.in_channels)
        self.register_buffer("input_mean", torch.tensor(mean).view(1, -1, 1, 1), persistent=False)
        self.register_buffer("input_std", torch.tensor(std).view(1, -1, 1, 1), persistent=False)
        self.gmp = GlobalMessagePassing(channels, cfg.gmp_heads, cfg.gmp_residual)
        self.head = nn.Conv2d(channels, 1, kernel_size=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def features(self, image):
        if image.dim() != 4:
            raise ShapeError(f"expected (N, C, H, W) input, got {tuple(image.shape)}")
        H, W = image.shape[-2:]
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise ShapeError(f"input size {H}x{W} must be divisible by {DOWNSAMPLE}")
        f = self.backbone((image - self.input_mean) / self.input_std)
        f = F.interpolate(f, scale_factor=2, mode="bilinear", align_corners=False)
        if self.cfg.gmp_enabled:
            f = self.gmp(f)
        return f

    def forward(self, image):
        """Coarse map z of shape (N, 1, H/8, W/8)."""
        z = self.head(self.features(image))
        if self.cfg.head_nonneg:
            # clamp (unlike relu) passes gradient at exactly 0, so a
            # zero-initialized head still receives signal
            z = z.clamp(min=0.0)
        return z

    def count(self, z):
        return l1_count(z, self.cfg.head_nonneg)

    def loss(self, z, y):
        return count_loss(z, y, self.cfg.head_nonneg)


def l1_count(z, nonneg=False):
    """||z||_1 per sample for a (N, 1, h, w) coarse map.

    For a rectified map this is the plain sum, which (unlike abs) keeps a unit
    gradient at z == 0.
    """
    z = z.flatten(1)
    return z.sum(dim=1) if nonneg else z.abs().sum(dim=1)


def count_loss(z, y, nonneg=False):
    """Mean over the batch of | ||z||_1 - y |; the subgradient at the kink is 0."""
    y = torch.as_tensor(y, dtype=z.dtype, device=z.device).reshape(-1)
    if torch.any(y < 0):
        raise LabelError("count labels must be non-negative")
    return (l1_count(z, nonneg) - y).abs().mean()
