"""PatchGAN critic with an auxiliary multi-label category head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

from torch import Tensor, nn

from .datamodel import NUM_CATEGORIES


@dataclass
class DiscriminatorConfig:
    image_size: int = 128
    n_stages: int = 6
    base_width: int = 64
    max_width: int = 2048
    n_categories: int = NUM_CATEGORIES

    def validate(self) -> None:
        if self.n_stages < 1 or self.image_size < 2**self.n_stages or self.image_size % 2**self.n_stages:
            raise ValueError(f"image_size {self.image_size} must be a multiple of 2**n_stages ({2**self.n_stages})")
        if self.base_width <= 0:
            raise ValueError("base_width must be positive")

    @property
    def map_size(self) -> int:
        return self.image_size // 2**self.n_stages

    def to_dict(self) -> dict:
        return asdict(self)


class DiscriminatorOutput(NamedTuple):
    src_map: Tensor  # (B, 1, h', w') unbounded critic scores
    cls_logits: Tensor  # (B, C)


class Discriminator(nn.Module):
    """Strided 4x4 convs with LeakyReLU(0.01) and no normalization.

    ``src`` is a 3x3 conv over the final map; ``cls`` a conv spanning the
    whole final map.
    """

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = cfg = config or DiscriminatorConfig()
        cfg.validate()
        layers = []
        cin, cout = 3, cfg.base_width
        for _ in range(cfg.n_stages):
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.01)]
            cin, cout = cout, min(cout * 2, cfg.max_width)
        self.backbone = nn.Sequential(*layers)
        self.src = nn.Conv2d(cin, 1, 3, 1, 1, bias=False)
        self.cls = nn.Conv2d(cin, cfg.n_categories, cfg.map_size, bias=False)

    def forward(self, x: Tensor) -> DiscriminatorOutput:
        size = self.config.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, size, size):
            raise ValueError(f"expected (B, 3, {size}, {size}) images, got {tuple(x.shape)}")
        h = self.backbone(x)
        return DiscriminatorOutput(self.src(h), self.cls(h).flatten(1))

    def receptive_layers(self) -> list[tuple[int, int, int]]:
        """(kernel, stride, padding) of every conv on the src path."""
        convs = [m for m in self.backbone if isinstance(m, nn.Conv2d)] + [self.src]
        return [(c.kernel_size[0], c.stride[0], c.padding[0]) for c in convs]
