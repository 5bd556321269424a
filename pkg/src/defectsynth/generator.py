"""Encoder-decoder generator with SPADE control, noise injection and layer composition."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .controlmap import label_maps
from .datamodel import NORMAL_INDEX, NUM_CATEGORIES


@dataclass
class GeneratorConfig:
    image_size: int = 128
    base_width: int = 64
    n_res_blocks: int = 6
    n_categories: int = NUM_CATEGORIES
    spade_hidden: int = 64
    noise: bool = True  # adaptive noise injection (ANI)
    spade: bool = True  # spatial & categorical control (SCC)
    composition: bool = True  # layer-wise composition (LWC)

    def validate(self) -> None:
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.base_width <= 0 or self.spade_hidden <= 0:
            raise ValueError("channel widths must be positive")
        if self.n_res_blocks < 0 or self.n_categories < 1:
            raise ValueError("n_res_blocks must be >= 0 and n_categories >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def spade_modulate(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Parameter-free instance norm followed by spatial affine modulation."""
    return F.instance_norm(features) * (1 + gamma) + beta


class SPADE(nn.Module):
    def __init__(self, channels: int, n_categories: int, hidden: int):
        super().__init__()
        self.shared = nn.Sequential(nn.Conv2d(n_categories, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)
        # identity modulation at init
        for conv in (self.gamma, self.beta):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, x: Tensor, A: Tensor) -> Tensor:
        A = F.interpolate(A, size=x.shape[-2:], mode="nearest")
        h = self.shared(A)
        return spade_modulate(x, self.gamma(h), self.beta(h))


class PlainNorm(nn.Module):
    """Stand-in for SPADE when control is ablated; ignores the control map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=True)

    def forward(self, x: Tensor, A: Tensor) -> Tensor:
        return self.norm(x)


def inject_noise(features: Tensor, scale: Tensor | float, generator: torch.Generator | None = None) -> Tensor:
    z = torch.randn(features.shape, generator=generator, dtype=features.dtype, device=features.device)
    return features + scale * z


class NoiseInjection(nn.Module):
    def __init__(self, init_scale: float = 0.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(float(init_scale)))

    def forward(self, x: Tensor, generator: torch.Generator | None) -> Tensor:
        return inject_noise(x, self.scale, generator)


class _Noise(nn.Module):
    """Noise site that becomes a no-op when injection is disabled."""

    def __init__(self, enabled: bool):
        super().__init__()
        self.inject = NoiseInjection() if enabled else None

    def forward(self, x, gen, active):
        if self.inject is None or not active:
            return x
        return self.inject(x, gen)


class EncoderBlock(nn.Module):
    def __init__(self, cin, cout, kernel, stride, padding, noise):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride, padding, bias=False)
        self.norm = nn.InstanceNorm2d(cout, affine=True)
        self.noise = _Noise(noise)

    def forward(self, x, gen, active):
        return self.noise(F.relu(self.norm(self.conv(x))), gen, active)


class ResBlock(nn.Module):
    def __init__(self, width, make_norm, noise):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, 1, 1, bias=False)
        self.norm1 = make_norm(width)
        self.conv2 = nn.Conv2d(width, width, 3, 1, 1, bias=False)
        self.norm2 = make_norm(width)
        self.noise = _Noise(noise)

    def forward(self, x, A, gen, active):
        h = F.relu(self.norm1(self.conv1(x), A))
        h = self.norm2(self.conv2(h), A)
        return self.noise(x + h, gen, active)


class UpBlock(nn.Module):
    def __init__(self, cin, cout, make_norm, noise):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False)
        self.norm = make_norm(cout)
        self.noise = _Noise(noise)

    def forward(self, x, A, gen, active):
        return self.noise(F.relu(self.norm(self.conv(x), A)), gen, active)


class Generator(nn.Module):
    """Stride-4 encoder, residual bottleneck and upsampling decoder.

    The control map conditions every decoder block (bottleneck and
    upsampling) through SPADE. With ``spade=False`` it is instead
    concatenated to the input image, StarGAN style. Outputs a tanh
    foreground ``f`` and a sigmoid spatial distribution map ``m``.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        cfg.validate()
        w, C = cfg.base_width, cfg.n_categories
        if cfg.spade:
            make_norm = lambda ch: SPADE(ch, C, cfg.spade_hidden)  # noqa: E731
        else:
            make_norm = PlainNorm
        in_ch = 3 if cfg.spade else 3 + C
        self.encoder = nn.ModuleList(
            [
                EncoderBlock(in_ch, w, 7, 1, 3, cfg.noise),
                EncoderBlock(w, 2 * w, 4, 2, 1, cfg.noise),
                EncoderBlock(2 * w, 4 * w, 4, 2, 1, cfg.noise),
            ]
        )
        self.bottleneck = nn.ModuleList([ResBlock(4 * w, make_norm, cfg.noise) for _ in range(cfg.n_res_blocks)])
        self.up = nn.ModuleList(
            [
                UpBlock(4 * w, 2 * w, make_norm, cfg.noise),
                UpBlock(2 * w, w, make_norm, cfg.noise),
            ]
        )
        self.to_foreground = nn.Conv2d(w, 3, 7, 1, 3)
        self.to_map = nn.Conv2d(w, 1, 7, 1, 3) if cfg.composition else None

    def forward(
        self, x: Tensor, A: Tensor, noise_seed: int | None = None, use_noise: bool = True
    ) -> tuple[Tensor, Tensor]:
        """Return ``(f, m)``; ``m`` is all zeros when composition is disabled."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        if A.dim() != 4 or A.shape[1] != self.config.n_categories:
            raise ValueError(f"expected (B, {self.config.n_categories}, H, W) control maps, got {tuple(A.shape)}")
        if A.shape[-2:] != x.shape[-2:] or A.shape[0] != x.shape[0]:
            raise ValueError(f"image {tuple(x.shape)} and control map {tuple(A.shape)} disagree")
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError("image height and width must be divisible by 4")
        A = A.to(x.dtype)
        gen = None
        if noise_seed is not None:
            gen = torch.Generator(device=x.device)
            gen.manual_seed(int(noise_seed))

        h = x if self.config.spade else torch.cat([x, A], dim=1)
        for block in self.encoder:
            h = block(h, gen, use_noise)
        for block in self.bottleneck:
            h = block(h, A, gen, use_noise)
        for block in self.up:
            h = block(h, A, gen, use_noise)
        f = torch.tanh(self.to_foreground(h))
        if self.to_map is None:
            m = torch.zeros_like(f[:, :1])
        else:
            m = torch.sigmoid(self.to_map(h))
        return f, m

    def deface(self, n: Tensor, A: Tensor, noise_seed: int | None = None, use_noise: bool = True):
        """Add defects to ``n`` as requested by ``A``: returns ``(d, f_d, m_d)``."""
        f, m = self(n, A, noise_seed, use_noise)
        return self._compose(n, f, m), f, m

    def restore(self, d: Tensor, noise_seed: int | None = None, use_noise: bool = True):
        """Repaint defects out of ``d``: returns ``(n_hat, f, m)``."""
        return self.deface(d, restoration_maps(d), noise_seed, use_noise)

    def _compose(self, background, f, m):
        if not self.config.composition:
            return f
        return compose(background, f, m)


def restoration_maps(images: Tensor) -> Tensor:
    b, _, h, w = images.shape
    labels = torch.zeros(b, NUM_CATEGORIES, dtype=images.dtype, device=images.device)
    labels[:, NORMAL_INDEX] = 1
    return label_maps(labels, h, w)


def compose(background: Tensor, f: Tensor, m: Tensor) -> Tensor:
    """Blend foreground over background: ``background*(1-m) + f*m``.

    ``m`` has one channel and broadcasts over colour channels.
    """
    if background.shape != f.shape:
        raise ValueError(f"background {tuple(background.shape)} and foreground {tuple(f.shape)} differ")
    assert not torch.any((m < 0) | (m > 1)), "spatial distribution map must lie in [0, 1]"
    return background * (1 - m) + f * m
