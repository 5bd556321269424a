"""Loss terms for the critic and the generator, and their weighted totals."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import Tensor


@dataclass
class LossWeights:
    cls_r: float = 2.0
    cls_f: float = 5.0
    rec: float = 5.0
    sd_cyc: float = 5.0
    sd_con: float = 1.0
    gp: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


D_TERMS = ("adv_d", "gp", "cls_r")
G_TERMS = ("adv_g", "cls_f", "rec", "sd_cyc", "sd_con")


@dataclass
class LossReport:
    adv_d: float = 0.0
    adv_g: float = 0.0
    gp: float = 0.0
    cls_r: float = 0.0
    cls_f: float = 0.0
    rec: float = 0.0
    sd_cyc: float = 0.0
    sd_con: float = 0.0
    total_d: float = 0.0
    total_g: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


class NonFiniteLoss(FloatingPointError):
    pass


def _src_scores(D, x: Tensor) -> Tensor:
    """Per-sample critic value: mean over the patch map."""
    out = D(x)
    if isinstance(out, tuple):
        out = out[0]
    return out.reshape(out.shape[0], -1).mean(dim=1)


def gradient_penalty(D, real: Tensor, fake: Tensor, seed: int | None = None) -> Tensor:
    gen = None
    if seed is not None:
        gen = torch.Generator(device=real.device)
        gen.manual_seed(int(seed))
    eps = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=gen, dtype=real.dtype, device=real.device)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    scores = _src_scores(D, x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def critic_loss(D, real: Tensor, fake: Tensor, seed: int | None = None) -> tuple[Tensor, Tensor]:
    """WGAN-GP critic terms ``(adv_d, gp)``; adv_d = E[D(fake)] - E[D(real)]."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ")
    adv_d = _src_scores(D, fake.detach()).mean() - _src_scores(D, real).mean()
    return adv_d, gradient_penalty(D, real, fake, seed)


def generator_adv_loss(D, fake: Tensor) -> Tensor:
    return -_src_scores(D, fake).mean()


def classification_loss(cls_logits: Tensor, target: Tensor) -> Tensor:
    """Multi-label BCE averaged over categories and batch."""
    return F.binary_cross_entropy_with_logits(cls_logits, target.to(cls_logits.dtype))


def reconstruction_loss(x: Tensor, x_rec: Tensor) -> Tensor:
    return (x - x_rec).abs().mean()


def sd_cycle_loss(m_deface: Tensor, m_restore: Tensor) -> Tensor:
    return (m_deface - m_restore).abs().mean()


def sd_region_loss(m_deface: Tensor, m_restore: Tensor) -> Tensor:
    return m_deface.mean() + m_restore.mean()


def combine_d(c: dict, w: LossWeights):
    return c["adv_d"] + w.gp * c["gp"] + w.cls_r * c["cls_r"]


def combine_g(c: dict, w: LossWeights):
    return c["adv_g"] + w.cls_f * c["cls_f"] + w.rec * c["rec"] + w.sd_cyc * c["sd_cyc"] + w.sd_con * c["sd_con"]


def total_losses(components: dict, weights: LossWeights) -> LossReport:
    """Build a report from scalar components; missing terms count as 0."""
    values = {}
    for name in D_TERMS + G_TERMS:
        v = components.get(name, 0.0)
        v = float(v.detach()) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteLoss(f"{name} non-finite")
        values[name] = v
    return LossReport(total_d=combine_d(values, weights), total_g=combine_g(values, weights), **values)
