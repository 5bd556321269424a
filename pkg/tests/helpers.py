"""Shared oracles for the unit and acceptance suites."""

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

from defectsynth.datamodel import one_hot
from defectsynth.discriminator import Discriminator, DiscriminatorConfig
from defectsynth.generator import Generator, GeneratorConfig
from defectsynth.objectives import LossWeights, combine_g
from defectsynth.trainer import CycleBatch, StepSeeds, TrainConfig, Trainer, generator_components


def micro_objective(seed=0):
    """8x8, width-4, float64 networks and a fixed batch; returns (G, loss_fn)."""
    torch.manual_seed(seed)
    G = Generator(GeneratorConfig(image_size=8, base_width=4, n_res_blocks=1, spade_hidden=4)).double()
    D = Discriminator(DiscriminatorConfig(image_size=8, n_stages=3, base_width=4)).double()
    for name, p in G.named_parameters():
        if name.endswith("inject.scale"):
            p.data.fill_(0.1)
    # non-trivial SPADE heads so the control path carries gradient
    for name, p in G.named_parameters():
        if ".gamma." in name or ".beta." in name:
            p.data.normal_(0, 0.1)
    gen = torch.Generator().manual_seed(seed + 1)
    b = 2
    labels = torch.zeros(b, 6, dtype=torch.float64)
    labels[0, 0] = labels[1, 4] = 1
    batch = CycleBatch(
        torch.rand(b, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1,
        torch.rand(b, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1,
        labels,
        labels.flip(0),
    )
    seeds = StepSeeds(11, 12, 13, 14, 15)
    weights = LossWeights()

    def loss():
        return combine_g(generator_components(G, D, batch, seeds), weights)

    return G, loss


class _KinkRecorder(TorchFunctionMode):
    """Records the sign pattern of every relu / leaky_relu / abs input."""

    KINKED = {"relu", "leaky_relu", "abs"}

    def __init__(self):
        super().__init__()
        self.signs = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        if getattr(func, "__name__", "") in self.KINKED:
            self.signs.append(torch.sign(args[0].detach()).to(torch.int8))
        return func(*args, **(kwargs or {}))


def _eval(loss):
    with _KinkRecorder() as rec:
        value = loss().item()
    return value, rec.signs


def _same_pattern(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def finite_difference_check(G, loss, n_params=50, h=1e-4, seed=0):
    """Analytic vs central-difference gradients for sampled scalar parameters.

    A central difference is only valid where the loss is smooth on
    [theta - h, theta + h]. Samples whose perturbation flips the sign of any
    relu, leaky_relu or abs input are redrawn. Returns (relative errors,
    number of redrawn samples).
    """
    params = [p for p in G.parameters() if p.requires_grad]
    G.zero_grad()
    loss().backward()
    analytic = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    _, base = _eval(loss)
    rng = np.random.default_rng(seed)
    order = rng.permutation(sizes.sum())
    errors, redrawn = [], 0
    with torch.no_grad():
        for fid in order:
            if len(errors) == n_params:
                break
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            idx = int(fid - offsets[k])
            view = params[k].view(-1)
            orig = view[idx].item()
            view[idx] = orig + h
            up, up_signs = _eval(loss)
            view[idx] = orig - h
            down, down_signs = _eval(loss)
            view[idx] = orig
            if not (_same_pattern(base, up_signs) and _same_pattern(base, down_signs)):
                redrawn += 1
                continue
            numeric = (up - down) / (2 * h)
            a = analytic[k].view(-1)[idx].item()
            errors.append(abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return np.array(errors), redrawn


def tiny_config(**kw):
    base = dict(
        iterations=60,
        batch_size=2,
        image_size=16,
        g_width=4,
        g_res_blocks=1,
        spade_hidden=4,
        d_width=4,
        d_stages=2,
        checkpoint_every=1000,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_trainer(config=None, out_dir=None, seed=0):
    gen = torch.Generator().manual_seed(seed)
    normals = torch.rand(6, 3, 16, 16, generator=gen) * 2 - 1
    defects = torch.rand(6, 3, 16, 16, generator=gen) * 2 - 1
    labels = torch.from_numpy(np.stack([one_hot(["crack", "spallation", "corrosion"][i % 3]) for i in range(6)]))
    return Trainer(config or tiny_config(), normals, defects, labels, out_dir)
