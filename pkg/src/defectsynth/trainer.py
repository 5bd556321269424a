"""Two-cycle adversarial training with a 5:1 critic/generator schedule."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor

from .controlmap import assert_uniform, label_maps
from .datamodel import CATEGORIES, NORMAL_INDEX, NUM_CATEGORIES, DatasetManifest, load_images
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig
from .objectives import (
    LossReport,
    LossWeights,
    NonFiniteLoss,
    classification_loss,
    combine_d,
    combine_g,
    gradient_penalty,
    reconstruction_loss,
    sd_cycle_loss,
    sd_region_loss,
    total_losses,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_FILE = "train_log.jsonl"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 500_000
    batch_size: int = 4
    n_critic: int = 5
    beta1: float = 0.5
    beta2: float = 0.999
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    image_size: int = 128
    seed: int = 0
    # ablation switches
    scc: bool = True
    ani: bool = True
    lwc: bool = True
    sc: bool = True
    checkpoint_every: int = 10_000
    # network sizes
    g_width: int = 64
    g_res_blocks: int = 6
    spade_hidden: int = 64
    d_width: int = 64
    d_stages: int = 6
    # loss weights
    lambda_cls_r: float = 2.0
    lambda_cls_f: float = 5.0
    lambda_rec: float = 5.0
    lambda_sd_cyc: float = 5.0
    lambda_sd_con: float = 1.0
    lambda_gp: float = 10.0

    def validate(self) -> None:
        if self.n_critic < 1:
            raise ConfigError(f"n_critic must be >= 1 (got {self.n_critic})")
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be > 0 (got {self.iterations})")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1 (got {self.batch_size})")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError(f"need 0 < lr_end <= lr_start (got {self.lr_end}, {self.lr_start})")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        for cfg in (self.generator_config(), self.discriminator_config()):
            try:
                cfg.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        try:
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            image_size=self.image_size,
            base_width=self.g_width,
            n_res_blocks=self.g_res_blocks,
            spade_hidden=self.spade_hidden,
            noise=self.ani,
            spade=self.scc,
            composition=self.lwc,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(image_size=self.image_size, n_stages=self.d_stages, base_width=self.d_width)

    def loss_weights(self) -> LossWeights:
        w = LossWeights(
            cls_r=self.lambda_cls_r,
            cls_f=self.lambda_cls_f,
            rec=self.lambda_rec,
            sd_cyc=self.lambda_sd_cyc,
            sd_con=self.lambda_sd_con,
            gp=self.lambda_gp,
        )
        if not (self.lwc and self.sc):
            w = replace(w, sd_cyc=0.0, sd_con=0.0)
        return w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def paper_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)


def desk_config(**overrides) -> TrainConfig:
    """Width-reduced 32x32 preset that trains on one CPU in minutes."""
    base = TrainConfig(
        iterations=2000,
        batch_size=8,
        image_size=32,
        checkpoint_every=1000,
        g_width=16,
        g_res_blocks=3,
        spade_hidden=32,
        d_width=32,
        d_stages=4,
    )
    return replace(base, **overrides)


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Linear decay from lr_start at update 0 to lr_end at the final update."""
    last = max(config.iterations - 1, 1)
    t = min(max(iteration / last, 0.0), 1.0)
    return (1 - t) * config.lr_start + t * config.lr_end


def is_generator_step(iteration: int, n_critic: int) -> bool:
    return (iteration + 1) % (n_critic + 1) == 0


class CycleBatch(NamedTuple):
    normal: Tensor  # (B, 3, H, W) real normal samples
    defect: Tensor  # (B, 3, H, W) real defect samples
    defect_labels: Tensor  # (B, C) their labels c'
    target_labels: Tensor  # (B, C) defacement targets c for the normal cycle


class StepSeeds(NamedTuple):
    deface: int
    restore: int
    restore_real: int
    redeface: int
    gp: int


def _normal_labels(like: Tensor) -> Tensor:
    c = torch.zeros(like.shape[0], NUM_CATEGORIES, dtype=like.dtype, device=like.device)
    c[:, NORMAL_INDEX] = 1
    return c


def _maps(labels: Tensor, images: Tensor) -> Tensor:
    A = label_maps(labels.to(images.dtype), images.shape[-2], images.shape[-1])
    assert_uniform(A)
    return A


def critic_components(G: Generator, D: Discriminator, batch: CycleBatch, seeds: StepSeeds) -> dict[str, Tensor]:
    """Critic terms over both directions (fake defects and fake restorations).

    Reals, fakes and interpolates each go through D in one concatenated
    batch; with equal halves the means equal the average of the two
    directions.
    """
    n, d_real = batch.normal, batch.defect
    with torch.no_grad():
        d_fake, _, _ = G.deface(n, _maps(batch.target_labels, n), seeds.deface)
        n_fake, _, _ = G.restore(d_real, seeds.restore_real)
    real = torch.cat([d_real, n])
    fake = torch.cat([d_fake, n_fake])
    real_out = D(real)
    fake_src = D(fake).src_map
    adv_d = fake_src.reshape(len(fake), -1).mean(1).mean() - real_out.src_map.reshape(len(real), -1).mean(1).mean()
    gp = gradient_penalty(D, real, fake, seeds.gp)
    k = len(d_real)
    cls_r = 0.5 * (
        classification_loss(real_out.cls_logits[:k], batch.defect_labels)
        + classification_loss(real_out.cls_logits[k:], _normal_labels(n))
    )
    return {"adv_d": adv_d, "gp": gp, "cls_r": cls_r}


def generator_components(
    G: Generator,
    D: Discriminator,
    batch: CycleBatch,
    seeds: StepSeeds,
    spatial_terms: bool = True,
) -> dict[str, Tensor]:
    """Runs n -> d -> n_hat and d -> n' -> d_hat; terms averaged over both cycles."""
    n, d_real = batch.normal, batch.defect
    # normal cycle
    d, _, m_d = G.deface(n, _maps(batch.target_labels, n), seeds.deface)
    n_hat, _, m_n_hat = G.restore(d, seeds.restore)
    # defect cycle, re-defaced with the real sample's own label
    n_res, _, m_res = G.restore(d_real, seeds.restore_real)
    d_hat, _, m_d_hat = G.deface(n_res, _maps(batch.defect_labels, d_real), seeds.redeface)

    fakes = torch.cat([d, n_res])
    targets = torch.cat([batch.target_labels, _normal_labels(n_res)]).to(fakes.dtype)
    k = n.shape[0]
    out = D(fakes)
    src = out.src_map.reshape(fakes.shape[0], -1).mean(dim=1)
    adv_g = 0.5 * (-src[:k].mean() - src[k:].mean())
    cls_f = 0.5 * (
        classification_loss(out.cls_logits[:k], targets[:k]) + classification_loss(out.cls_logits[k:], targets[k:])
    )
    comps = {
        "adv_g": adv_g,
        "cls_f": cls_f,
        "rec": 0.5 * (reconstruction_loss(n, n_hat) + reconstruction_loss(d_real, d_hat)),
    }
    if spatial_terms:
        comps["sd_cyc"] = 0.5 * (sd_cycle_loss(m_d, m_n_hat) + sd_cycle_loss(m_res, m_d_hat))
        comps["sd_con"] = 0.5 * (sd_region_loss(m_d, m_n_hat) + sd_region_loss(m_res, m_d_hat))
    else:
        zero = adv_g.new_zeros(())
        comps["sd_cyc"] = comps["sd_con"] = zero
    return comps


def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Holds both networks, both optimizers and the update counter.

    Every random draw of update ``i`` is derived from ``(seed, i)``, so a run
    resumed from a checkpoint replays exactly what an uninterrupted run does.
    """

    def __init__(
        self,
        config: TrainConfig,
        normal_images: Tensor,
        defect_images: Tensor,
        defect_labels: Tensor,
        out_dir: str | Path | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        config.validate()
        if len(normal_images) == 0 or len(defect_images) == 0:
            raise ConfigError("training needs both normal and defect samples")
        if len(defect_images) != len(defect_labels):
            raise ConfigError("defect images and labels differ in length")
        self.config = config
        self.weights = config.loss_weights()
        self.normal_images = normal_images.to(dtype)
        self.defect_images = defect_images.to(dtype)
        self.defect_labels = defect_labels.to(dtype)
        torch.manual_seed(config.seed)
        self.G = Generator(config.generator_config()).to(dtype)
        self.D = Discriminator(config.discriminator_config()).to(dtype)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=config.lr_start, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=config.lr_start, betas=betas)
        self.iteration = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- sampling ---------------------------------------------------------

    def _rng(self, iteration: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, iteration])

    def sample(self, iteration: int) -> tuple[CycleBatch, StepSeeds]:
        rng = self._rng(iteration)
        b = self.config.batch_size
        ni = torch.from_numpy(rng.integers(0, len(self.normal_images), b))
        di = torch.from_numpy(rng.integers(0, len(self.defect_images), b))
        # defacement targets follow the empirical defect label distribution
        ti = torch.from_numpy(rng.integers(0, len(self.defect_labels), b))
        batch = CycleBatch(
            self.normal_images[ni], self.defect_images[di], self.defect_labels[di], self.defect_labels[ti]
        )
        seeds = StepSeeds(*(int(s) for s in rng.integers(0, 2**31 - 1, len(StepSeeds._fields))))
        return batch, seeds

    # -- updates ----------------------------------------------------------

    def _report(self, comps: dict, kind: str) -> LossReport:
        try:
            return total_losses(comps, self.weights)
        except NonFiniteLoss as exc:
            self._dump_divergence(comps, kind, exc)
            raise

    def _dump_divergence(self, comps, kind, exc):
        if self.out_dir is None:
            return
        dump = {
            "iteration": self.iteration,
            "step": kind,
            "error": str(exc),
            "components": {k: float(v.detach()) if isinstance(v, Tensor) else v for k, v in comps.items()},
        }
        path = self.out_dir / f"divergence_{self.iteration}.json"
        path.write_text(json.dumps(dump, indent=2))
        log.error("non-finite loss at update %d; diagnostics in %s", self.iteration, path)

    def train_step_d(self, batch: CycleBatch, seeds: StepSeeds, lr: float | None = None) -> LossReport:
        self.G.train()
        self.D.train()
        comps = critic_components(self.G, self.D, batch, seeds)
        report = self._report(comps, "d")
        if lr is not None:
            for group in self.opt_d.param_groups:
                group["lr"] = lr
        self.opt_d.zero_grad(set_to_none=True)
        combine_d(comps, self.weights).backward()
        self.opt_d.step()
        return report

    def train_step_g(self, batch: CycleBatch, seeds: StepSeeds, lr: float | None = None) -> LossReport:
        self.G.train()
        self.D.train()
        self.D.requires_grad_(False)
        try:
            comps = generator_components(self.G, self.D, batch, seeds, spatial_terms=self.config.lwc and self.config.sc)
            report = self._report(comps, "g")
            if lr is not None:
                for group in self.opt_g.param_groups:
                    group["lr"] = lr
            self.opt_g.zero_grad(set_to_none=True)
            combine_g(comps, self.weights).backward()
            self.opt_g.step()
        finally:
            self.D.requires_grad_(True)
        return report

    def step(self) -> tuple[str, LossReport]:
        """Run the next scheduled update and append it to the log."""
        it = self.iteration
        batch, seeds = self.sample(it)
        lr = lr_schedule(it, self.config)
        if is_generator_step(it, self.config.n_critic):
            kind, report = "g", self.train_step_g(batch, seeds, lr)
        else:
            kind, report = "d", self.train_step_d(batch, seeds, lr)
        self.iteration += 1
        if self.out_dir is not None:
            entry = {"iteration": it, "step": kind, "lr": lr, **report.to_dict()}
            with open(self.out_dir / LOG_FILE, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        return kind, report

    def train(self, n_updates: int | None = None, callback: Callable[[int, str, LossReport], None] | None = None):
        """Run ``n_updates`` more updates (default: until ``config.iterations``)."""
        stop = self.config.iterations if n_updates is None else min(self.iteration + n_updates, self.config.iterations)
        t0 = time.perf_counter()
        while self.iteration < stop:
            kind, report = self.step()
            if callback is not None:
                callback(self.iteration - 1, kind, report)
            if self.out_dir is not None and self.iteration % self.config.checkpoint_every == 0:
                self.save_checkpoint()
            if self.iteration % 500 == 0:
                log.info("update %d/%d (%.1fs)", self.iteration, self.config.iterations, time.perf_counter() - t0)
        if self.out_dir is not None and self.iteration == self.config.iterations:
            self.save_checkpoint()
        return self

    # -- checkpoints ------------------------------------------------------

    def save_checkpoint(self, path: str | Path | None = None) -> Path:
        if path is None:
            if self.out_dir is None:
                raise ValueError("no checkpoint path and no output directory")
            path = self.out_dir / f"ckpt_{self.iteration}"
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        torch.save(self.G.state_dict(), path / "generator.pt")
        torch.save(self.D.state_dict(), path / "discriminator.pt")
        torch.save(self.opt_g.state_dict(), path / "optim_g.pt")
        torch.save(self.opt_d.state_dict(), path / "optim_d.pt")
        manifest = {
            "format_version": FORMAT_VERSION,
            "iteration": self.iteration,
            "seed": self.config.seed,
            "categories": list(CATEGORIES),
            "config": self.config.to_dict(),
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return path

    def load_state(self, path: str | Path) -> None:
        path = Path(path)
        manifest = read_checkpoint_manifest(path)
        self.G.load_state_dict(torch.load(path / "generator.pt"))
        self.D.load_state_dict(torch.load(path / "discriminator.pt"))
        self.opt_g.load_state_dict(torch.load(path / "optim_g.pt"))
        self.opt_d.load_state_dict(torch.load(path / "optim_d.pt"))
        self.iteration = int(manifest["iteration"])
        if self.out_dir is not None:
            _truncate_log(self.out_dir / LOG_FILE, self.iteration)


def _truncate_log(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["iteration"] < iteration]
    path.write_text("".join(line + "\n" for line in keep))


def read_checkpoint_manifest(path: str | Path) -> dict:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{path} is not a checkpoint (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    if list(manifest.get("categories", [])) != list(CATEGORIES):
        raise ConfigError("checkpoint category list does not match this build")
    return manifest


def load_generator(path: str | Path) -> tuple[Generator, TrainConfig]:
    manifest = read_checkpoint_manifest(path)
    config = TrainConfig.from_dict(manifest["config"])
    G = Generator(config.generator_config())
    G.load_state_dict(torch.load(Path(path) / "generator.pt"))
    G.eval()
    return G, config


def latest_checkpoint(out_dir: str | Path) -> Path:
    ckpts = sorted(Path(out_dir).glob("ckpt_*"), key=lambda p: int(p.name.split("_")[1]))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {out_dir}")
    return ckpts[-1]


def to_tensor(images: np.ndarray) -> Tensor:
    """(N, H, W, 3) array -> (N, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def to_numpy(images: Tensor) -> np.ndarray:
    return images.detach().cpu().permute(0, 2, 3, 1).numpy()


def build_trainer(config: TrainConfig, manifest: DatasetManifest, out_dir: str | Path | None = None) -> Trainer:
    normals, defects = manifest.normals(), manifest.defects()
    if not normals or not defects:
        raise ConfigError(f"dataset needs normal and defect samples (got {len(normals)} normal, {len(defects)} defect)")
    return Trainer(
        config,
        to_tensor(load_images(normals, config.image_size)),
        to_tensor(load_images(defects, config.image_size)),
        torch.from_numpy(np.stack([r.label for r in defects])),
        out_dir,
    )


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    resume: str | Path | None = None,
    callback=None,
) -> Trainer:
    """Train from a manifest, writing checkpoints and ``train_log.jsonl`` to ``out_dir``."""
    trainer = build_trainer(config, manifest, out_dir)
    if resume is not None:
        trainer.load_state(resume)
    return trainer.train(callback=callback)
