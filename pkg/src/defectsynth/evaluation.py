"""Frechet distance between embedded image sets, and corpus generation."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .controlmap import AttributeControlMap
from .datamodel import (
    CATEGORIES,
    DEFECT_CATEGORIES,
    DatasetError,
    DatasetManifest,
    SampleRecord,
    label_names,
    load_images,
    one_hot,
    save_image,
    write_index,
)
from .trainer import ConfigError, load_generator, to_numpy, to_tensor


class FIDError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise FIDError("Gaussian statistics need at least 2 samples")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8, rtol=0):
            raise FIDError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def merge(self, other: GaussianStats) -> GaussianStats:
        """Pooled statistics of two disjoint sample sets."""
        na, nb = self.count, other.count
        n = na + nb
        delta = other.mean - self.mean
        mean = self.mean + delta * nb / n
        scatter = self.cov * (na - 1) + other.cov * (nb - 1) + np.outer(delta, delta) * na * nb / n
        cov = scatter / (n - 1)
        return GaussianStats(mean, (cov + cov.T) / 2, n)


@dataclass(frozen=True)
class EmbeddingFunction:
    identifier: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        single = images.ndim == 3
        if single:
            images = images[None]
        out = np.asarray(self.fn(images), dtype=np.float64)
        if out.shape != (len(images), self.dim):
            raise FIDError(f"embedder {self.identifier} returned {out.shape}, expected (N, {self.dim})")
        return out[0] if single else out


def pixel_pca_embedder(reference: np.ndarray, k: int = 16) -> EmbeddingFunction:
    """Project flattened pixels onto the top-k principal axes of ``reference``."""
    ref = np.asarray(reference, dtype=np.float64).reshape(len(reference), -1)
    k = min(k, len(ref) - 1, ref.shape[1])
    if k < 1:
        raise FIDError("need at least 2 reference images for PCA")
    mu = ref.mean(axis=0)
    _, _, vt = np.linalg.svd(ref - mu, full_matrices=False)
    axes = vt[:k]
    # deterministic sign convention
    flip = np.sign(axes[np.arange(k), np.abs(axes).argmax(axis=1)])
    axes = axes * flip[:, None]
    shape = reference.shape[1:]

    def fn(images):
        if images.shape[1:] != shape:
            raise FIDError(f"pixel-PCA embedder fitted on {shape} images, got {images.shape[1:]}")
        return (images.reshape(len(images), -1) - mu) @ axes.T

    return EmbeddingFunction(f"pixel-pca-{k}", k, fn)


def torch_embedder(
    module: torch.nn.Module, identifier: str, dim: int, input_size: int, batch_size: int = 32
) -> EmbeddingFunction:
    """Wrap a pretrained feature extractor (e.g. an Inception pool layer)."""
    module.eval()

    def fn(images):
        feats = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x = to_tensor(images[i : i + batch_size]).float()
                x = F.interpolate(x, size=(input_size, input_size), mode="bilinear", align_corners=False)
                feats.append(module(x).reshape(len(x), -1).double().numpy())
        return np.concatenate(feats)

    return EmbeddingFunction(identifier, dim, fn)


def inception_embedder(weights: str = "DEFAULT") -> EmbeddingFunction:
    """Inception-v3 pool features; needs torchvision and downloadable weights."""
    from torchvision.models import inception_v3

    net = inception_v3(weights=weights, aux_logits=True, transform_input=False)
    net.fc = torch.nn.Identity()
    return torch_embedder(net, "inception-v3-pool", 2048, 299)


def compute_stats(images: np.ndarray, embed: EmbeddingFunction) -> GaussianStats:
    if len(images) < 2:
        raise FIDError(f"need at least 2 images, got {len(images)}")
    feats = embed(np.asarray(images))
    cov = np.cov(feats, rowvar=False, ddof=1).reshape(embed.dim, embed.dim)
    return GaussianStats(feats.mean(axis=0), (cov + cov.T) / 2, len(feats))


def _sqrtm_psd(mat: np.ndarray, tol: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise FIDError(f"matrix square root failed: eigenvalue {vals.min():.3e} is negative beyond tolerance")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats, tol: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace term uses the symmetric form sqrt(S_a)^T S_b sqrt(S_a),
    which has the same eigenvalues as S_a S_b.
    """
    if a.dim != b.dim:
        raise FIDError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = _sqrtm_psd(a.cov, tol)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise FIDError(f"matrix square root failed: eigenvalue {vals.min():.3e} is negative beyond tolerance")
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    fid = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_sqrt)
    return max(fid, 0.0)


def fid(real: np.ndarray, fake: np.ndarray, embed: EmbeddingFunction) -> float:
    return frechet_distance(compute_stats(real, embed), compute_stats(fake, embed))


def ideal_split_fid(
    images: np.ndarray,
    embed: EmbeddingFunction,
    seed: int = 0,
    split: tuple[Sequence[int], Sequence[int]] | None = None,
) -> float:
    """FID between two random halves of a real set: the score of a perfect synthesizer."""
    images = np.asarray(images)
    if len(images) < 4:
        raise FIDError(f"need at least 4 images for a split baseline, got {len(images)}")
    if split is None:
        perm = np.random.default_rng(seed).permutation(len(images))
        half = len(images) // 2
        split = (perm[:half], perm[half : 2 * half])
    first, second = (np.asarray(s) for s in split)
    return fid(images[first], images[second], embed)


# -- corpus generation -------------------------------------------------------

CategorySampler = Callable[[np.random.Generator], np.ndarray]


def fixed_category(name: str) -> CategorySampler:
    c = one_hot(name)
    return lambda rng: c.copy()


def uniform_defect_category(rng: np.random.Generator) -> np.ndarray:
    return one_hot(DEFECT_CATEGORIES[rng.integers(len(DEFECT_CATEGORIES))])


def empirical_labels(manifest: DatasetManifest) -> CategorySampler:
    """Sample label vectors of the manifest's defect records."""
    labels = np.stack([r.label for r in manifest.defects()])
    return lambda rng: labels[rng.integers(len(labels))].copy()


def _as_sampler(sampler) -> CategorySampler:
    if sampler is None:
        return uniform_defect_category
    if isinstance(sampler, str):
        return fixed_category(sampler)
    return sampler


def generate_corpus(
    checkpoint: str | Path,
    normal_manifest: DatasetManifest,
    count: int,
    out_dir: str | Path,
    category_sampler: CategorySampler | str | None = None,
    seed: int = 0,
    with_restorations: bool = False,
    control_map: AttributeControlMap | None = None,
    batch_size: int = 32,
) -> DatasetManifest:
    """Deface normal samples into ``count`` synthetic defect images.

    Writes ``images/synthetic/*.png`` (and ``images/restored/*.png`` when
    requested) plus ``index.csv`` with a source column.
    """
    G, config = load_generator(checkpoint)
    size = config.image_size
    pool = normal_manifest.normals()
    if not pool:
        raise DatasetError("normal pool is empty")
    if control_map is not None and control_map.shape[:2] != (size, size):
        raise ConfigError(f"control map is {control_map.shape[:2]}, checkpoint generates {size}x{size}")
    sampler = _as_sampler(category_sampler)
    out = Path(out_dir).resolve()
    rng = np.random.default_rng(seed)

    picks = rng.integers(0, len(pool), count)
    if control_map is None:
        labels = np.stack([sampler(rng) for _ in range(count)]) if count else np.zeros((0, len(CATEGORIES)))
    else:
        present = control_map.categories_present()
        if not present:
            raise ConfigError("control map requests no category")
        c = np.zeros(len(CATEGORIES), dtype=np.float32)
        c[present] = 1
        labels = np.repeat(c[None], count, axis=0)
    batch_seeds = rng.integers(0, 2**31 - 1, size=(max(1, -(-count // batch_size)), 2))

    cache: dict[int, np.ndarray] = {}
    synthetic, restored = [], []
    for bi, start in enumerate(range(0, count, batch_size)):
        idx = picks[start : start + batch_size]
        for j in set(idx.tolist()) - cache.keys():
            cache[j] = load_images([pool[j]], size)[0]
        n = to_tensor(np.stack([cache[j] for j in idx]))
        lab = torch.from_numpy(labels[start : start + batch_size].astype(np.float32))
        if control_map is None:
            A = lab[:, :, None, None].expand(-1, -1, size, size)
        else:
            A = control_map.to_tensor().expand(len(idx), -1, -1, -1)
        with torch.no_grad():
            d, _, _ = G.deface(n, A, int(batch_seeds[bi, 0]))
            n_hat = G.restore(d, int(batch_seeds[bi, 1]))[0] if with_restorations else None
        for k, img in enumerate(to_numpy(d)):
            i = start + k
            path = out / "images" / "synthetic" / f"{i:06d}.png"
            save_image(np.clip(img, -1, 1), path)
            synthetic.append(SampleRecord(path, labels[i].astype(np.float32), "synthetic"))
        if n_hat is not None:
            for k, img in enumerate(to_numpy(n_hat)):
                path = out / "images" / "restored" / f"{start + k:06d}.png"
                save_image(np.clip(img, -1, 1), path)
                restored.append(SampleRecord(path, one_hot("normal"), "restored"))

    records = synthetic + restored
    out.mkdir(parents=True, exist_ok=True)
    write_index(out, records)
    return DatasetManifest(records, "train", CATEGORIES, out)


def describe_labels(manifest: DatasetManifest) -> dict[str, int]:
    counts: dict[str, int] = {name: 0 for name in CATEGORIES}
    for r in manifest:
        for name in label_names(r.label):
            counts[name] += 1
    return counts
