"""Image and label records, dataset indexes, patch cropping and the toy defect set."""

from __future__ import annotations

import csv
import logging
import warnings
import xml.etree.ElementTree as ET
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

log = logging.getLogger(__name__)

CATEGORIES: tuple[str, ...] = (
    "crack",
    "spallation",
    "efflorescence",
    "exposed bars",
    "corrosion",
    "normal",
)
NUM_CATEGORIES = len(CATEGORIES)
NORMAL_INDEX = CATEGORIES.index("normal")
DEFECT_CATEGORIES = CATEGORIES[:NORMAL_INDEX]

SOURCES = ("real", "synthetic", "restored")
SPLITS = ("train", "val", "test")

INDEX_FILE = "index.csv"


class DatasetError(ValueError):
    pass


def _canonical(name: str) -> str:
    return " ".join(name.strip().lower().replace("_", " ").replace("-", " ").split())


_ALIASES = {
    "exposedbars": "exposed bars",
    "corrosionstain": "corrosion",
    "corrosion stain": "corrosion",
    "background": "normal",
}


def category_index(name: str) -> int:
    key = _canonical(name)
    key = _ALIASES.get(key.replace(" ", ""), _ALIASES.get(key, key))
    try:
        return CATEGORIES.index(key)
    except ValueError:
        raise DatasetError(f"unknown category {name!r}") from None


def label_vector(names: Iterable[str] | str) -> np.ndarray:
    """Binary label vector in the fixed category order.

    A string is split on ``|`` (the index format) or ``,``.
    """
    if isinstance(names, str):
        sep = "|" if "|" in names else ","
        names = [p for p in names.split(sep) if p.strip()]
    c = np.zeros(NUM_CATEGORIES, dtype=np.float32)
    for name in names:
        c[category_index(name)] = 1.0
    validate_label(c)
    return c


def one_hot(category: str | int) -> np.ndarray:
    idx = category if isinstance(category, int) else category_index(category)
    c = np.zeros(NUM_CATEGORIES, dtype=np.float32)
    c[idx] = 1.0
    return c


def validate_label(c: np.ndarray) -> None:
    c = np.asarray(c)
    if c.shape != (NUM_CATEGORIES,):
        raise DatasetError(f"label vector must have length {NUM_CATEGORIES}, got {c.shape}")
    if not np.all((c == 0) | (c == 1)):
        raise DatasetError("label entries must be 0 or 1")
    if c.sum() == 0:
        raise DatasetError("label vector has no active category")
    if c[NORMAL_INDEX] == 1 and c[:NORMAL_INDEX].any():
        raise DatasetError("'normal' cannot be combined with defect categories")


def label_names(c: np.ndarray) -> list[str]:
    return [CATEGORIES[i] for i in np.flatnonzero(np.asarray(c) > 0.5)]


def is_normal(c: np.ndarray) -> bool:
    return bool(np.asarray(c)[NORMAL_INDEX] > 0.5)


# -- pixels -----------------------------------------------------------------


def normalize(raw: np.ndarray) -> np.ndarray:
    """Map 8-bit RGB values in [0, 255] to float32 in [-1, 1]."""
    return (np.asarray(raw, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def denormalize(patch: np.ndarray) -> np.ndarray:
    x = (np.asarray(patch, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def check_patch(patch: np.ndarray, size: int | None = None) -> np.ndarray:
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise DatasetError(f"expected an HxWx3 patch, got shape {patch.shape}")
    if size is not None and patch.shape[:2] != (size, size):
        raise DatasetError(f"expected {size}x{size} patch, got {patch.shape[:2]}")
    if not np.all(np.isfinite(patch)) or patch.min() < -1.0 or patch.max() > 1.0:
        raise DatasetError("patch values must be finite and within [-1, 1]")
    return patch


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Read an RGB image file as a normalized HxWx3 patch, optionally resized."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        patch = normalize(np.asarray(img))
    return check_patch(patch, size)


def save_image(patch: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(denormalize(patch)).save(path)


# -- records ----------------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    path: Path
    label: np.ndarray = field(compare=False)
    source: str = "real"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DatasetError(f"source must be one of {SOURCES}, got {self.source!r}")
        validate_label(self.label)

    @property
    def normal(self) -> bool:
        return is_normal(self.label)


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    split: str = "train"
    categories: tuple[str, ...] = CATEGORIES
    root: Path | None = None
    skipped: int = 0

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"split must be one of {SPLITS}, got {self.split!r}")
        if len(self.categories) != NUM_CATEGORIES:
            raise DatasetError(f"category list must have {NUM_CATEGORIES} entries")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def labels(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, NUM_CATEGORIES), dtype=np.float32)
        return np.stack([r.label for r in self.records])

    def normals(self) -> list[SampleRecord]:
        return [r for r in self.records if r.normal]

    def defects(self) -> list[SampleRecord]:
        return [r for r in self.records if not r.normal]

    def by_source(self, source: str) -> list[SampleRecord]:
        return [r for r in self.records if r.source == source]


def load_images(records: Sequence[SampleRecord], size: int) -> np.ndarray:
    """Stack records into an (N, H, W, 3) float32 array."""
    if not records:
        return np.zeros((0, size, size, 3), dtype=np.float32)
    return np.stack([load_image(r.path, size) for r in records])


def load_manifest(root: str | Path, split: str = "train") -> DatasetManifest:
    """Read ``<root>/index.csv``.

    Columns are ``relative_path,labels`` with optional ``source`` and
    ``split`` columns. Without a ``split`` column every row belongs to the
    requested split. Malformed rows are skipped and counted.
    """
    root = Path(root)
    index = root / INDEX_FILE
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if not index.is_file():
        raise FileNotFoundError(f"no {INDEX_FILE} in {root}")

    records: list[SampleRecord] = []
    problems: list[str] = []
    with open(index, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"relative_path", "labels"} <= set(reader.fieldnames):
            raise DatasetError(f"{index}: header must contain relative_path,labels")
        for lineno, row in enumerate(reader, start=2):
            if row.get("split") and row["split"].strip() != split:
                continue
            try:
                rel = (row.get("relative_path") or "").strip()
                if not rel:
                    raise DatasetError("empty path")
                path = (root / rel).resolve()
                if not path.is_file():
                    raise DatasetError(f"missing image {rel}")
                label = label_vector(row.get("labels") or "")
                source = (row.get("source") or "real").strip() or "real"
                records.append(SampleRecord(path, label, source))
            except DatasetError as exc:
                problems.append(f"line {lineno}: {exc}")
    if problems:
        msg = f"{index}: skipped {len(problems)} malformed row(s): " + "; ".join(problems[:5])
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)
    return DatasetManifest(records, split, CATEGORIES, root, skipped=len(problems))


def write_index(
    root: str | Path,
    records: Sequence[SampleRecord],
    splits: Sequence[str] | None = None,
) -> Path:
    """Write ``index.csv`` for records stored under ``root``."""
    root = Path(root).resolve()
    path = root / INDEX_FILE
    fields = ["relative_path", "labels", "source"] + (["split"] if splits is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for i, rec in enumerate(records):
            row = [
                Path(rec.path).resolve().relative_to(root).as_posix(),
                "|".join(label_names(rec.label)),
                rec.source,
            ]
            if splits is not None:
                row.append(splits[i])
            writer.writerow(row)
    return path


def codebrim_to_index(root: str | Path, xml_files: Sequence[str | Path], image_dirs: Sequence[str | Path]) -> Path:
    """Build ``index.csv`` from CODEBRIM-style XML metadata.

    Each XML element carrying a ``name`` attribute is read as one image;
    its children are category tags holding 0/1. Images are looked up by
    file name in ``image_dirs`` (relative to ``root``).
    """
    root = Path(root).resolve()
    lookup: dict[str, Path] = {}
    for d in image_dirs:
        for p in (root / d).rglob("*"):
            if p.suffix.lower() in {".png", ".jpg", ".jpeg"}:
                lookup.setdefault(p.name, p)
    records = []
    for xml_file in xml_files:
        tree = ET.parse(root / xml_file)
        for elem in tree.iter():
            name = elem.get("name")
            if name is None or name not in lookup:
                continue
            active = [child.tag for child in elem if (child.text or "").strip() == "1"]
            try:
                label = label_vector(active) if active else one_hot("normal")
            except DatasetError as exc:
                log.warning("skipping %s: %s", name, exc)
                continue
            records.append(SampleRecord(lookup[name], label))
    return write_index(root, records)


def crop_normal_patches(
    full_image: np.ndarray,
    patch_size: int,
    count: int,
    seed: int,
    name: str = "image",
) -> list[np.ndarray]:
    """Uniformly random square crops from a larger image."""
    h, w = full_image.shape[:2]
    if h < patch_size or w < patch_size:
        raise DatasetError(f"{name} is {h}x{w}, smaller than patch size {patch_size}")
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h - patch_size + 1, size=count)
    xs = rng.integers(0, w - patch_size + 1, size=count)
    return [full_image[y : y + patch_size, x : x + patch_size].copy() for y, x in zip(ys, xs)]


# -- toy defect dataset ------------------------------------------------------


@dataclass
class ToyDefectSpec:
    image_size: int = 32
    samples_per_class: int = 50
    seed: int = 0
    noise_octaves: int = 3
    base_colors: tuple[tuple[int, int, int], ...] = ((150, 148, 140), (128, 124, 118), (170, 165, 150))
    texture_strength: float = 22.0
    crack_count: tuple[int, int] = (1, 2)
    crack_width: int = 1
    blob_radius: tuple[float, float] = (0.12, 0.22)
    patch_brightness: float = 70.0
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.image_size < 16:
            raise DatasetError("image_size must be >= 16")
        if self.samples_per_class < 1:
            raise DatasetError("samples_per_class must be >= 1")
        if not 0 <= self.val_fraction + self.test_fraction < 1:
            raise DatasetError("val_fraction + test_fraction must be in [0, 1)")


def _clamped_params(spec: ToyDefectSpec) -> dict:
    size = spec.image_size
    max_width = max(1, size // 8)
    width = spec.crack_width
    if width > max_width or width < 1:
        warnings.warn(f"crack_width {width} clamped to [1, {max_width}] for {size}px images", stacklevel=3)
        width = min(max(width, 1), max_width)
    lo, hi = spec.blob_radius
    if hi > 0.3 or lo <= 0 or lo > hi:
        warnings.warn(f"blob_radius {spec.blob_radius} clamped into (0, 0.3]", stacklevel=3)
        hi = min(max(hi, 0.05), 0.3)
        lo = min(max(lo, 0.02), hi)
    return {"crack_width": width, "blob_radius": (lo, hi)}


def _texture(rng: np.random.Generator, spec: ToyDefectSpec) -> np.ndarray:
    size = spec.image_size
    base = np.asarray(spec.base_colors[rng.integers(len(spec.base_colors))], dtype=np.float64)
    field_ = np.zeros((size, size))
    for octave in range(spec.noise_octaves):
        cells = 2 ** (octave + 2)
        coarse = rng.standard_normal((cells, cells)).astype(np.float32)
        up = Image.fromarray(coarse).resize((size, size), Image.BICUBIC)
        field_ += np.asarray(up, dtype=np.float64) / 2**octave
    field_ /= np.abs(field_).max() + 1e-8
    grain = rng.standard_normal((size, size)) * 0.25
    tint = rng.uniform(0.9, 1.1, size=3)
    img = base * tint + spec.texture_strength * (field_ + grain)[..., None]
    return img


def _blob_mask(rng, size, radius_frac) -> np.ndarray:
    r = rng.uniform(*radius_frac) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    n = 14
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = r * rng.uniform(0.6, 1.2, n)
    pts = [(cx + rr * np.cos(a), cy + rr * np.sin(a)) for a, rr in zip(angles, radii)]
    m = Image.new("L", (size, size), 0)
    ImageDraw.Draw(m).polygon(pts, fill=255)
    return np.asarray(m) > 0


def _render_defect(category: str, rng: np.random.Generator, spec: ToyDefectSpec, params: dict):
    """Draw one category's marks; returns (rgb delta, alpha mask)."""
    size = spec.image_size
    color = np.zeros(3)
    mask_img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask_img)
    if category == "crack":
        for _ in range(rng.integers(spec.crack_count[0], spec.crack_count[1] + 1)):
            pts = [tuple(rng.uniform(0.15, 0.85, 2) * size)]
            heading = rng.uniform(0, 2 * np.pi)
            for _ in range(6):
                heading += rng.normal(0, 0.5)
                step = size * 0.09
                x = float(np.clip(pts[-1][0] + step * np.cos(heading), 0, size - 1))
                y = float(np.clip(pts[-1][1] + step * np.sin(heading), 0, size - 1))
                pts.append((x, y))
            draw.line(pts, fill=255, width=params["crack_width"])
        mask = np.asarray(mask_img) > 0
        color[:] = (25, 22, 20)
    elif category == "exposed bars":
        horizontal = rng.random() < 0.5
        gap = max(3, size // 6)
        start = rng.uniform(0.2, 0.5) * size
        length = rng.uniform(0.4, 0.7) * size
        offset = rng.uniform(0.1, 0.9 - length / size) * size
        bar_w = max(2, size // 14)
        for k in range(2):
            pos = start + k * gap
            box = (
                (offset, pos, offset + length, pos + bar_w)
                if horizontal
                else (pos, offset, pos + bar_w, offset + length)
            )
            draw.rectangle(box, fill=255)
        mask = np.asarray(mask_img) > 0
        color[:] = (95, 55, 35)
    else:
        mask = _blob_mask(rng, size, params["blob_radius"])
        color[:] = {
            "spallation": (70, 70, 78),
            "efflorescence": (235, 235, 228),
            "corrosion": (160, 80, 30),
        }[category]
    return color, mask


def make_toy_dataset(spec: ToyDefectSpec, out_dir: str | Path) -> DatasetManifest:
    """Render a small procedural defect dataset on disk.

    Layout: ``images/<class>/<seed>_<i>.png``, ``masks/<class>/<seed>_<i>.png``
    (diagnostic only) and ``index.csv`` with a ``split`` column. Returns the
    manifest of every rendered sample (split column ignored).
    """
    spec.validate()
    params = _clamped_params(spec)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    records, splits = [], []
    n_val = int(round(spec.samples_per_class * spec.val_fraction))
    n_test = int(round(spec.samples_per_class * spec.test_fraction))
    for category in CATEGORIES:
        slug = category.replace(" ", "_")
        for i in range(spec.samples_per_class):
            img = _texture(rng, spec)
            mask = np.zeros((size, size), dtype=bool)
            if category != "normal":
                color, mask = _render_defect(category, rng, spec, params)
                mark_noise = rng.normal(0, 10, size=(size, size, 1))
                alpha = mask[..., None] * rng.uniform(0.75, 0.95)
                img = img * (1 - alpha) + (color + mark_noise) * alpha
            pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            name = f"{spec.seed}_{i}.png"
            img_path = out / "images" / slug / name
            mask_path = out / "masks" / slug / name
            img_path.parent.mkdir(parents=True, exist_ok=True)
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(pixels).save(img_path)
            Image.fromarray((mask * 255).astype(np.uint8)).save(mask_path)
            records.append(SampleRecord(img_path.resolve(), one_hot(category), "real"))
            if i < n_val:
                splits.append("val")
            elif i < n_val + n_test:
                splits.append("test")
            else:
                splits.append("train")
    write_index(out, records, splits)
    return DatasetManifest(records, "train", CATEGORIES, out.resolve())
