"""Attribute control maps: where and which defect categories to synthesize."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datamodel import CATEGORIES, NORMAL_INDEX, NUM_CATEGORIES, DatasetError, category_index, one_hot, validate_label

UNIFORM = "uniform"
SPATIAL = "spatial"
_QMAX = 65535


class ControlMapError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeControlMap:
    """H x W x C conditioning array with values in [0, 1]."""

    values: np.ndarray
    mode: str = SPATIAL

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ControlMapError(f"control map must be HxWxC, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ControlMapError("control map values must lie in [0, 1]")
        if self.mode not in (UNIFORM, SPATIAL):
            raise ControlMapError(f"unknown mode {self.mode!r}")
        if self.mode == UNIFORM and not is_uniform(v):
            raise ControlMapError("uniform control map varies across positions")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def categories_present(self) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.values.reshape(-1, self.shape[2]).max(axis=0) > 0)]

    def to_tensor(self) -> torch.Tensor:
        """(1, C, H, W) tensor for the generator."""
        return torch.from_numpy(np.ascontiguousarray(self.values.transpose(2, 0, 1)))[None]


def is_uniform(values: np.ndarray) -> bool:
    v = np.asarray(values)
    flat = v.reshape(-1, v.shape[-1])
    return bool(np.all(flat.max(axis=0) == flat.min(axis=0)))


def repeat_label(c: np.ndarray, height: int, width: int) -> AttributeControlMap:
    c = np.asarray(c, dtype=np.float32)
    validate_label(c)
    values = np.broadcast_to(c, (height, width, c.shape[0])).copy()
    return AttributeControlMap(values, UNIFORM)


def restoration_map(height: int, width: int) -> AttributeControlMap:
    """Restoration is conditioned as the 'normal' category."""
    return repeat_label(one_hot(NORMAL_INDEX), height, width)


def label_maps(labels: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Batched repeat_label: (B, C) labels -> (B, C, H, W) uniform maps."""
    return labels[:, :, None, None].expand(-1, -1, height, width).contiguous()


def assert_uniform(maps: torch.Tensor) -> None:
    flat = maps.flatten(2)
    if not torch.equal(flat.amax(dim=2), flat.amin(dim=2)):
        raise ControlMapError("training control maps must be spatially uniform")


@dataclass(frozen=True)
class Region:
    category: int | str  # index or category name
    box: tuple[int, int, int, int] | None = None
    mask: np.ndarray | None = None
    intensity: float = 1.0

    def __post_init__(self):
        if isinstance(self.category, str):
            try:
                index = category_index(self.category)
            except DatasetError as exc:
                raise ControlMapError(str(exc)) from None
            object.__setattr__(self, "category", index)


@dataclass
class ControlRegionSpec:
    regions: Sequence[Region]

    @classmethod
    def from_boxes(cls, boxes: Sequence[str]) -> ControlRegionSpec:
        """Parse ``category:x0,y0,x1,y1`` strings (x1, y1 exclusive)."""
        regions = []
        for text in boxes:
            try:
                name, coords = text.rsplit(":", 1)
                x0, y0, x1, y1 = (int(v) for v in coords.split(","))
            except ValueError:
                raise ControlMapError(f"bad box {text!r}; expected category:x0,y0,x1,y1") from None
            regions.append(Region(category_index(name), (x0, y0, x1, y1)))
        return cls(regions)


def _check_region(r: Region, height: int, width: int) -> None:
    if not 0 <= r.category < NUM_CATEGORIES:
        raise ControlMapError(f"category index {r.category} out of range")
    if not 0 < r.intensity <= 1:
        raise ControlMapError(f"intensity {r.intensity} not in (0, 1]")
    if (r.box is None) == (r.mask is None):
        raise ControlMapError("a region needs exactly one of box or mask")
    if r.box is not None:
        x0, y0, x1, y1 = r.box
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ControlMapError(f"box {r.box} outside {width}x{height} image")
    elif np.asarray(r.mask).shape != (height, width):
        raise ControlMapError(f"mask shape {np.asarray(r.mask).shape} != {(height, width)}")


def paint_regions(spec: ControlRegionSpec, height: int, width: int) -> AttributeControlMap:
    """Rasterize regions; overlaps within a channel combine by max."""
    for r in spec.regions:
        _check_region(r, height, width)
    values = np.zeros((height, width, NUM_CATEGORIES), dtype=np.float32)
    for r in spec.regions:
        layer = np.zeros((height, width), dtype=np.float32)
        if r.box is not None:
            x0, y0, x1, y1 = r.box
            layer[y0:y1, x0:x1] = r.intensity
        else:
            layer[np.asarray(r.mask, dtype=bool)] = r.intensity
        np.maximum(values[..., r.category], layer, out=values[..., r.category])
    return AttributeControlMap(values, SPATIAL)


# -- archive format ------------------------------------------------------------


def _quantize(channel: np.ndarray) -> np.ndarray:
    return np.rint(channel * _QMAX).astype(np.uint16)


def serialize(A: AttributeControlMap, path: str | Path) -> Path:
    """Zip of ``manifest.json`` plus one 16-bit PNG per channel."""
    h, w, c = A.shape
    path = Path(path)
    manifest = {
        "height": h,
        "width": w,
        "categories": list(CATEGORIES[:c]),
        "mode": A.mode,
        "channels": [],
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for k in range(c):
            q = _quantize(A.values[..., k])
            buf = io.BytesIO()
            Image.fromarray(q).save(buf, format="PNG")
            name = f"channel_{k:02d}.png"
            zf.writestr(name, buf.getvalue())
            manifest["channels"].append({"file": name, "sha256": hashlib.sha256(q.tobytes()).hexdigest()})
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
    return path


def parse(path: str | Path) -> AttributeControlMap:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            h, w = int(manifest["height"]), int(manifest["width"])
            channels = manifest["channels"]
            if len(channels) != len(manifest["categories"]):
                raise ControlMapError("channel count does not match category list")
            planes = []
            for entry in channels:
                with Image.open(io.BytesIO(zf.read(entry["file"]))) as img:
                    q = np.asarray(img).astype(np.uint16)
                if q.shape != (h, w):
                    raise ControlMapError(f"{entry['file']}: shape {q.shape} != {(h, w)}")
                if hashlib.sha256(q.tobytes()).hexdigest() != entry["sha256"]:
                    raise ControlMapError(f"{entry['file']}: checksum mismatch")
                planes.append(q.astype(np.float32) / _QMAX)
    except ControlMapError:
        raise
    except (zipfile.BadZipFile, KeyError, OSError, ValueError, EOFError) as exc:
        raise ControlMapError(f"{path}: shape mismatch or corrupt control map archive ({exc})") from exc
    return AttributeControlMap(np.stack(planes, axis=-1), manifest["mode"])
