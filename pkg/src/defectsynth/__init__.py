"""Defect synthesis by defacement and restoration, and inspection training on the result."""

__version__ = "0.1.0"

from .controlmap import AttributeControlMap, ControlRegionSpec, Region, paint_regions, repeat_label, restoration_map
from .datamodel import CATEGORIES, DatasetManifest, SampleRecord, ToyDefectSpec, load_manifest, make_toy_dataset
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig, compose
from .objectives import LossReport, LossWeights
from .trainer import TrainConfig, Trainer, desk_config, lr_schedule, paper_config, train

__all__ = [
    "AttributeControlMap",
    "CATEGORIES",
    "ControlRegionSpec",
    "DatasetManifest",
    "Discriminator",
    "DiscriminatorConfig",
    "Generator",
    "GeneratorConfig",
    "LossReport",
    "LossWeights",
    "Region",
    "SampleRecord",
    "ToyDefectSpec",
    "TrainConfig",
    "Trainer",
    "compose",
    "desk_config",
    "load_manifest",
    "lr_schedule",
    "make_toy_dataset",
    "paint_regions",
    "paper_config",
    "repeat_label",
    "restoration_map",
    "train",
]
