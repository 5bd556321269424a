"""Multi-label defect classifier with a gradient-reversed source classifier."""

from __future__ import annotations

import copy
import logging
import math
import warnings
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .datamodel import NUM_CATEGORIES, DatasetError, DatasetManifest, SampleRecord, load_images
from .trainer import to_tensor

log = logging.getLogger(__name__)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coeff, None


def grl(x: Tensor, coeff: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-coeff``."""
    return _GradReverse.apply(x, float(coeff))


class GradientReversal(nn.Module):
    def __init__(self, coeff: float = 1.0):
        super().__init__()
        self.coeff = coeff

    def forward(self, x):
        return grl(x, self.coeff)


# -- backbones ---------------------------------------------------------------


class SmallCNN(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        layers, cin = [], 3
        for cout in (width, 2 * width, 4 * width):
            layers += [
                nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)


def _torchvision_backbone(name: str) -> nn.Module:
    import torchvision.models as tvm

    net = getattr(tvm, name)(weights=None)
    if hasattr(net, "fc"):
        dim = net.fc.in_features
        net.fc = nn.Identity()
    else:
        dim = net.classifier.in_features
        net.classifier = nn.Identity()
    net.out_dim = dim
    return net


BACKBONES: dict[str, Callable[[], nn.Module]] = {
    "small-cnn": SmallCNN,
    "resnet34": lambda: _torchvision_backbone("resnet34"),
    "densenet121": lambda: _torchvision_backbone("densenet121"),
}


def _ramp(progress: float) -> float:
    # 2 / (1 + exp(-10 p)) - 1: 0 at the start, ~1 after half of training
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


GRL_SCHEDULES: dict[str, Callable[[float], float]] = {"constant": lambda progress: 1.0, "ramp": _ramp}


def grl_coefficient(config: InspectorConfig, progress: float) -> float:
    """Reversal strength at training progress ``progress`` in [0, 1]."""
    return config.grl_coeff * GRL_SCHEDULES[config.grl_schedule](min(max(progress, 0.0), 1.0))


@dataclass
class InspectorConfig:
    backbone: str = "resnet34"
    input_size: int = 224
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    grl_coeff: float = 1.0
    grl_schedule: str = "constant"  # or "ramp": coefficient rises from 0 to grl_coeff
    source_head: bool = True
    epochs: int = 30
    seed: int = 0
    synthetic_ratio: float | None = None  # cap on non-real share per epoch

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.grl_coeff < 0:
            raise ValueError("grl_coeff must be >= 0")
        if self.grl_schedule not in GRL_SCHEDULES:
            raise ValueError(f"unknown grl_schedule {self.grl_schedule!r}; choose from {sorted(GRL_SCHEDULES)}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.synthetic_ratio is not None and not 0 <= self.synthetic_ratio < 1:
            raise ValueError("synthetic_ratio must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def desk_inspector_config(**overrides) -> InspectorConfig:
    base = dict(backbone="small-cnn", input_size=32, lr=1e-2, epochs=15)
    base.update(overrides)
    return InspectorConfig(**base)


class Inspector(nn.Module):
    def __init__(self, backbone: nn.Module, n_categories: int = NUM_CATEGORIES, source_head: bool = True):
        super().__init__()
        self.backbone = backbone
        self.classifier = nn.Linear(backbone.out_dim, n_categories)
        self.source = (
            nn.Sequential(nn.Linear(backbone.out_dim, 64), nn.ReLU(), nn.Linear(64, 1)) if source_head else None
        )

    def forward(self, x: Tensor, grl_coeff: float = 1.0) -> tuple[Tensor, Tensor | None]:
        feats = self.backbone(x)
        src = self.source(grl(feats, grl_coeff)).squeeze(1) if self.source is not None else None
        return self.classifier(feats), src


# -- data --------------------------------------------------------------------


@dataclass
class MixedDataset:
    real: list[SampleRecord]
    synthetic: list[SampleRecord] = field(default_factory=list)
    restored: list[SampleRecord] = field(default_factory=list)
    augmented: bool = False

    @property
    def records(self) -> list[SampleRecord]:
        return self.real + self.synthetic + self.restored

    def __len__(self) -> int:
        return len(self.real) + len(self.synthetic) + len(self.restored)

    def source_counts(self) -> dict[str, int]:
        return {"real": len(self.real), "synthetic": len(self.synthetic), "restored": len(self.restored)}


def mix_training_data(real: DatasetManifest, synthetic: DatasetManifest | None = None) -> MixedDataset:
    """Concatenate real and generated records, keeping their source tags."""
    if synthetic is None:
        return MixedDataset(list(real.records))
    if tuple(real.categories) != tuple(synthetic.categories):
        raise DatasetError("real and synthetic manifests use different category lists")
    seen = {str(r.path) for r in real}
    dupes = sorted(str(r.path) for r in synthetic if str(r.path) in seen)
    if dupes:
        raise DatasetError(f"records appear in both manifests: {', '.join(dupes[:10])}")
    return MixedDataset(
        list(real.records),
        synthetic.by_source("synthetic"),
        synthetic.by_source("restored"),
        augmented=True,
    )


def exact_match_accuracy(predictions: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    """Percentage of samples whose thresholded (>=) label vector equals the target."""
    pred = np.asarray(predictions) >= threshold
    tgt = np.asarray(targets) > 0.5
    if pred.shape != tgt.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {tgt.shape}")
    if len(pred) == 0:
        return 0.0
    return float(np.all(pred == tgt, axis=1).mean() * 100.0)


# -- training ----------------------------------------------------------------


@dataclass
class InspectorResult:
    model: Inspector
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float


def build_inspector(config: InspectorConfig) -> Inspector:
    torch.manual_seed(config.seed)
    backbone = BACKBONES[config.backbone]()
    return Inspector(backbone, NUM_CATEGORIES, source_head=config.source_head)


def _load(records, size):
    x = to_tensor(load_images(records, size))
    y = torch.from_numpy(np.stack([r.label for r in records]).astype(np.float32))
    s = torch.tensor([0.0 if r.source == "real" else 1.0 for r in records])
    return x, y, s


def predict(model: Inspector, images: Tensor, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(torch.sigmoid(model(images[i : i + batch_size])[0]))
    return torch.cat(out).numpy()


def evaluate(model: Inspector, manifest: DatasetManifest, input_size: int) -> float:
    x, y, _ = _load(manifest.records, input_size)
    return exact_match_accuracy(predict(model, x), y.numpy())


def train_inspector(
    config: InspectorConfig,
    data: MixedDataset,
    val: DatasetManifest | None = None,
    callback: Callable[[dict], None] | None = None,
) -> InspectorResult:
    """SGD on category BCE plus source BCE through the reversal layer.

    The model with the best validation exact-match accuracy is returned
    (the last epoch's when no validation set is given).
    """
    config.validate()
    if len(data) == 0:
        raise DatasetError("no training records")
    x, y, s = _load(data.records, config.input_size)
    use_source = config.source_head
    if use_source and config.grl_coeff > 0 and len(torch.unique(s)) < 2:
        warnings.warn("training data has a single source; source head disabled", stacklevel=2)
        use_source = False
    model = build_inspector(config)
    if not use_source:
        model.source = None
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    val_data = _load(val.records, config.input_size) if val is not None and len(val) else None

    real_idx = np.flatnonzero(s.numpy() == 0)
    fake_idx = np.flatnonzero(s.numpy() == 1)
    history: list[dict] = []
    best_acc, best_epoch, best_state = -1.0, -1, None
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        idx = np.concatenate([real_idx, fake_idx])
        if config.synthetic_ratio is not None and len(fake_idx):
            cap = int(config.synthetic_ratio / (1 - config.synthetic_ratio) * len(real_idx))
            idx = np.concatenate([real_idx, rng.permutation(fake_idx)[:cap]])
        idx = rng.permutation(idx)
        model.train()
        sums = {"cls": 0.0, "src": 0.0}
        for start in range(0, len(idx), config.batch_size):
            b = torch.from_numpy(idx[start : start + config.batch_size])
            if len(b) < 2:
                continue  # BatchNorm needs more than one sample
            coeff = grl_coefficient(config, (epoch + start / len(idx)) / config.epochs)
            cls_logits, src_logits = model(x[b], coeff)
            cls_loss = F.binary_cross_entropy_with_logits(cls_logits, y[b])
            loss = cls_loss
            if src_logits is not None:
                src_loss = F.binary_cross_entropy_with_logits(src_logits, s[b])
                loss = loss + src_loss
                sums["src"] += src_loss.item() * len(b)
            sums["cls"] += cls_loss.item() * len(b)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        entry = {
            "epoch": epoch,
            "cls_loss": sums["cls"] / len(idx),
            "src_loss": sums["src"] / len(idx),
            "grl_coeff": grl_coefficient(config, (epoch + 1) / config.epochs),
        }
        if val_data is not None:
            entry["val_accuracy"] = exact_match_accuracy(predict(model, val_data[0]), val_data[1].numpy())
            score = entry["val_accuracy"]
        else:
            score = float(epoch)
        history.append(entry)
        if callback is not None:
            callback(entry)
        if score > best_acc:
            best_acc, best_epoch, best_state = score, epoch, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return InspectorResult(model, history, best_epoch, best_acc if val_data is not None else float("nan"))
