"""Synthetic segmentation data, its on-disk record format, and mIoU.

Images compose axis-aligned rectangles and disks of class-correlated
colors over a background, plus additive Gaussian noise; labels are the
exact shape masks. One sample per file: a (C, H, W) u32 header, raw
little-endian float64 image values, then uint8 labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, MetricError
from .losses import IGNORE_LABEL
from .seeding import substream
from .tensor import Tensor


@dataclass(frozen=True)
class SynthSpec:
    height: int = 32
    width: int = 32
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 2
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"images must be at least 8x8, got {self.height}x{self.width}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.min_shapes < 1 or self.max_shapes < self.min_shapes:
            raise ConfigError(f"bad shape count range [{self.min_shapes}, {self.max_shapes}]")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")


def class_color(c: int, num_classes: int) -> np.ndarray:
    """Distinct, deterministic RGB anchor per class (a hue wheel)."""
    theta = 2.0 * np.pi * c / num_classes
    return 0.5 + 0.45 * np.array([np.cos(theta), np.cos(theta - 2 * np.pi / 3), np.cos(theta + 2 * np.pi / 3)])


def generate_dataset(spec: SynthSpec, n: int):
    """n samples of (3×H×W float64 image, H×W uint8 labels), seed-deterministic."""
    if n < 1:
        raise ConfigError(f"need n >= 1 samples, got {n}")
    rng = substream(spec.seed, "data")
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    samples = []
    for _ in range(n):
        image = np.empty((3, h, w))
        image[:] = class_color(0, spec.num_classes)[:, None, None]
        labels = np.zeros((h, w), dtype=np.uint8)
        for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
            cls = int(rng.integers(1, spec.num_classes))
            color = class_color(cls, spec.num_classes) + rng.uniform(-0.05, 0.05, 3)
            # shapes span a decent fraction of the image so that even a
            # coarse-grid predictor can localize them
            if rng.random() < 0.5:
                eh = int(rng.integers(max(3, h // 4), max(4, h // 2) + 1))
                ew = int(rng.integers(max(3, w // 4), max(4, w // 2) + 1))
                y0 = int(rng.integers(0, h - eh + 1))
                x0 = int(rng.integers(0, w - ew + 1))
                inside = (yy >= y0) & (yy < y0 + eh) & (xx >= x0) & (xx < x0 + ew)
            else:
                r = int(rng.integers(max(2, min(h, w) // 6), max(3, min(h, w) // 3) + 1))
                cy = int(rng.integers(r, h - r + 1))
                cx = int(rng.integers(r, w - r + 1))
                inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            labels[inside] = cls
            image[:, inside] = color[:, None]
        if spec.noise > 0:
            image += spec.noise * rng.standard_normal(image.shape)
        np.clip(image, 0.0, 1.0, out=image)
        samples.append((image, labels))
    return samples


# on-disk records ------------------------------------------------------

def save_record(path, image: np.ndarray, labels: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype="<f8")
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    c, h, w = image.shape
    if labels.shape != (h, w):
        raise DataError(f"labels {labels.shape} do not match image {image.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", c, h, w))
        fh.write(image.tobytes())
        fh.write(labels.tobytes())


def load_record(path):
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise DataError(f"{path}: unexpected record size {len(blob)}")
    c, h, w = struct.unpack_from("<III", blob, 0)
    n = c * h * w
    if len(blob) != 12 + 8 * n + h * w:
        raise DataError(f"{path}: unexpected record size {len(blob)}")
    image = np.frombuffer(blob, dtype="<f8", count=n, offset=12).reshape(c, h, w).astype(np.float64)
    labels = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=12 + 8 * n).reshape(h, w).copy()
    return image, labels


def save_dataset(dirpath, samples) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for i, (image, labels) in enumerate(samples):
        save_record(dirpath / f"{i:05d}.bin", image, labels)


def load_dataset(dirpath):
    paths = sorted(Path(dirpath).glob("*.bin"))
    if not paths:
        raise DataError(f"no .bin records found in {dirpath}")
    return [load_record(p) for p in paths]


# evaluation -----------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # K×K int64, rows = ground truth, cols = prediction

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64))


def update_confusion(cm: ConfusionMatrix, pred_labels: np.ndarray, gt_labels: np.ndarray) -> ConfusionMatrix:
    k = cm.counts.shape[0]
    valid = gt_labels != IGNORE_LABEL
    gt = gt_labels[valid].astype(int)
    pred = pred_labels[valid].astype(int)
    if gt.size and (gt.min() < 0 or gt.max() >= k or pred.min() < 0 or pred.max() >= k):
        raise DataError(f"labels outside [0, {k}) in confusion update")
    np.add.at(cm.counts, (gt, pred), 1)
    return cm


def miou_from_confusion(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes present in prediction or ground truth."""
    if cm.counts.sum() == 0:
        raise MetricError("mIoU undefined: no evaluated pixels (all ignored?)")
    tp = np.diag(cm.counts).astype(float)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    union = tp + fp + fn
    present = union > 0
    return float((tp[present] / union[present]).mean())


def predict_labels(prediction) -> np.ndarray:
    """Argmax class map from K×H×W logits (tensor or array)."""
    data = prediction.data if isinstance(prediction, Tensor) else np.asarray(prediction)
    return data.argmax(axis=0)
