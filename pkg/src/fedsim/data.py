"""Dataset IO: directory corpora, augmentation, synthetic data, stratified splits.

Images travel as (C, H, W) float64 tensors with values in [0, 1] until the
normalization step inside ``augment``. A ``DatasetManifest`` records class
names, the split assigned to every source id, per-example labels, per-split
class counts, and per-channel normalization statistics computed from the
train split; it round-trips losslessly through JSON with sorted keys.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .rand import substream
from .tensor import Tensor

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class LabeledExample:
    image: Tensor  # (C, H, W), values in [0,1] before normalization
    class_id: int
    source_id: str


@dataclass(frozen=True)
class AugmentConfig:
    resize: int = 224
    flip_prob: float = 0.5
    rotation_degrees: float = 15.0
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.resize < 1:
            raise ConfigError(f"resize target must be >= 1, got {self.resize}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.rotation_degrees < 0:
            raise ConfigError(f"rotation_degrees must be >= 0, got {self.rotation_degrees}")
        if len(self.mean) != len(self.std):
            raise ConfigError("mean and std must have the same channel count")
        if any(s <= 0 for s in self.std):
            raise ConfigError("std entries must be positive")

    @classmethod
    def evaluation(cls, manifest: "DatasetManifest", resize: int) -> "AugmentConfig":
        """Deterministic transform: resize + normalize only."""
        return cls(resize=resize, flip_prob=0.0, rotation_degrees=0.0,
                   mean=manifest.mean, std=manifest.std)

    @classmethod
    def training(cls, manifest: "DatasetManifest", resize: int,
                 flip_prob: float = 0.5, rotation_degrees: float = 15.0) -> "AugmentConfig":
        return cls(resize=resize, flip_prob=flip_prob, rotation_degrees=rotation_degrees,
                   mean=manifest.mean, std=manifest.std)


@dataclass
class DatasetManifest:
    class_names: list[str]
    split_of: dict[str, str]  # source_id -> train/val/test
    label_of: dict[str, int]  # source_id -> class id
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def sources(self, split: str) -> list[str]:
        self._check_split(split)
        return sorted(s for s, sp in self.split_of.items() if sp == split)

    def counts(self) -> dict[str, dict[str, int]]:
        """Per-split per-class-name example counts."""
        out = {sp: {name: 0 for name in self.class_names} for sp in SPLITS}
        for src, sp in self.split_of.items():
            out[sp][self.class_names[self.label_of[src]]] += 1
        return out

    def class_counts(self, split: str) -> np.ndarray:
        self._check_split(split)
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for src, sp in self.split_of.items():
            if sp == split:
                counts[self.label_of[src]] += 1
        return counts

    def examples_for(self, examples: Sequence[LabeledExample], split: str) -> list[LabeledExample]:
        """Examples assigned to a split, in stable source_id order."""
        self._check_split(split)
        chosen = [ex for ex in examples if self.split_of.get(ex.source_id) == split]
        return sorted(chosen, key=lambda ex: ex.source_id)

    @staticmethod
    def _check_split(split: str) -> None:
        if split not in SPLITS:
            raise ConfigError(f"unknown split '{split}', expected one of {SPLITS}")

    def to_json(self) -> str:
        obj = {
            "class_names": list(self.class_names),
            "counts": self.counts(),
            "labels": dict(sorted(self.label_of.items())),
            "normalization": {"mean": list(self.mean), "std": list(self.std)},
            "splits": dict(sorted(self.split_of.items())),
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {exc}") from exc
        try:
            names = list(obj["class_names"])
            splits = dict(obj["splits"])
            labels = {k: int(v) for k, v in obj["labels"].items()}
            norm = obj["normalization"]
            mean = tuple(float(v) for v in norm["mean"])
            std = tuple(float(v) for v in norm["std"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"manifest missing required field: {exc}") from exc
        if not names:
            raise DataError("manifest has no classes")
        for src, sp in splits.items():
            if sp not in SPLITS:
                raise DataError(f"source '{src}' has unknown split '{sp}'")
            if src not in labels:
                raise DataError(f"source '{src}' has no label entry")
        for src, cid in labels.items():
            if src not in splits:
                raise DataError(f"label entry '{src}' has no split assignment")
            if not 0 <= cid < len(names):
                raise DataError(f"source '{src}' label {cid} out of range for {len(names)} classes")
        manifest = cls(names, splits, labels, mean, std)
        if "counts" in obj and obj["counts"] != manifest.counts():
            raise DataError("manifest counts disagree with split/label entries")
        return manifest

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _apportion(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder split of n items; earlier entries win remainder ties."""
    quotas = [n * f for f in fractions]
    base = [int(math.floor(q)) for q in quotas]
    leftover = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in range(leftover):
        base[order[i]] += 1
    return base


def stratified_split(examples: Sequence[LabeledExample],
                     fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                     seed: int = 0,
                     class_names: Sequence[str] | None = None) -> DatasetManifest:
    """Assign every example a split, class by class, with largest-remainder
    rounding (remainder ties go train, then val, then test)."""
    if len(fractions) != 3:
        raise ConfigError(f"fractions must be (train, val, test), got {fractions}")
    if any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be nonnegative, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    if not examples:
        raise ConfigError("cannot split an empty example list")

    num_classes = max(ex.class_id for ex in examples) + 1
    if class_names is None:
        class_names = [f"class{i}" for i in range(num_classes)]
    if len(class_names) < num_classes:
        raise ConfigError(f"{len(class_names)} class names for {num_classes} class ids")
    class_names = list(class_names)

    seen = set()
    for ex in examples:
        if ex.source_id in seen:
            raise DataError(f"duplicate source_id '{ex.source_id}'")
        seen.add(ex.source_id)

    by_class: dict[int, list[LabeledExample]] = {c: [] for c in range(len(class_names))}
    for ex in examples:
        by_class[ex.class_id].append(ex)

    split_of: dict[str, str] = {}
    label_of: dict[str, int] = {}
    for cid in range(len(class_names)):
        members = sorted(by_class[cid], key=lambda ex: ex.source_id)
        if not members:
            raise ConfigError(f"class '{class_names[cid]}' has no examples")
        counts = _apportion(len(members), fractions)
        order = substream(seed, "split", cid).permutation(len(members))
        cursor = 0
        for split, k in zip(SPLITS, counts):
            for idx in order[cursor:cursor + k]:
                split_of[members[idx].source_id] = split
                label_of[members[idx].source_id] = cid
            cursor += k

    mean, std = _channel_stats([ex for ex in examples if split_of[ex.source_id] == "train"])
    return DatasetManifest(class_names, split_of, label_of, mean, std)


def _channel_stats(train_examples: Sequence[LabeledExample]) -> tuple[tuple, tuple]:
    if not train_examples:
        raise ConfigError("train split is empty; cannot compute normalization stats")
    channels = train_examples[0].image.shape[0]
    total = np.zeros(channels)
    total_sq = np.zeros(channels)
    count = 0
    for ex in train_examples:
        img = ex.image.data
        if img.shape[0] != channels:
            raise DataError(f"inconsistent channel count in '{ex.source_id}'")
        total += img.sum(axis=(1, 2))
        total_sq += (img ** 2).sum(axis=(1, 2))
        count += img.shape[1] * img.shape[2]
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    a = img[:, y0][:, :, x0]
    b = img[:, y0][:, :, x1]
    d = img[:, y1][:, :, x0]
    e = img[:, y1][:, :, x1]
    top = a * (1.0 - fx) + b * fx
    bottom = d * (1.0 - fx) + e * fx
    return top * (1.0 - fy) + bottom * fy


def _rotate_nearest(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0.0:
        return img.copy()
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = yy - cy, xx - cx
    sy = np.rint(cy + cos_t * dy + sin_t * dx).astype(np.int64)
    sx = np.rint(cx - sin_t * dy + cos_t * dx).astype(np.int64)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    syc = np.clip(sy, 0, h - 1)
    sxc = np.clip(sx, 0, w - 1)
    return np.where(valid[None, :, :], img[:, syc, sxc], 0.0)


def augment(example: LabeledExample, config: AugmentConfig,
            rng: np.random.Generator | None = None) -> LabeledExample:
    """Resize, optional flip/rotation, then per-channel normalization."""
    img = example.image.data
    if img.ndim != 3:
        raise DataError(f"expected (C, H, W) image, got shape {img.shape} in '{example.source_id}'")
    if min(img.shape) == 0:
        raise DataError(f"degenerate image with a zero dimension in '{example.source_id}'")
    if img.shape[0] != len(config.mean):
        raise ConfigError(f"{img.shape[0]}-channel image but {len(config.mean)} normalization stats")

    img = _resize_bilinear(img, config.resize, config.resize)
    stochastic = config.flip_prob > 0.0 or config.rotation_degrees > 0.0
    if stochastic and rng is None:
        raise ConfigError("augment needs an rng when flip or rotation is enabled")
    if config.flip_prob > 0.0 and rng.random() < config.flip_prob:
        img = img[:, :, ::-1].copy()
    if config.rotation_degrees > 0.0:
        img = _rotate_nearest(img, float(rng.uniform(-config.rotation_degrees,
                                                     config.rotation_degrees)))
    mean = np.asarray(config.mean)[:, None, None]
    std = np.asarray(config.std)[:, None, None]
    img = (img - mean) / std
    return LabeledExample(Tensor(img), example.class_id, example.source_id)


def pattern_box(class_id: int, num_classes: int, image_size: int) -> tuple[int, int, int, int]:
    """Pixel bbox (r0, r1, c0, c1) of the bright square planted for a class."""
    cells = math.ceil(math.sqrt(num_classes))
    cell = image_size // cells
    margin = max(1, cell // 4)
    side = cell - 2 * margin
    if cell < 3 or side < 2:
        raise ConfigError(f"image_size {image_size} too small to place {num_classes} class patterns")
    row, col = class_id // cells, class_id % cells
    r0 = row * cell + margin
    c0 = col * cell + margin
    return r0, r0 + side, c0, c0 + side


def synth_dataset(num_classes: int, per_class, image_size: int, seed: int,
                  fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                  ) -> tuple[list[LabeledExample], DatasetManifest]:
    """Noise images with a bright square at a class-indexed grid cell.

    ``per_class`` is an int (balanced) or a per-class sequence of counts.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if isinstance(per_class, int):
        counts = [per_class] * num_classes
    else:
        counts = [int(v) for v in per_class]
        if len(counts) != num_classes:
            raise ConfigError(f"{len(counts)} per-class counts for {num_classes} classes")
    if any(v < 1 for v in counts):
        raise ConfigError("every class needs at least one example")
    pattern_box(0, num_classes, image_size)  # validates geometry

    examples: list[LabeledExample] = []
    for cid in range(num_classes):
        r0, r1, c0, c1 = pattern_box(cid, num_classes, image_size)
        rng = substream(seed, "synth", cid)
        for i in range(counts[cid]):
            img = rng.uniform(0.0, 0.35, size=(3, image_size, image_size))
            img[:, r0:r1, c0:c1] += 0.6
            np.clip(img, 0.0, 1.0, out=img)
            examples.append(LabeledExample(Tensor(img), cid, f"class{cid}/{i:04d}"))
    manifest = stratified_split(examples, fractions, seed,
                                [f"class{c}" for c in range(num_classes)])
    return examples, manifest


def load_directory(root: str) -> tuple[list[LabeledExample], list[str]]:
    """Load root/<class_name>/<file>.png|jpg as float64 RGB tensors in [0,1]."""
    from PIL import Image, UnidentifiedImageError

    if not os.path.isdir(root):
        raise DataError(f"dataset root '{root}' is not a directory")
    class_names = sorted(d for d in os.listdir(root)
                         if os.path.isdir(os.path.join(root, d)))
    if not class_names:
        raise DataError(f"dataset root '{root}' contains no class directories")
    examples: list[LabeledExample] = []
    for cid, name in enumerate(class_names):
        class_dir = os.path.join(root, name)
        files = sorted(f for f in os.listdir(class_dir)
                       if f.lower().endswith(IMAGE_SUFFIXES))
        if not files:
            raise DataError(f"class directory '{class_dir}' has no decodable images")
        for fname in files:
            path = os.path.join(class_dir, fname)
            try:
                with Image.open(path) as pil:
                    arr = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
            except (OSError, UnidentifiedImageError) as exc:
                raise DataError(f"cannot decode image '{path}': {exc}") from exc
            img = np.ascontiguousarray(arr.transpose(2, 0, 1))
            examples.append(LabeledExample(Tensor(img), cid, f"{name}/{fname}"))
    return examples, class_names


def load_image(path: str) -> Tensor:
    """Decode one image file to a (3, H, W) float64 tensor in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as pil:
            arr = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image '{path}': {exc}") from exc
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def write_directory(examples: Sequence[LabeledExample], class_names: Sequence[str],
                    root: str) -> None:
    """Write examples as 8-bit PNGs under root/<class_name>/."""
    from PIL import Image

    os.makedirs(root, exist_ok=True)
    for ex in examples:
        name = class_names[ex.class_id]
        class_dir = os.path.join(root, name)
        os.makedirs(class_dir, exist_ok=True)
        base = ex.source_id.split("/", 1)[-1]
        if not base.lower().endswith(IMAGE_SUFFIXES):
            base += ".png"
        arr = np.clip(ex.image.data, 0.0, 1.0)
        pixels = np.rint(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(pixels, mode="RGB").save(os.path.join(class_dir, base))
