"""Class-balancing weighted random sampler.

Every example i with class y_i gets weight w_{y_i} = N / (C * N_{y_i}) and
selection probability P_i = w_{y_i} / sum_j w_{y_j}, which makes the total
selection mass of each class exactly 1/C. Draws are i.i.d. with replacement
through a Walker alias table, O(1) per draw; an epoch is ceil(N / batch)
batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .data import DatasetManifest


@dataclass(frozen=True)
class SamplerSpec:
    num_classes: int
    total: int
    class_counts: np.ndarray       # N_c, shape (C,)
    labels: np.ndarray             # y_i per example, shape (N,)
    per_sample_weights: np.ndarray  # w_{y_i}, shape (N,)
    selection_probs: np.ndarray    # P_i, shape (N,)
    _alias_prob: np.ndarray
    _alias_index: np.ndarray

    def batches_per_epoch(self, batch_size: int) -> int:
        return -(-self.total // batch_size)


def build_sampler_from_labels(labels, num_classes: int) -> SamplerSpec:
    """Core constructor from a per-example class-id array."""
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ConfigError("cannot build a sampler over an empty split")
    if y.min() < 0 or y.max() >= num_classes:
        raise ConfigError(f"label out of range [0, {num_classes})")
    counts = np.bincount(y, minlength=num_classes).astype(np.int64)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ConfigError(f"class {int(missing[0])} has zero examples in the split")
    n = int(y.size)
    class_weights = n / (num_classes * counts.astype(np.float64))
    weights = class_weights[y]
    probs = weights / weights.sum()
    prob, alias = _alias_table(probs)
    return SamplerSpec(num_classes, n, counts, y, weights, probs, prob, alias)


def uniform_sampler_from_labels(labels, num_classes: int) -> SamplerSpec:
    """Unweighted variant: every example drawn with probability 1/N."""
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ConfigError("cannot build a sampler over an empty split")
    if y.min() < 0 or y.max() >= num_classes:
        raise ConfigError(f"label out of range [0, {num_classes})")
    counts = np.bincount(y, minlength=num_classes).astype(np.int64)
    n = int(y.size)
    weights = np.ones(n)
    probs = weights / n
    prob, alias = _alias_table(probs)
    return SamplerSpec(num_classes, n, counts, y, weights, probs, prob, alias)


def build_sampler(manifest: DatasetManifest, split: str) -> SamplerSpec:
    """Sampler over a manifest split; example order is sorted source_id."""
    sources = manifest.sources(split)
    if not sources:
        raise ConfigError(f"split '{split}' is empty")
    labels = np.array([manifest.label_of[s] for s in sources], dtype=np.int64)
    return build_sampler_from_labels(labels, manifest.num_classes)


def _alias_table(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = probs.size
    scaled = probs * n
    prob = np.ones(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        big = large.pop()
        prob[s] = scaled[s]
        alias[s] = big
        scaled[big] -= 1.0 - scaled[s]
        if scaled[big] < 1.0:
            small.append(big)
        else:
            large.append(big)
    # leftovers are numerically 1 after exhaustion
    for i in small:
        prob[i] = 1.0
    for i in large:
        prob[i] = 1.0
    return prob, alias


def draw_batch(spec: SamplerSpec, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """batch_size example indices drawn i.i.d. with replacement per P_i."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    u = rng.random(batch_size) * spec.total
    idx = u.astype(np.int64)
    frac = u - idx
    return np.where(frac < spec._alias_prob[idx], idx, spec._alias_index[idx])
