"""Per-location class probabilities on the feature map and selection of the
background feature set.

A spatial cell counts as background when the head assigns its feature vector
a ground-truth-class probability strictly below the threshold. Selection is a
hard mask: no gradient flows through the decision, only through the selected
vectors inside the hinge loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelState


@dataclass
class BackgroundSet:
    """Selected (sample, cell) pairs with copies of their feature vectors.

    spatial_index is the row-major cell index y·W + x within the feature grid.
    """

    sample_index: np.ndarray
    spatial_index: np.ndarray
    vectors: np.ndarray
    prob_threshold: float

    def __len__(self):
        return int(self.sample_index.shape[0])


def _local_logits(state: ModelState, fmaps: np.ndarray) -> np.ndarray:
    n, c, h, w = fmaps.shape
    cells = np.ascontiguousarray(fmaps.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    return cells @ state.head_weight.data.T + state.head_bias.data


def local_probability_grids(state: ModelState, fmaps: np.ndarray, labels) -> np.ndarray:
    """Ground-truth-class softmax probability of every feature-map cell.

    fmaps: (N, C, H, W) post-activation feature maps (plain arrays, no graph);
    labels: (N,) class ids. Returns (N, H, W) float32 grids in [0, 1], computed
    per cell with max-logit subtraction.
    """
    if fmaps.ndim != 4:
        raise ValueError(f"expected 4-d feature maps, got {fmaps.ndim}-d")
    n, _, h, w = fmaps.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    k = state.class_count
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside [0, {k})")

    logits = _local_logits(state, fmaps)
    zmax = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - zmax)
    label_per_cell = np.repeat(labels, h * w)
    rows = np.arange(n * h * w)
    probs = exp[rows, label_per_cell] / exp.sum(axis=1)
    return probs.reshape(n, h, w).astype(np.float32)


def local_probability_grid(state: ModelState, fmap: np.ndarray, label: int) -> np.ndarray:
    """Single-sample variant of :func:`local_probability_grids`."""
    return local_probability_grids(state, fmap[None], np.asarray([label]))[0]


def extract_background_set(
    state: ModelState, fmaps: np.ndarray, labels, prob_threshold: float
) -> BackgroundSet:
    """All cells whose ground-truth-class probability is strictly below the
    threshold, pooled over the batch. An empty result is valid."""
    if not 0.0 <= prob_threshold <= 1.0:
        raise ValueError(f"prob_threshold must be in [0, 1], got {prob_threshold}")
    grids = local_probability_grids(state, fmaps, labels)
    n, _, h, w = fmaps.shape
    mask = grids.reshape(n, h * w) < prob_threshold
    sample_index, spatial_index = np.nonzero(mask)
    ys = spatial_index // w
    xs = spatial_index % w
    vectors = fmaps[sample_index, :, ys, xs].copy()
    return BackgroundSet(
        sample_index=sample_index.astype(np.intp),
        spatial_index=spatial_index.astype(np.intp),
        vectors=vectors,
        prob_threshold=float(prob_threshold),
    )


def selection_mask(
    state: ModelState, fmaps: np.ndarray, labels, prob_threshold: float
) -> np.ndarray:
    """Boolean (N, H·W) background mask; shared by the frozen-selection modes."""
    grids = local_probability_grids(state, fmaps, labels)
    n, h, w = grids.shape
    return grids.reshape(n, h * w) < prob_threshold


def write_extraction_dump(fh, batch_index: int, sample_ids, grids: np.ndarray, prob_threshold: float):
    """Append one batch of (sample, cell, probability, selected) rows as CSV."""
    n, h, w = grids.shape
    flat = grids.reshape(n, h * w)
    for i in range(n):
        for j in range(h * w):
            p = flat[i, j]
            fh.write(f"{batch_index},{sample_ids[i]},{j},{p:.8g},{int(p < prob_threshold)}\n")
