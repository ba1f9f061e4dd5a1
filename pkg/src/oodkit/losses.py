"""Training losses: cross-entropy, the background-feature norm hinge, and
their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _node, _wants_grad


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the fine-tuning objective.

    prob_threshold: ground-truth-class probability below which a spatial
        location counts as background.
    norm_margin: hinge margin on the L2 norm of selected feature vectors.
    loss_weight: weight of the hinge term in the joint loss.
    """

    prob_threshold: float = 0.1
    norm_margin: float = 1.0
    loss_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.prob_threshold <= 1.0:
            raise ValueError(f"prob_threshold must be in [0, 1], got {self.prob_threshold}")
        if self.norm_margin < 0:
            raise ValueError(f"norm_margin must be nonnegative, got {self.norm_margin}")
        if self.loss_weight < 0:
            raise ValueError(f"loss_weight must be nonnegative, got {self.loss_weight}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the labels under softmax(logits).

    Stabilized with max-logit subtraction. logits: (N, K); labels: (N,) ints.
    """
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"cross_entropy: expected 2-d logits, got {z.ndim}-d")
    if not np.all(np.isfinite(z)):
        raise ValueError("cross_entropy: logits contain non-finite values")
    n, k = z.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels outside [0, {k})")

    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    exp = np.exp(shifted)
    sumexp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sumexp)
    rows = np.arange(n)
    loss = np.asarray(-log_probs[rows, labels].mean(), dtype=np.float32)

    out = _node(loss, (logits,))
    if out._prev:
        softmax = exp / sumexp

        def backward(g):
            dlogits = softmax.copy()
            dlogits[rows, labels] -= 1.0
            dlogits *= g.reshape(-1)[0] / n
            logits._accumulate(dlogits)

        out._backward = backward
    return out


def background_norm_hinge(
    fmap: Tensor, sample_index, spatial_index, norm_margin: float
) -> Tensor:
    """Mean hinge penalty max(||z|| − margin, 0) over selected feature-map locations.

    fmap: (N, C, H, W). sample_index/spatial_index: parallel int arrays naming
    unique (sample, row-major cell) pairs. Returns a scalar; empty selections
    yield a constant 0 detached from the graph. The gradient w.r.t. a selected
    vector is z/||z|| scaled by 1/|S| where ||z|| exceeds the margin, and zero
    elsewhere (including at the hinge and at the norm's singular point z = 0).
    """
    if fmap.ndim != 4:
        raise ValueError(f"background_norm_hinge: expected 4-d feature map, got {fmap.ndim}-d")
    if norm_margin < 0:
        raise ValueError(f"background_norm_hinge: margin must be nonnegative, got {norm_margin}")
    sample_index = np.asarray(sample_index, dtype=np.intp)
    spatial_index = np.asarray(spatial_index, dtype=np.intp)
    m = sample_index.shape[0]
    if m == 0:
        return Tensor(0.0)
    _, _, h, w = fmap.shape
    ys = spatial_index // w
    xs = spatial_index % w
    vectors = fmap.data[sample_index, :, ys, xs]
    norms = np.sqrt((vectors * vectors).sum(axis=1))
    excess = np.maximum(norms - np.float32(norm_margin), 0.0)
    loss = np.asarray(excess.mean(), dtype=np.float32)

    out = _node(loss, (fmap,))
    if out._prev:
        active = norms > norm_margin

        def backward(g):
            dvec = np.zeros_like(vectors)
            if active.any():
                scale = g.reshape(-1)[0] / (m * norms[active])
                dvec[active] = vectors[active] * scale[:, None]
            dz = np.zeros_like(fmap.data)
            dz[sample_index, :, ys, xs] = dvec
            fmap._accumulate(dz)

        out._backward = backward
    return out


def lff_loss(background_set, norm_margin: float) -> float:
    """Plain-value hinge loss of an extracted background set (0 when empty)."""
    vectors = background_set.vectors
    if vectors.shape[0] == 0:
        return 0.0
    norms = np.sqrt((vectors * vectors).sum(axis=1))
    return float(np.maximum(norms - np.float32(norm_margin), 0.0).mean())


def joint_loss(ce, lff, loss_weight: float):
    """ce + loss_weight·lff; works on Tensors (graph-building) and floats alike."""
    return ce + loss_weight * lff
