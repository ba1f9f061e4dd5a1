"""Post-hoc OOD scoring functions and the threshold detector.

Every exposed score is oriented the same way: higher means more ID-like.
Scorers accept a single vector/map or a batch and return a float or a 1-d
array accordingly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .losses import cross_entropy
from .model import ModelState, classify, forward_logits

FVEC_MAGIC = b"FVEC"

SCORE_NAMES = ("energy", "msp", "odin", "react_energy", "featurenorm")


class FvecError(Exception):
    """Malformed feature-vector dump file."""


@dataclass
class ScoreRecord:
    sample_id: int
    split: str
    score: float


@dataclass
class ReactThreshold:
    """Activation clip value fitted on ID-training global features."""

    clip_value: float
    percentile: float
    fitted_on: str


def _batched(fn, x, rank):
    """Apply a batch function to a single item (rank dims) or a batch (rank+1)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == rank:
        return float(fn(arr[None])[0])
    if arr.ndim == rank + 1:
        return fn(arr)
    raise ValueError(f"expected {rank}-d or {rank + 1}-d input, got {arr.ndim}-d")


def energy_score(logits):
    """log-sum-exp of the logits, max-shifted for stability."""

    def compute(z):
        m = z.max(axis=1)
        return m + np.log(np.exp(z - m[:, None]).sum(axis=1))

    return _batched(compute, logits, 1)


def msp_score(logits):
    """Maximum softmax probability."""

    def compute(z):
        m = z.max(axis=1)
        exp = np.exp(z - m[:, None])
        return exp.max(axis=1) / exp.sum(axis=1)

    return _batched(compute, logits, 1)


def odin_score(state: ModelState, images, temperature: float = 1000.0, perturbation: float = 0.0):
    """Temperature-scaled MSP, optionally after a small input perturbation.

    images: normalized model inputs, (3, S, S) or (N, 3, S, S). With a positive
    perturbation the input is nudged one signed-gradient step toward a higher
    predicted-class softmax score before rescoring.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if perturbation < 0:
        raise ValueError(f"perturbation must be nonnegative, got {perturbation}")

    def compute(batch):
        batch = batch.astype(np.float32)
        if perturbation > 0.0:
            x = Tensor(batch, requires_grad=True)
            _, _, logits = forward_logits(state, x)
            predicted = logits.data.argmax(axis=1)
            nll = cross_entropy(logits * (1.0 / temperature), predicted)
            nll.backward()
            batch = batch - np.float32(perturbation) * np.sign(x.grad)
        with autodiff.no_grad():
            _, _, logits = forward_logits(state, Tensor(batch))
        return msp_score(logits.data.astype(np.float64) / temperature)

    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        return float(np.asarray(compute(arr[None])).reshape(-1)[0])
    if arr.ndim == 4:
        return np.asarray(compute(arr), dtype=np.float64)
    raise ValueError(f"expected 3-d or 4-d images, got {arr.ndim}-d")


def fit_react_threshold(
    global_features: np.ndarray, percentile: float = 90.0, fitted_on: str = "id-train"
) -> ReactThreshold:
    """Clip value = the given percentile (linear interpolation) of all pooled
    ID-training activation values."""
    if not 0.0 <= percentile <= 100.0:
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    pool = np.asarray(global_features, dtype=np.float64).reshape(-1)
    if pool.size == 0:
        raise ValueError("cannot fit a clip threshold on an empty activation pool")
    clip = float(np.percentile(pool, percentile))
    return ReactThreshold(clip_value=clip, percentile=float(percentile), fitted_on=fitted_on)


def react_energy_score(global_features, state: ModelState, threshold: ReactThreshold):
    """Energy score of the head applied to the elementwise-clipped global feature."""
    if threshold is None or threshold.clip_value is None:
        raise ValueError("react_energy_score: clip threshold has not been fitted")

    def compute(feats):
        clipped = np.minimum(feats, threshold.clip_value).astype(np.float32)
        with autodiff.no_grad():
            logits = classify(state, Tensor(clipped))
        return energy_score(logits.data.astype(np.float64))

    return _batched(compute, global_features, 1)


def featurenorm_score(fmap):
    """Mean over spatial cells of the per-cell L2 norm of the feature map."""

    def compute(maps):
        n, c, h, w = maps.shape
        cells = maps.reshape(n, c, h * w)
        return np.sqrt((cells * cells).sum(axis=1)).mean(axis=1)

    return _batched(compute, fmap, 3)


def detect(score: float, gamma: float) -> str:
    """Threshold detector: ID iff score >= gamma."""
    return "ID" if score >= gamma else "OOD"


def write_fvec(path, features: np.ndarray) -> None:
    """Dump (N, C) feature vectors: magic, u64 count, u64 dim, little-endian f32 rows."""
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"expected (N, C) features, got {features.ndim}-d")
    with open(path, "wb") as fh:
        fh.write(FVEC_MAGIC)
        fh.write(struct.pack("<Q", features.shape[0]))
        fh.write(struct.pack("<Q", features.shape[1]))
        fh.write(np.ascontiguousarray(features).tobytes())


def read_fvec(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FVEC_MAGIC:
            raise FvecError(f"{path}: not a feature dump (bad magic {magic!r})")
        header = fh.read(16)
        if len(header) != 16:
            raise FvecError(f"{path}: unexpected end of file in header")
        count, dim = struct.unpack("<QQ", header)
        raw = fh.read(count * dim * 4)
        if len(raw) != count * dim * 4:
            raise FvecError(
                f"{path}: unexpected end of file (expected {count}x{dim} float32 rows)"
            )
        if fh.read(1):
            raise FvecError(f"{path}: trailing data after feature rows")
    return np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()


def write_scores_csv(path, records) -> None:
    """Score dump with the stable header id,split,score."""
    with open(path, "w") as fh:
        fh.write("id,split,score\n")
        for rec in records:
            fh.write(f"{rec.sample_id},{rec.split},{rec.score:.10g}\n")


def read_scores_csv(path):
    records = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "id,split,score":
            raise ValueError(f"{path}: unexpected score CSV header {header!r}")
        for line in fh:
            sample_id, split, score = line.strip().split(",")
            records.append(ScoreRecord(int(sample_id), split, float(score)))
    return records
