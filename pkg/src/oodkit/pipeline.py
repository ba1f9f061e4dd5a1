"""Two-stage training protocol and evaluation runs.

Stage one trains the classifier with cross-entropy only. Stage two fine-tunes
from a checkpoint with the joint objective: cross-entropy plus the weighted
norm hinge on background cells extracted from the current feature maps.
Every run is a pure function of (config, dataset bytes): data order,
augmentation, and initialization each draw from their own seed-derived
stream, so reruns reproduce checkpoints bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff, bgextract, losses, metrics, scoring
from .autodiff import SGD, Tensor
from .data import (
    STREAM_AUGMENT,
    STREAM_DATA_ORDER,
    STREAM_INIT,
    AugmentationPolicy,
    DataError,
    augment,
    derive_rng,
    load_manifest,
    load_split,
)
from .model import (
    EncoderConfig,
    ModelState,
    forward_encoder,
    forward_logits,
    init_model,
    load_checkpoint,
    normalize_images,
    save_checkpoint,
)

OOD_SPLITS = ("ood-background", "ood-novelshape")
TRAIN_LOG_HEADER = "epoch,ce_loss,lff_loss,s_count_mean,lr,id_test_acc"
CHECKPOINT_NAME = "checkpoint.ckpt"
REFRESH_MODES = ("batch", "epoch", "once")
EVAL_BATCH = 256


class PipelineError(Exception):
    """Run-time failure in a training or evaluation stage."""


STAGE_DEFAULTS = {
    "pretrain": {"epochs": 20, "lr": 0.05, "lr_decay_epochs": (10,), "color_jitter": True},
    "finetune": {"epochs": 10, "lr": 0.005, "lr_decay_epochs": (5,), "color_jitter": False},
}


@dataclass(frozen=True)
class RunConfig:
    stage: str
    data: str
    out: str
    checkpoint: str = ""
    seed: int = 7
    epochs: int = 0
    batch_size: int = 64
    lr: float = 0.05
    lr_decay_factor: float = 10.0
    lr_decay_epochs: tuple = ()
    momentum: float = 0.9
    weight_decay: float = 1e-4
    prob_threshold: float = 0.1
    norm_margin: float = 1.0
    loss_weight: float = 1.0
    extraction_refresh: str = "batch"
    crop_padding: int = 4
    flip: bool = True
    color_jitter: bool = True
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    react_percentile: float = 90.0
    odin_temperature: float = 1000.0
    odin_perturbation: float = 0.0
    scores: tuple = scoring.SCORE_NAMES
    hist_bins: int = 30
    heatmap_samples: int = 8
    tag: str = ""
    dump_extraction: str = ""

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune", "eval"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "finetune" and not self.checkpoint:
            raise ValueError("finetune requires an input checkpoint")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        decays = tuple(int(e) for e in self.lr_decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing, got {decays}")
        if decays and (decays[0] < 1 or decays[-1] > self.epochs):
            raise ValueError(
                f"lr_decay_epochs must lie within [1, {self.epochs}], got {decays}"
            )
        if self.extraction_refresh not in REFRESH_MODES:
            raise ValueError(
                f"extraction_refresh must be one of {REFRESH_MODES}, "
                f"got {self.extraction_refresh!r}"
            )
        losses.LossConfig(self.prob_threshold, self.norm_margin, self.loss_weight)
        unknown = set(self.scores) - set(scoring.SCORE_NAMES)
        if unknown:
            raise ValueError(f"unknown scoring functions: {sorted(unknown)}")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "RunConfig":
        """Stage defaults (schedule, augmentation) filled in, then overrides."""
        merged = dict(STAGE_DEFAULTS.get(stage, {}))
        merged.update(overrides)
        return cls(stage=stage, **merged)

    def augmentation_policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(
            crop_padding=self.crop_padding,
            horizontal_flip=self.flip,
            color_jitter=self.color_jitter,
        )

    def learning_rate(self, epoch: int) -> float:
        """Effective rate for a 1-based epoch; decay applies from the named epoch on."""
        drops = sum(1 for d in self.lr_decay_epochs if d <= epoch)
        return self.lr / self.lr_decay_factor**drops

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


def write_effective_config(cfg_text: str, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective-config.txt", "w") as fh:
        fh.write(cfg_text)


def _write_train_log(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(TRAIN_LOG_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r['epoch']},{r['ce_loss']:.8g},{r['lff_loss']:.8g},"
                f"{r['s_count_mean']:.8g},{r['lr']:.8g},{r['id_test_acc']:.8g}\n"
            )


def _forward_in_batches(state: ModelState, inputs: np.ndarray, batch: int = EVAL_BATCH):
    """No-grad forward over normalized inputs; returns (logits, pooled, featurenorms)."""
    logits, pooled, fnorms = [], [], []
    with autodiff.no_grad():
        for start in range(0, inputs.shape[0], batch):
            chunk = Tensor(inputs[start : start + batch])
            fmap, pool, logit = forward_logits(state, chunk)
            logits.append(logit.data.copy())
            pooled.append(pool.data.copy())
            fnorms.append(scoring.featurenorm_score(fmap.data.astype(np.float64)))
    return (
        np.concatenate(logits),
        np.concatenate(pooled),
        np.concatenate([np.atleast_1d(f) for f in fnorms]),
    )


def _accuracy(state: ModelState, inputs: np.ndarray, labels: np.ndarray) -> float:
    logits, _, _ = _forward_in_batches(state, inputs)
    return float((logits.argmax(axis=1) == labels).mean())


def _selection_masks(state, images_norm, labels, prob_threshold, batch=EVAL_BATCH):
    """Background masks for the whole training set from the current model."""
    masks = []
    with autodiff.no_grad():
        for start in range(0, images_norm.shape[0], batch):
            chunk = Tensor(images_norm[start : start + batch])
            fmap = forward_encoder(state, chunk)
            masks.append(
                bgextract.selection_mask(
                    state, fmap.data, labels[start : start + batch], prob_threshold
                )
            )
    return np.concatenate(masks)


def _train(cfg: RunConfig, state: ModelState, lff_enabled: bool):
    """Shared epoch loop; returns per-epoch log rows. Mutates state in place."""
    train_images, train_labels = load_split(cfg.data, "id-train")
    test_images, test_labels = load_split(cfg.data, "id-test")
    test_norm = normalize_images(test_images, state)
    policy = cfg.augmentation_policy()
    optimizer = SGD(
        state.params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    rng_order = derive_rng(cfg.seed, STREAM_DATA_ORDER)
    rng_aug = derive_rng(cfg.seed, STREAM_AUGMENT)
    n = train_images.shape[0]
    extract = lff_enabled and cfg.prob_threshold > 0.0
    apply_hinge = extract and cfg.loss_weight > 0.0

    dump_fh = None
    if cfg.dump_extraction and extract:
        dump_fh = open(cfg.dump_extraction, "w")
        dump_fh.write("batch,sample,j,p,selected\n")

    frozen_masks = None
    if extract and cfg.extraction_refresh == "once":
        frozen_masks = _selection_masks(
            state, normalize_images(train_images, state), train_labels, cfg.prob_threshold
        )

    rows = []
    batch_counter = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            optimizer.lr = cfg.learning_rate(epoch)
            if extract and cfg.extraction_refresh == "epoch":
                frozen_masks = _selection_masks(
                    state,
                    normalize_images(train_images, state),
                    train_labels,
                    cfg.prob_threshold,
                )
            perm = rng_order.permutation(n)
            ce_sum = lff_sum = s_sum = 0.0
            batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                batch = np.stack([augment(train_images[i], policy, rng_aug) for i in idx])
                batch = normalize_images(batch, state)
                labels = train_labels[idx]
                try:
                    x = Tensor(batch)
                    fmap, _, logits = forward_logits(state, x)
                    ce = losses.cross_entropy(logits, labels)
                    loss = ce
                    lff_value = 0.0
                    s_count = 0
                    if extract:
                        grids = bgextract.local_probability_grids(
                            state, fmap.data, labels
                        )
                        b, h, w = grids.shape
                        if cfg.extraction_refresh == "batch":
                            mask = grids.reshape(b, h * w) < cfg.prob_threshold
                        else:
                            mask = frozen_masks[idx]
                        if dump_fh is not None:
                            bgextract.write_extraction_dump(
                                dump_fh, batch_counter, idx, grids, cfg.prob_threshold
                            )
                        si, ji = np.nonzero(mask)
                        s_count = si.shape[0]
                        if apply_hinge and s_count:
                            lff = losses.background_norm_hinge(
                                fmap, si, ji, cfg.norm_margin
                            )
                            lff_value = lff.item()
                            loss = ce + cfg.loss_weight * lff
                    loss_value = loss.item()
                    if not math.isfinite(loss_value):
                        raise ValueError(f"loss is {loss_value}")
                    loss.backward()
                    optimizer.step()
                except ValueError as err:
                    raise PipelineError(
                        f"{cfg.stage} aborted at epoch {epoch}, batch "
                        f"{start // cfg.batch_size}: {err}"
                    ) from err
                ce_sum += ce.item()
                lff_sum += lff_value
                s_sum += s_count
                batches += 1
                batch_counter += 1
            rows.append(
                {
                    "epoch": epoch,
                    "ce_loss": ce_sum / batches,
                    "lff_loss": lff_sum / batches,
                    "s_count_mean": s_sum / batches,
                    "lr": optimizer.lr,
                    "id_test_acc": _accuracy(state, test_norm, test_labels),
                }
            )
    finally:
        if dump_fh is not None:
            dump_fh.close()
    return rows


def _init_state(cfg: RunConfig, manifest) -> ModelState:
    encoder = EncoderConfig(
        input_channels=3,
        widths=tuple(cfg.widths),
        blocks_per_stage=cfg.blocks_per_stage,
        image_side=manifest["image_side"],
    )
    state = init_model(encoder, manifest["class_count"], derive_rng(cfg.seed, STREAM_INIT))
    norm = manifest["normalization"]
    state.norm_mean = np.asarray(norm["mean"], dtype=np.float32)
    state.norm_std = np.asarray(norm["std"], dtype=np.float32)
    return state


def pretrain(cfg: RunConfig):
    """Cross-entropy training from fresh (or resumed) parameters."""
    manifest = load_manifest(cfg.data)
    state = load_checkpoint(cfg.checkpoint) if cfg.checkpoint else _init_state(cfg, manifest)
    rows = _train(cfg, state, lff_enabled=False)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / CHECKPOINT_NAME)
    _write_train_log(out / "train-log.csv", rows)
    return state, rows


def finetune(cfg: RunConfig):
    """Joint-objective fine-tuning from a pre-trained checkpoint."""
    if not cfg.checkpoint:
        raise PipelineError("finetune requires --checkpoint")
    state = load_checkpoint(cfg.checkpoint)
    rows = _train(cfg, state, lff_enabled=True)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / CHECKPOINT_NAME)
    _write_train_log(out / "train-log.csv", rows)
    return state, rows


def _score_split(cfg, state, split_stats, react_threshold, images_norm, score_name):
    logits, pooled, fnorms = split_stats
    if score_name == "energy":
        return scoring.energy_score(logits.astype(np.float64))
    if score_name == "msp":
        return scoring.msp_score(logits.astype(np.float64))
    if score_name == "odin":
        if cfg.odin_perturbation > 0.0:
            chunks = [
                scoring.odin_score(
                    state,
                    images_norm[s : s + EVAL_BATCH],
                    cfg.odin_temperature,
                    cfg.odin_perturbation,
                )
                for s in range(0, images_norm.shape[0], EVAL_BATCH)
            ]
            return np.concatenate([np.atleast_1d(c) for c in chunks])
        return scoring.msp_score(logits.astype(np.float64) / cfg.odin_temperature)
    if score_name == "react_energy":
        return scoring.react_energy_score(pooled.astype(np.float64), state, react_threshold)
    if score_name == "featurenorm":
        return fnorms
    raise PipelineError(f"unknown scoring function {score_name!r}")


def evaluate(cfg: RunConfig):
    """Scores, FPR95/AUROC reports, and histograms for one checkpoint."""
    if not cfg.checkpoint:
        raise PipelineError("eval requires --checkpoint")
    state = load_checkpoint(cfg.checkpoint)
    tag = cfg.tag or Path(cfg.checkpoint).stem
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    splits = ("id-test",) + OOD_SPLITS
    norm_inputs = {}
    stats = {}
    for split in splits:
        images, _ = load_split(cfg.data, split)
        norm_inputs[split] = normalize_images(images, state)
        stats[split] = _forward_in_batches(state, norm_inputs[split])

    react_threshold = None
    if "react_energy" in cfg.scores:
        train_images, _ = load_split(cfg.data, "id-train")
        _, train_pooled, _ = _forward_in_batches(state, normalize_images(train_images, state))
        react_threshold = scoring.fit_react_threshold(
            train_pooled, cfg.react_percentile, fitted_on="id-train"
        )

    split_scores = {
        name: {
            split: np.atleast_1d(
                _score_split(cfg, state, stats[split], react_threshold, norm_inputs[split], name)
            )
            for split in splits
        }
        for name in cfg.scores
    }

    reports = {}
    summary_entries = []
    for name in cfg.scores:
        records = [
            scoring.ScoreRecord(i, split, float(s))
            for split in splits
            for i, s in enumerate(split_scores[name][split])
        ]
        scoring.write_scores_csv(out / f"scores-{tag}-{name}.csv", records)
        id_scores = split_scores[name]["id-test"]
        for split in OOD_SPLITS:
            ood_scores = split_scores[name][split]
            fpr, gamma = metrics.fpr_at_tpr(id_scores, ood_scores)
            report = metrics.EvalReport(
                fpr95=fpr,
                auroc=metrics.auroc(id_scores, ood_scores),
                gamma95=gamma,
                id_count=int(id_scores.size),
                ood_count=int(ood_scores.size),
            )
            reports[(split, name)] = report
            with open(out / f"eval-{tag}-{split}-{name}.json", "w") as fh:
                fh.write(report.to_json() + "\n")
            summary_entries.append({"model": tag, "ood_split": split, "score": name, **report.to_dict()})
            pooled_all = np.concatenate([id_scores, ood_scores])
            lo, hi = float(pooled_all.min()), float(pooled_all.max())
            if hi <= lo:
                hi = lo + 1.0
            metrics.write_histogram_csv(
                out / f"hist-score-{tag}-{name}-{split}.csv",
                cfg.hist_bins,
                (lo, hi),
                metrics.clamped_histogram(id_scores, cfg.hist_bins, (lo, hi)),
                metrics.clamped_histogram(ood_scores, cfg.hist_bins, (lo, hi)),
            )

    norms = {split: np.sqrt((stats[split][1].astype(np.float64) ** 2).sum(axis=1)) for split in splits}
    with open(out / f"norms-{tag}.csv", "w") as fh:
        fh.write("id,split,norm\n")
        for split in splits:
            for i, v in enumerate(norms[split]):
                fh.write(f"{i},{split},{v:.10g}\n")
    for split in OOD_SPLITS:
        pooled_all = np.concatenate([norms["id-test"], norms[split]])
        lo, hi = 0.0, float(pooled_all.max()) or 1.0
        metrics.write_histogram_csv(
            out / f"hist-norm-{tag}-{split}.csv",
            cfg.hist_bins,
            (lo, hi),
            metrics.clamped_histogram(norms["id-test"], cfg.hist_bins, (lo, hi)),
            metrics.clamped_histogram(norms[split], cfg.hist_bins, (lo, hi)),
        )

    summary = {
        "model": tag,
        "checkpoint": str(cfg.checkpoint),
        "data": str(cfg.data),
        "entries": summary_entries,
    }
    with open(out / f"eval-summary-{tag}.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return reports


def sweep(cfg: RunConfig, parameter: str, values):
    """Fine-tune + evaluate once per value from the same checkpoint and seed.

    The sweep CSV tracks the energy score on the background-only OOD split.
    """
    if parameter not in ("prob_threshold", "norm_margin", "loss_weight"):
        raise PipelineError(
            f"sweep parameter must be prob_threshold, norm_margin or loss_weight, "
            f"got {parameter!r}"
        )
    if not values:
        raise PipelineError("sweep requires at least one value")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        sub_out = out / f"{parameter}-{value:g}"
        ft_cfg = replace(cfg, **{parameter: value, "out": str(sub_out), "stage": "finetune"})
        finetune(ft_cfg)
        eval_cfg = replace(
            ft_cfg,
            stage="eval",
            checkpoint=str(sub_out / CHECKPOINT_NAME),
            out=str(sub_out),
            tag=f"{parameter}-{value:g}",
        )
        reports = evaluate(eval_cfg)
        report = reports[("ood-background", "energy")]
        rows.append((value, report.fpr95, report.auroc))
    with open(out / "sweep.csv", "w") as fh:
        fh.write("value,fpr95,auroc\n")
        for value, fpr, auc in rows:
            fh.write(f"{value:g},{fpr:.10g},{auc:.10g}\n")
    return rows


def _write_grid_csv(path, grid: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in grid:
            fh.write(",".join(f"{v:.8g}" for v in row) + "\n")


def report(run_dir, out_dir=None, data_dir=None, heatmap_samples: int = 8):
    """Aggregate eval outputs under run_dir into report.json and emit
    per-cell probability/norm heatmap grids for a sample of images."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = sorted(run_dir.rglob("eval-summary-*.json"))
    if not summaries:
        raise PipelineError(f"no eval outputs (eval-summary-*.json) found under {run_dir}")
    entries = []
    heatmap_dir = out_dir / "heatmaps"
    heatmap_dir.mkdir(parents=True, exist_ok=True)
    for summary_path in summaries:
        with open(summary_path) as fh:
            summary = json.load(fh)
        entries.extend(summary["entries"])
        checkpoint = Path(summary["checkpoint"])
        if not checkpoint.exists():
            raise PipelineError(f"missing checkpoint named by {summary_path}: {checkpoint}")
        data = Path(data_dir) if data_dir else Path(summary["data"])
        if not (data / "manifest.json").exists():
            raise PipelineError(f"missing dataset manifest: {data / 'manifest.json'}")
        state = load_checkpoint(checkpoint)
        tag = summary["model"]
        for split in ("id-test",) + OOD_SPLITS:
            images, _ = load_split(data, split)
            take = min(heatmap_samples, images.shape[0])
            if take == 0:
                continue
            inputs = normalize_images(images[:take], state)
            with autodiff.no_grad():
                fmap, _, logits = forward_logits(state, Tensor(inputs))
            predicted = logits.data.argmax(axis=1)
            grids = bgextract.local_probability_grids(state, fmap.data, predicted)
            cells = fmap.data
            norms = np.sqrt((cells.astype(np.float64) ** 2).sum(axis=1))
            for i in range(take):
                _write_grid_csv(heatmap_dir / f"{tag}-{split}-{i:03d}-prob.csv", grids[i])
                _write_grid_csv(heatmap_dir / f"{tag}-{split}-{i:03d}-norm.csv", norms[i])
    with open(out_dir / "report.json", "w") as fh:
        json.dump({"entries": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return entries
