"""Command-line entry point.

Exit codes: 0 success, 1 usage error (usage text on stderr), 2 runtime
failure (diagnostic on stderr). Flag values override config-file values;
defaults fill the rest; the effective configuration is echoed to
<out>/effective-config.txt. OODKIT_THREADS caps BLAS parallelism and
defaults to 1 so runs are bit-exact.

Heavy imports are deferred until after thread caps are applied, which only
matters when this module is the process entry point.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _apply_thread_cap():
    threads = os.environ.get("OODKIT_THREADS", "1")
    for var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, threads)


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text):
    if isinstance(text, tuple):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _parse_str_tuple(text):
    if isinstance(text, tuple):
        return text
    text = str(text).strip()
    if not text:
        return ()
    return tuple(v.strip() for v in text.split(","))


def _parse_float_tuple(text):
    if isinstance(text, tuple):
        return tuple(float(v) for v in text)
    text = str(text).strip()
    if not text:
        return ()
    return tuple(float(v) for v in text.split(","))


_SCHEMA = {
    "data": str,
    "out": str,
    "run": str,
    "checkpoint": str,
    "features": str,
    "split": str,
    "tag": str,
    "dump_extraction": str,
    "dump_features": str,
    "extraction_refresh": str,
    "parameter": str,
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "crop_padding": int,
    "blocks_per_stage": int,
    "hist_bins": int,
    "heatmap_samples": int,
    "class_count": int,
    "image_side": int,
    "texture_count": int,
    "id_train_count": int,
    "id_test_count": int,
    "ood_count": int,
    "lr": float,
    "lr_decay_factor": float,
    "momentum": float,
    "weight_decay": float,
    "prob_threshold": float,
    "norm_margin": float,
    "loss_weight": float,
    "react_percentile": float,
    "odin_temperature": float,
    "odin_perturbation": float,
    "flip": _parse_bool,
    "color_jitter": _parse_bool,
    "lr_decay_epochs": _parse_int_tuple,
    "widths": _parse_int_tuple,
    "scores": _parse_str_tuple,
    "values": _parse_float_tuple,
}

_GEN_KEYS = (
    "seed",
    "out",
    "class_count",
    "image_side",
    "texture_count",
    "id_train_count",
    "id_test_count",
    "ood_count",
)
_TRAIN_KEYS = (
    "data",
    "out",
    "checkpoint",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay_factor",
    "lr_decay_epochs",
    "momentum",
    "weight_decay",
    "crop_padding",
    "flip",
    "color_jitter",
    "widths",
    "blocks_per_stage",
)
_FINETUNE_KEYS = _TRAIN_KEYS + (
    "prob_threshold",
    "norm_margin",
    "loss_weight",
    "extraction_refresh",
    "dump_extraction",
)
_EVAL_KEYS = (
    "data",
    "out",
    "checkpoint",
    "seed",
    "scores",
    "react_percentile",
    "odin_temperature",
    "odin_perturbation",
    "hist_bins",
    "tag",
)


def _read_config_file(path):
    entries = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def _gather(args, keys, defaults):
    """defaults <- config file <- CLI flags, coerced through the schema."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in _read_config_file(config_path).items():
            if key not in keys:
                raise ValueError(f"unknown config key {key!r} (valid: {', '.join(sorted(keys))})")
            merged[key] = _SCHEMA[key](value)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = _SCHEMA[key](value)
    return merged


def _echo_config(mapping, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    with open(out_dir / "effective-config.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _dedupe(keys):
    seen = []
    for key in keys:
        if key not in seen:
            seen.append(key)
    return tuple(seen)


def build_parser() -> _Parser:
    parser = _Parser(prog="oodkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, keys, func, required=()):
        keys = _dedupe(keys)
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        for key in keys:
            p.add_argument(
                f"--{key.replace('_', '-')}", dest=key, default=None,
                required=key in required,
            )
        for key in required:
            if key not in keys:
                p.add_argument(f"--{key.replace('_', '-')}", dest=key, required=True)
        p.set_defaults(func=func, keys=keys)
        return p

    add("gen-data", _GEN_KEYS, cmd_gen_data, required=("out",))
    add("pretrain", _TRAIN_KEYS, cmd_pretrain, required=("data", "out"))
    add("finetune", _FINETUNE_KEYS, cmd_finetune, required=("data", "out", "checkpoint"))
    add("eval", _EVAL_KEYS, cmd_eval, required=("data", "out", "checkpoint"))
    add(
        "score",
        _EVAL_KEYS + ("features", "split", "dump_features"),
        cmd_score,
        required=("checkpoint", "out"),
    )
    add(
        "sweep",
        _FINETUNE_KEYS + _EVAL_KEYS,
        cmd_sweep,
        required=("data", "out", "checkpoint", "parameter", "values"),
    )
    add(
        "report",
        ("run", "out", "data", "heatmap_samples"),
        cmd_report,
        required=("run",),
    )
    return parser


def _run_defaults(stage):
    from dataclasses import MISSING, fields

    from .pipeline import STAGE_DEFAULTS, RunConfig

    defaults = {}
    for f in fields(RunConfig):
        if f.name != "stage" and f.default is not MISSING:
            defaults[f.name] = f.default
    defaults.update(STAGE_DEFAULTS.get(stage, {}))
    return defaults


def cmd_gen_data(args) -> int:
    from .data import BenchmarkConfig, generate_benchmark

    defaults = {
        "seed": 7,
        "class_count": 6,
        "image_side": 32,
        "texture_count": 16,
        "id_train_count": 6000,
        "id_test_count": 1200,
        "ood_count": 1200,
    }
    merged = _gather(args, _GEN_KEYS, defaults)
    out = merged.pop("out")
    _echo_config({**merged, "out": out}, out)
    config = BenchmarkConfig(**merged)
    generate_benchmark(config, out)
    print(f"wrote benchmark (seed {config.seed}) to {out}")
    return 0


def _train_command(args, stage) -> int:
    from .pipeline import RunConfig, finetune, pretrain

    keys = args.keys
    merged = _gather(args, keys, {k: v for k, v in _run_defaults(stage).items() if k in keys})
    cfg = RunConfig(stage=stage, **merged)
    _echo_config({"stage": stage, **merged}, cfg.out)
    state, rows = (pretrain if stage == "pretrain" else finetune)(cfg)
    last = rows[-1] if rows else None
    acc = f", final id-test acc {last['id_test_acc']:.4f}" if last else ""
    print(f"{stage} finished: {len(rows)} epochs{acc}; checkpoint in {cfg.out}")
    return 0


def cmd_pretrain(args) -> int:
    return _train_command(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train_command(args, "finetune")


def cmd_eval(args) -> int:
    from .pipeline import RunConfig, evaluate

    merged = _gather(
        args, _EVAL_KEYS, {k: v for k, v in _run_defaults("eval").items() if k in _EVAL_KEYS}
    )
    cfg = RunConfig(stage="eval", **merged)
    _echo_config({"stage": "eval", **merged}, cfg.out)
    reports = evaluate(cfg)
    for (split, name), rep in sorted(reports.items()):
        print(f"{split} {name}: fpr95={rep.fpr95:.4f} auroc={rep.auroc:.4f}")
    return 0


def cmd_score(args) -> int:
    import numpy as np

    from . import scoring
    from .model import load_checkpoint, normalize_images
    from .pipeline import _forward_in_batches
    from .data import load_split

    keys = args.keys
    defaults = {k: v for k, v in _run_defaults("eval").items() if k in keys}
    defaults["scores"] = ("energy",)
    defaults["split"] = "id-test"
    merged = _gather(args, keys, defaults)
    _echo_config(merged, merged["out"])
    state = load_checkpoint(merged["checkpoint"])
    tag = merged.get("tag") or Path(merged["checkpoint"]).stem
    out = Path(merged["out"])

    if merged.get("features"):
        feats = scoring.read_fvec(merged["features"])
        supported = {"energy", "msp"}
        bad = set(merged["scores"]) - supported
        if bad:
            raise ValueError(
                f"scoring function(s) {sorted(bad)} need image input, not a feature dump"
            )
        with_head = {
            "energy": lambda: scoring.energy_score(_head_logits(state, feats)),
            "msp": lambda: scoring.msp_score(_head_logits(state, feats)),
        }
        split = "features"
        for name in merged["scores"]:
            values = np.atleast_1d(with_head[name]())
            records = [scoring.ScoreRecord(i, split, float(v)) for i, v in enumerate(values)]
            scoring.write_scores_csv(out / f"scores-{tag}-{name}.csv", records)
        print(f"scored {feats.shape[0]} feature vectors -> {out}")
        return 0

    if not merged.get("data"):
        raise ValueError("score requires either --features or --data with --split")
    images, _ = load_split(merged["data"], merged["split"])
    inputs = normalize_images(images, state)
    logits, pooled, fnorms = _forward_in_batches(state, inputs)
    if merged.get("dump_features"):
        scoring.write_fvec(merged["dump_features"], pooled)
    react_threshold = None
    if "react_energy" in merged["scores"]:
        train_images, _ = load_split(merged["data"], "id-train")
        _, train_pooled, _ = _forward_in_batches(state, normalize_images(train_images, state))
        react_threshold = scoring.fit_react_threshold(train_pooled, merged["react_percentile"])
    from types import SimpleNamespace

    from .pipeline import _score_split

    pseudo_cfg = SimpleNamespace(
        odin_temperature=merged["odin_temperature"],
        odin_perturbation=merged["odin_perturbation"],
    )
    for name in merged["scores"]:
        values = np.atleast_1d(
            _score_split(pseudo_cfg, state, (logits, pooled, fnorms), react_threshold, inputs, name)
        )
        records = [
            scoring.ScoreRecord(i, merged["split"], float(v)) for i, v in enumerate(values)
        ]
        scoring.write_scores_csv(out / f"scores-{tag}-{name}.csv", records)
    print(f"scored {images.shape[0]} images from {merged['split']} -> {out}")
    return 0


def _head_logits(state, feats):
    import numpy as np

    from . import autodiff
    from .autodiff import Tensor
    from .model import classify

    with autodiff.no_grad():
        return classify(state, Tensor(feats)).data.astype(np.float64)


def cmd_sweep(args) -> int:
    from .pipeline import RunConfig, sweep

    keys = args.keys
    merged = _gather(args, keys, {k: v for k, v in _run_defaults("finetune").items() if k in keys})
    parameter = _SCHEMA["parameter"](args.parameter)
    values = _SCHEMA["values"](args.values)
    cfg = RunConfig(stage="finetune", **merged)
    _echo_config({"stage": "sweep", "parameter": parameter, "values": values, **merged}, cfg.out)
    rows = sweep(cfg, parameter, values)
    for value, fpr, auc in rows:
        print(f"{parameter}={value:g}: fpr95={fpr:.4f} auroc={auc:.4f}")
    return 0


def cmd_report(args) -> int:
    from .pipeline import report

    merged = _gather(args, ("run", "out", "data", "heatmap_samples"), {"heatmap_samples": 8})
    out = merged.get("out") or merged["run"]
    _echo_config({k: v for k, v in {**merged, "out": out}.items() if v is not None}, out)
    entries = report(
        merged["run"],
        out_dir=out,
        data_dir=merged.get("data"),
        heatmap_samples=merged["heatmap_samples"],
    )
    print(f"report.json with {len(entries)} entries -> {out}")
    return 0


def run(argv=None) -> int:
    """Parse argv and execute one subcommand; returns the process exit code."""
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except Exception as err:  # runtime failures map to exit code 2
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> int:
    return run()


if __name__ == "__main__":
    sys.exit(main())
