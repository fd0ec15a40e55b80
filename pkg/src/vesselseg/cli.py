"""Command line entry points: synth, train, distill, infer, widths, eval.

One binary with subcommands wires the package into reproducible runs. A JSON
configuration file is the source of truth for every run; the common flags
--seed, --out, and --threads override the matching config keys. Every run
writes a resolved-config snapshot (defaults and overrides applied) beside
its outputs, so a finished directory documents exactly how it was produced,
and rerunning the same resolved config yields byte-identical files.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(malformed files, missing inputs, mismatched shapes), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data_io
from .data_io import (
    load_dataset,
    load_image,
    load_probability_map,
    load_width_table,
    save_dataset,
    save_image,
    save_width_table,
    synth_generate,
    synth_spec_from_dict,
    write_width_summary,
)
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .losses import LossWeights
from .network import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import (
    AugmentToggles,
    TrainConfig,
    distill_train,
    finetune_teacher,
    sliding_window_infer,
    train,
    write_history,
)
from .vesselmetrics import (
    DiameterStats,
    anchored_vessel_diameters,
    auc,
    confusion_metrics,
    mape,
    width_map,
)

PROG = "vesselseg"

_CLASS_CODES = {"artery": 1, "vein": 2, "vessel": 1}

# Overlay palette: artery pure red, vein pure blue on the input luminance.
# A binary model's single foreground class renders red; any class beyond
# the second renders green so it stays visible.
_OVERLAY_RGB = {1: (1.0, 0.0, 0.0), 2: (0.0, 0.0, 1.0)}
_OVERLAY_DEFAULT = (0.0, 1.0, 0.0)


def _class_names(num_classes: int) -> tuple[str, ...]:
    if num_classes == 2:
        return ("vessel",)
    if num_classes == 3:
        return ("artery", "vein")
    return tuple(f"class{k}" for k in range(1, num_classes))


# -- config plumbing ---------------------------------------------------------------


def _require_keys(raw: dict, allowed: set[str], context: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown key(s) {unknown}")


def _as_int(value, context: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{context}: expected an integer, got {value!r}")
    return value


def _as_float(value, context: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{context}: expected a number, got {value!r}")
    return float(value)


def _as_bool(value, context: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{context}: expected true or false, got {value!r}")
    return value


def _as_str(value, context: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{context}: expected a string, got {value!r}")
    return value


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return raw


def _resolve_common(raw: dict, args) -> dict:
    """Apply flag overrides and defaults for out_dir / seed / threads."""
    resolved = dict(raw)
    if args.out is not None:
        resolved["out_dir"] = args.out
    if args.seed is not None:
        resolved["seed"] = args.seed
    if args.threads is not None:
        resolved["threads"] = args.threads
    if "out_dir" not in resolved:
        raise ConfigError('out_dir is required (config key "out_dir" or --out)')
    resolved["out_dir"] = _as_str(resolved["out_dir"], "out_dir")
    resolved["seed"] = _as_int(resolved.get("seed", 0), "seed")
    resolved["threads"] = _as_int(resolved.get("threads", 1), "threads")
    if resolved["threads"] < 1:
        raise ConfigError(f"threads must be >= 1, got {resolved['threads']}")
    return resolved


def _write_snapshot(config: dict, command: str) -> None:
    out_dir = config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    snapshot = {"command": command}
    snapshot.update(config)
    path = os.path.join(out_dir, f"{command}_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")


def _parse_toggles(raw: dict) -> AugmentToggles:
    _require_keys(raw, {"rotation", "flip", "contrast"}, "train.augment")
    return AugmentToggles(
        rotation=_as_bool(raw.get("rotation", True), "train.augment.rotation"),
        flip=_as_bool(raw.get("flip", True), "train.augment.flip"),
        contrast=_as_bool(raw.get("contrast", True), "train.augment.contrast"),
    )


def _parse_weights(raw: dict) -> LossWeights:
    _require_keys(raw, {"dice", "ce", "recon", "temperature", "distill"},
                  "train.weights")
    return LossWeights(
        dice=_as_float(raw.get("dice", 1.0), "train.weights.dice"),
        ce=_as_float(raw.get("ce", 1.0), "train.weights.ce"),
        recon=_as_float(raw.get("recon", 0.001), "train.weights.recon"),
        temperature=_as_float(raw.get("temperature", 3.0), "train.weights.temperature"),
        distill=_as_float(raw.get("distill", 0.1), "train.weights.distill"),
    )


_TRAIN_KEYS = {"patch_size", "batch_size", "epochs", "lr0",
               "lr_halving_period_epochs", "validation_interval",
               "augment", "weights"}


def _parse_train_config(raw: dict, seed: int, context: str = "train") -> TrainConfig:
    _require_keys(raw, _TRAIN_KEYS, context)
    config = TrainConfig(
        patch_size=_as_int(raw.get("patch_size", 256), f"{context}.patch_size"),
        batch_size=_as_int(raw.get("batch_size", 6), f"{context}.batch_size"),
        epochs=_as_int(raw.get("epochs", 600), f"{context}.epochs"),
        lr0=_as_float(raw.get("lr0", 0.001), f"{context}.lr0"),
        lr_halving_period_epochs=_as_int(
            raw.get("lr_halving_period_epochs", 50),
            f"{context}.lr_halving_period_epochs"),
        validation_interval=_as_int(
            raw.get("validation_interval", 5), f"{context}.validation_interval"),
        augment=_parse_toggles(raw.get("augment", {})),
        weights=_parse_weights(raw.get("weights", {})),
        seed=seed,
    )
    config.validate()
    return config


def _parse_model_config(raw: dict, default_channels: int,
                        default_classes: int = 3,
                        context: str = "model") -> ModelConfig:
    _require_keys(raw, {"input_channels", "num_classes", "base_channels",
                        "dropout_rate", "aux_enabled"}, context)
    config = ModelConfig(
        input_channels=_as_int(raw.get("input_channels", default_channels),
                               f"{context}.input_channels"),
        num_classes=_as_int(raw.get("num_classes", default_classes),
                            f"{context}.num_classes"),
        base_channels=_as_int(raw.get("base_channels", 32),
                              f"{context}.base_channels"),
        dropout_rate=_as_float(raw.get("dropout_rate", 0.1),
                               f"{context}.dropout_rate"),
        aux_enabled=_as_bool(raw.get("aux_enabled", True),
                             f"{context}.aux_enabled"),
    )
    config.validate()
    return config


def _train_section_snapshot(config: TrainConfig) -> dict:
    return {
        "patch_size": config.patch_size,
        "batch_size": config.batch_size,
        "epochs": config.epochs,
        "lr0": config.lr0,
        "lr_halving_period_epochs": config.lr_halving_period_epochs,
        "validation_interval": config.validation_interval,
        "augment": {"rotation": config.augment.rotation,
                    "flip": config.augment.flip,
                    "contrast": config.augment.contrast},
        "weights": {"dice": config.weights.dice,
                    "ce": config.weights.ce,
                    "recon": config.weights.recon,
                    "temperature": config.weights.temperature,
                    "distill": config.weights.distill},
    }


def _model_section_snapshot(config: ModelConfig) -> dict:
    return {
        "input_channels": config.input_channels,
        "num_classes": config.num_classes,
        "base_channels": config.base_channels,
        "dropout_rate": config.dropout_rate,
        "aux_enabled": config.aux_enabled,
    }


def _list_pngs(directory: str) -> list[str]:
    if not os.path.isdir(directory):
        raise DataError(f"not a directory: {directory}")
    return sorted(f for f in os.listdir(directory) if f.endswith(".png"))


# -- synth -------------------------------------------------------------------------


def cmd_synth(config: dict) -> int:
    _require_keys(config, {"out_dir", "seed", "threads", "spec", "spec_path",
                           "count", "val_count", "test_count"}, "synth config")
    if ("spec" in config) == ("spec_path" in config):
        raise ConfigError('synth config needs exactly one of "spec" or "spec_path"')
    if "spec_path" in config:
        spec_raw = _load_config_file(_as_str(config["spec_path"], "spec_path"))
    else:
        spec_raw = config["spec"]
        if not isinstance(spec_raw, dict):
            raise ConfigError("spec must be a JSON object")
    spec = synth_spec_from_dict(spec_raw)

    count = _as_int(config.get("count", 0), "count")
    val_count = _as_int(config.get("val_count", 0), "val_count")
    test_count = _as_int(config.get("test_count", 0), "test_count")
    if count < 0 or val_count < 0 or test_count < 0:
        raise ConfigError("count, val_count, and test_count must be >= 0")
    if val_count + test_count > count:
        raise ConfigError(
            f"val_count + test_count = {val_count + test_count} exceeds count = {count}")

    resolved = dict(config)
    resolved["spec"] = data_io.synth_spec_to_dict(spec)
    resolved.pop("spec_path", None)
    resolved.update(count=count, val_count=val_count, test_count=test_count)
    _write_snapshot(resolved, "synth")

    out_dir = config["out_dir"]
    seed = config["seed"]
    samples = []
    tables = []
    for i in range(count):
        sample, table = synth_generate(spec, seed + i)
        samples.append(sample)
        tables.append(table)
    train_count = count - val_count - test_count
    splits = {}
    for i, sample in enumerate(samples):
        if i < train_count:
            splits[sample.id] = "train"
        elif i < train_count + val_count:
            splits[sample.id] = "val"
        else:
            splits[sample.id] = "test"
    manifest_path = save_dataset(samples, out_dir, splits)
    for sample, table in zip(samples, tables):
        save_width_table(table, os.path.join(out_dir, "widths", f"{sample.id}.tsv"))
    print(f"wrote {count} samples to {out_dir} (manifest: {manifest_path})")
    return 0


# -- train -------------------------------------------------------------------------


def cmd_train(config: dict) -> int:
    _require_keys(config, {"out_dir", "seed", "threads", "manifest",
                           "train_split", "val_split", "model", "train"},
                  "train config")
    manifest = _as_str(config.get("manifest", ""), "manifest")
    if not manifest:
        raise ConfigError('train config needs a "manifest" path')
    train_split = _as_str(config.get("train_split", "train"), "train_split")
    val_split = _as_str(config.get("val_split", "val"), "val_split")

    dataset = load_dataset(manifest, train_split)
    val_set = load_dataset(manifest, val_split)
    if not dataset:
        raise DataError(f"{manifest}: no samples in split {train_split!r}")
    if not val_set:
        raise DataError(f"{manifest}: no samples in split {val_split!r}")

    seed = config["seed"]
    channels = dataset[0].image.shape[0]
    model_config = _parse_model_config(config.get("model", {}), channels)
    train_config = _parse_train_config(config.get("train", {}), seed)

    resolved = dict(config)
    resolved["model"] = _model_section_snapshot(model_config)
    resolved["train"] = _train_section_snapshot(train_config)
    resolved.update(manifest=manifest, train_split=train_split, val_split=val_split)
    _write_snapshot(resolved, "train")

    model = build_model(model_config, init_seed=seed)
    best, history = train(model, dataset, val_set, train_config)

    out_dir = config["out_dir"]
    ckpt_path = os.path.join(out_dir, "best.ckpt")
    save_checkpoint(best, ckpt_path)
    write_history(history, os.path.join(out_dir, "history.tsv"))
    best_f1 = history.best_mean_val_f1()
    score = "-" if best_f1 is None else f"{best_f1:.6f}"
    print(f"wrote {ckpt_path} (best mean val F1: {score})")
    return 0


# -- distill -----------------------------------------------------------------------


def cmd_distill(config: dict) -> int:
    _require_keys(config, {"out_dir", "seed", "threads", "manifest",
                           "train_split", "val_split", "teacher_checkpoint",
                           "finetune_teacher", "finetune", "student_model",
                           "train"}, "distill config")
    manifest = _as_str(config.get("manifest", ""), "manifest")
    if not manifest:
        raise ConfigError('distill config needs a "manifest" path')
    teacher_path = _as_str(config.get("teacher_checkpoint", ""), "teacher_checkpoint")
    if not teacher_path:
        raise ConfigError('distill config needs a "teacher_checkpoint" path')
    if not os.path.exists(teacher_path):
        raise DataError(f"teacher checkpoint not found: {teacher_path}")
    train_split = _as_str(config.get("train_split", "train"), "train_split")
    val_split = _as_str(config.get("val_split", "val"), "val_split")
    run_finetune = _as_bool(config.get("finetune_teacher", False), "finetune_teacher")

    dataset = load_dataset(manifest, train_split)
    val_set = load_dataset(manifest, val_split)
    if not dataset:
        raise DataError(f"{manifest}: no samples in split {train_split!r}")
    if not val_set:
        raise DataError(f"{manifest}: no samples in split {val_split!r}")

    seed = config["seed"]
    out_dir = config["out_dir"]
    train_config = _parse_train_config(config.get("train", {}), seed)
    finetune_config = None
    if run_finetune:
        finetune_config = _parse_train_config(
            config.get("finetune", config.get("train", {})), seed, "finetune")
    elif "finetune" in config:
        raise ConfigError('"finetune" section given but finetune_teacher is false')

    finetune_history = None
    if run_finetune:
        teacher, finetune_history = finetune_teacher(
            teacher_path, dataset, val_set, finetune_config)
    else:
        teacher = load_checkpoint(teacher_path)

    channels = dataset[0].image.shape[0]
    student_config = _parse_model_config(
        config.get("student_model", {}), channels,
        default_classes=teacher.config.num_classes, context="student_model")

    resolved = dict(config)
    resolved["student_model"] = _model_section_snapshot(student_config)
    resolved["train"] = _train_section_snapshot(train_config)
    if run_finetune:
        resolved["finetune"] = _train_section_snapshot(finetune_config)
    resolved.update(manifest=manifest, train_split=train_split,
                    val_split=val_split, teacher_checkpoint=teacher_path,
                    finetune_teacher=run_finetune)
    _write_snapshot(resolved, "distill")

    if run_finetune:
        save_checkpoint(teacher, os.path.join(out_dir, "teacher_finetuned.ckpt"))
        write_history(finetune_history, os.path.join(out_dir, "finetune_history.tsv"))

    best, history = distill_train(teacher, student_config, dataset, val_set,
                                  train_config)
    ckpt_path = os.path.join(out_dir, "student.ckpt")
    save_checkpoint(best, ckpt_path)
    write_history(history, os.path.join(out_dir, "history.tsv"))
    best_f1 = history.best_mean_val_f1()
    score = "-" if best_f1 is None else f"{best_f1:.6f}"
    print(f"wrote {ckpt_path} (best mean val F1: {score})")
    return 0


# -- infer -------------------------------------------------------------------------


def _overlay(image: np.ndarray, pred: np.ndarray) -> np.ndarray:
    luminance = image.mean(axis=0)
    rgb = np.stack([luminance, luminance, luminance])
    for cls in range(1, int(pred.max(initial=0)) + 1):
        hit = pred == cls
        r, g, b = _OVERLAY_RGB.get(cls, _OVERLAY_DEFAULT)
        rgb[0][hit] = r
        rgb[1][hit] = g
        rgb[2][hit] = b
    return rgb


def cmd_infer(config: dict) -> int:
    _require_keys(config, {"out_dir", "seed", "threads", "checkpoint",
                           "images_dir", "patch_size", "overlap_fraction"},
                  "infer config")
    ckpt_path = _as_str(config.get("checkpoint", ""), "checkpoint")
    if not ckpt_path:
        raise ConfigError('infer config needs a "checkpoint" path')
    images_dir = _as_str(config.get("images_dir", ""), "images_dir")
    if not images_dir:
        raise ConfigError('infer config needs an "images_dir" path')
    patch_size = _as_int(config.get("patch_size", 256), "patch_size")
    overlap = _as_float(config.get("overlap_fraction", 0.5), "overlap_fraction")

    resolved = dict(config)
    resolved.update(checkpoint=ckpt_path, images_dir=images_dir,
                    patch_size=patch_size, overlap_fraction=overlap)
    _write_snapshot(resolved, "infer")

    if not os.path.exists(ckpt_path):
        raise DataError(f"checkpoint not found: {ckpt_path}")
    model = load_checkpoint(ckpt_path)
    names = _class_names(model.config.num_classes)
    files = _list_pngs(images_dir)
    if not files:
        print(f"warning: no .png images found in {images_dir}", file=sys.stderr)
        return 0

    out_dir = config["out_dir"]
    for fname in files:
        image = load_image(os.path.join(images_dir, fname))
        if image.shape[0] != model.config.input_channels:
            raise DataError(
                f"{fname}: image has {image.shape[0]} channel(s), "
                f"checkpoint expects {model.config.input_channels}")
        prob = sliding_window_infer(model, image, patch_size, overlap)
        stem = fname[:-len(".png")]
        for cls, name in enumerate(names, start=1):
            data_io.export_probability_map(
                prob[cls], os.path.join(out_dir, "prob", f"{stem}.{name}.png"))
        pred = prob.argmax(axis=0)
        save_image(_overlay(image, pred),
                   os.path.join(out_dir, "overlay", f"{stem}.png"))
    print(f"inferred {len(files)} image(s) into {out_dir}")
    return 0


# -- widths ------------------------------------------------------------------------


def _width_sources(config: dict) -> dict[str, dict[str, np.ndarray]]:
    """stem -> {class name -> binary segmentation}, from labels or maps."""
    labels_dir = config.get("labels_dir")
    prob_dir = config.get("prob_dir")
    if (labels_dir is None) == (prob_dir is None):
        raise ConfigError('widths config needs exactly one of "labels_dir" or "prob_dir"')
    sources: dict[str, dict[str, np.ndarray]] = {}
    if labels_dir is not None:
        labels_dir = _as_str(labels_dir, "labels_dir")
        for fname in _list_pngs(labels_dir):
            labels = data_io.load_label_file(os.path.join(labels_dir, fname))
            stem = fname[:-len(".png")]
            sources[stem] = {
                "artery": (labels == 1).astype(np.uint8),
                "vein": (labels == 2).astype(np.uint8),
            }
        return sources
    prob_dir = _as_str(prob_dir, "prob_dir")
    for fname in _list_pngs(prob_dir):
        stem_class = fname[:-len(".png")]
        stem, _, name = stem_class.rpartition(".")
        if not stem or name not in _CLASS_CODES:
            raise DataError(
                f"{fname}: expected <stem>.<class>.png with class one of "
                f"{sorted(_CLASS_CODES)}")
        prob = load_probability_map(os.path.join(prob_dir, fname))
        sources.setdefault(stem, {})[name] = (prob >= 0.5).astype(np.uint8)
    return sources


def cmd_widths(config: dict) -> int:
    _require_keys(config, {"out_dir", "seed", "threads", "labels_dir",
                           "prob_dir", "pixel_size_microns", "reference_dir"},
                  "widths config")
    pixel_size = _as_float(
        config.get("pixel_size_microns", data_io.DEFAULT_PIXEL_SIZE_MICRONS),
        "pixel_size_microns")
    if pixel_size <= 0:
        raise ConfigError(f"pixel_size_microns must be positive, got {pixel_size}")
    reference_dir = config.get("reference_dir")
    if reference_dir is not None:
        reference_dir = _as_str(reference_dir, "reference_dir")

    resolved = dict(config)
    resolved["pixel_size_microns"] = pixel_size
    _write_snapshot(resolved, "widths")

    sources = _width_sources(config)
    if not sources:
        source_dir = config.get("labels_dir", config.get("prob_dir"))
        raise DataError(f"{source_dir}: no .png segmentations found")
    out_dir = config["out_dir"]
    class_order = [n for n in ("artery", "vein", "vessel")
                   if any(n in segs for segs in sources.values())]
    diameters: dict[str, list[np.ndarray]] = {n: [] for n in class_order}
    refs: dict[str, list[float]] = {n: [] for n in class_order}
    ests: dict[str, list[float]] = {n: [] for n in class_order}

    for stem in sorted(sources):
        table = None
        if reference_dir is not None:
            table_path = os.path.join(reference_dir, f"{stem}.tsv")
            if os.path.exists(table_path):
                table = load_width_table(table_path)
        for name in class_order:
            if name not in sources[stem]:
                continue
            seg = sources[stem][name]
            wm = width_map(seg, pixel_size)
            data_io.export_width_artifacts(
                wm.data, pixel_size,
                os.path.join(out_dir, "maps", f"{stem}.{name}.png"))
            diameters[name].append(wm.diameters_px)
            if table is not None:
                records = table.for_class(_CLASS_CODES[name])
                if records:
                    anchors = [r.anchor_yx for r in records]
                    est = anchored_vessel_diameters(seg, anchors, pixel_size)
                    refs[name].extend(r.width_px for r in records)
                    ests[name].extend(est.tolist())

    def stats_of(samples: list[np.ndarray]) -> DiameterStats:
        pooled = np.concatenate(samples) if samples else np.empty(0)
        if pooled.size == 0:
            return DiameterStats(0.0, 0.0, 0)
        microns = pooled * pixel_size
        return DiameterStats(float(microns.mean()), float(microns.std()),
                             int(pooled.size))

    rows = []
    for name in class_order:
        mape_value = mape(refs[name], ests[name]) if refs[name] else None
        rows.append((name, stats_of(diameters[name]), mape_value))
    all_refs = [v for name in class_order for v in refs[name]]
    all_ests = [v for name in class_order for v in ests[name]]
    all_mape = mape(all_refs, all_ests) if all_refs else None
    rows.append(("all", stats_of([d for name in class_order
                                  for d in diameters[name]]), all_mape))

    summary_path = os.path.join(out_dir, "width_summary.tsv")
    write_width_summary(rows, summary_path)
    with open(summary_path, "r", encoding="utf-8") as fh:
        print(fh.read(), end="")
    return 0


# -- eval --------------------------------------------------------------------------


def _format_cell(value: float | None) -> str:
    return "-" if value is None else f"{value:.6f}"


def cmd_eval(config: dict) -> int:
    _require_keys(config, {"out_dir", "seed", "threads", "manifest", "split",
                           "prob_dir"}, "eval config")
    manifest = _as_str(config.get("manifest", ""), "manifest")
    if not manifest:
        raise ConfigError('eval config needs a "manifest" path')
    prob_dir = _as_str(config.get("prob_dir", ""), "prob_dir")
    if not prob_dir:
        raise ConfigError('eval config needs a "prob_dir" path')
    split = _as_str(config.get("split", "test"), "split")

    resolved = dict(config)
    resolved.update(manifest=manifest, prob_dir=prob_dir, split=split)
    _write_snapshot(resolved, "eval")

    samples = load_dataset(manifest, split)
    if not samples:
        raise DataError(f"{manifest}: no samples in split {split!r}")

    if not os.path.isdir(prob_dir):
        raise DataError(f"not a directory: {prob_dir}")
    names = [
        name for name in ("artery", "vein", "vessel")
        if os.path.exists(os.path.join(prob_dir, f"{samples[0].id}.{name}.png"))
    ]
    if not names:
        raise DataError(
            f"{prob_dir}: no probability maps found for sample {samples[0].id!r}")

    pooled_prob = {name: [] for name in names}
    pooled_gt = {name: [] for name in names}
    for sample in samples:
        keep = sample.eval_mask == 1
        for name in names:
            path = os.path.join(prob_dir, f"{sample.id}.{name}.png")
            if not os.path.exists(path):
                raise DataError(f"missing probability map: {path}")
            prob = load_probability_map(path)
            if prob.shape != sample.labels.shape:
                raise DataError(
                    f"{sample.id}: probability map shape {prob.shape} does not "
                    f"match labels shape {sample.labels.shape}")
            if name == "vessel":
                gt = (sample.labels > 0).astype(np.uint8)
            else:
                gt = (sample.labels == _CLASS_CODES[name]).astype(np.uint8)
            pooled_prob[name].append(prob[keep])
            pooled_gt[name].append(gt[keep])

    header = ("class", "SE", "SP", "Acc", "AUC", "Dice")
    table_rows: list[tuple[str, ...]] = []
    columns: dict[str, list[float | None]] = {c: [] for c in header[1:]}
    for name in names:
        prob_row = np.concatenate(pooled_prob[name])[None, :]
        gt_row = np.concatenate(pooled_gt[name])[None, :]
        pred_row = (prob_row >= 0.5).astype(np.uint8)
        metrics = confusion_metrics(pred_row, gt_row)
        try:
            auc_value: float | None = auc(prob_row, gt_row)
        except DataError:
            auc_value = None
        values = {"SE": metrics.sensitivity, "SP": metrics.specificity,
                  "Acc": metrics.accuracy, "AUC": auc_value,
                  "Dice": metrics.dice}
        for column in header[1:]:
            columns[column].append(values[column])
        table_rows.append((name,) + tuple(_format_cell(values[c]) for c in header[1:]))

    def column_mean(cells: list[float | None]) -> float | None:
        defined = [v for v in cells if v is not None]
        return float(np.mean(defined)) if defined else None
    table_rows.append(("average",) + tuple(
        _format_cell(column_mean(columns[c])) for c in header[1:]))

    out_dir = config["out_dir"]
    lines = ["\t".join(header)] + ["\t".join(row) for row in table_rows]
    metrics_path = os.path.join(out_dir, "metrics.tsv")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    widths = [max(len(row[i]) for row in [header] + table_rows)
              for i in range(len(header))]
    for row in [header] + table_rows:
        print("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return 0


# -- driver ------------------------------------------------------------------------


_COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset with width ground truth"),
    "train": (cmd_train, "train a segmentation model from a dataset manifest"),
    "distill": (cmd_distill, "train a student against a frozen teacher checkpoint"),
    "infer": (cmd_infer, "run sliding-window inference and write maps + overlays"),
    "widths": (cmd_widths, "measure vessel widths from labels or probability maps"),
    "eval": (cmd_eval, "score probability maps against ground truth labels"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Retinal vessel segmentation and width measurement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="JSON configuration file (source of truth)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="override the config out_dir")
        p.add_argument("--threads", type=int, default=None,
                       help="override the config thread cap (recorded in the "
                            "snapshot; commands are single-process)")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        config = _resolve_common(_load_config_file(args.config), args)
        return args.fn(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
