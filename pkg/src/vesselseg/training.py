"""Training recipe: patches, augmentation, schedule, selection, inference.

The loop samples random fixed-size patches (an "epoch" covers the training
set's pixel area once in expectation), augments them with 90-degree
rotations, flips, and image-only contrast scaling, and takes Adam steps on
the hybrid loss with the learning rate halved every fixed number of epochs.
Every few epochs the model is scored on whole validation images with
sliding-window inference, and the checkpoint with the best mean foreground
F1 is the one returned.

Determinism: every random draw comes from a named stream keyed on
(seed, epoch, step, purpose), so a (seed, config, dataset) triple fully
determines the returned model bit for bit. The distillation loop shares
the same step engine and the same streams, which is what makes a
zero-weight distillation run bit-identical to plain cross-entropy
training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .data_io import LabeledSample
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .losses import LossWeights, distillation_loss_terms, hybrid_loss_terms
from .network import Model, ModelConfig, adapt_head, adapt_input, build_model, forward, load_checkpoint
from .vesselmetrics import ConfusionCounts


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentToggles:
    rotation: bool = True
    flip: bool = True
    contrast: bool = True

    @property
    def any(self) -> bool:
        return self.rotation or self.flip or self.contrast


@dataclass
class TrainConfig:
    patch_size: int = 256
    batch_size: int = 6
    epochs: int = 600
    lr0: float = 0.001
    lr_halving_period_epochs: int = 50
    augment: AugmentToggles = field(default_factory=AugmentToggles)
    seed: int = 0
    validation_interval: int = 5
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.patch_size < 16 or self.patch_size % 16:
            raise ConfigError(f"patch_size must be a positive multiple of 16, got {self.patch_size}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.lr_halving_period_epochs < 1:
            raise ConfigError(
                f"lr_halving_period_epochs must be >= 1, got {self.lr_halving_period_epochs}")
        if self.validation_interval < 1:
            raise ConfigError(
                f"validation_interval must be >= 1, got {self.validation_interval}")
        self.weights.validate()


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """lr0 halved once per period: lr0 * 2^-(epoch // period)."""
    return config.lr0 * 2.0 ** -(epoch // config.lr_halving_period_epochs)


# -- history ----------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    """One epoch: learning rate, mean loss terms, optional validation F1s."""

    epoch: int
    lr: float
    losses: tuple[tuple[str, float], ...]
    val_f1: tuple[tuple[str, float], ...] | None

    def loss(self, name: str) -> float:
        for key, value in self.losses:
            if key == name:
                return value
        raise KeyError(name)

    def mean_val_f1(self) -> float | None:
        if self.val_f1 is None:
            return None
        return float(np.mean([v for _, v in self.val_f1]))


@dataclass
class TrainHistory:
    records: tuple[EpochRecord, ...] = ()

    def best_mean_val_f1(self) -> float | None:
        scores = [r.mean_val_f1() for r in self.records if r.val_f1 is not None]
        return max(scores) if scores else None


def write_history(history: TrainHistory, path: str) -> None:
    """Tab-separated history; loss columns are prefixed loss:, F1 columns f1:."""
    lines = []
    if history.records:
        first = history.records[0]
        header = ["epoch", "lr"]
        header += [f"loss:{name}" for name, _ in first.losses]
        f1_names = [name for name, _ in first.val_f1] if first.val_f1 else None
        if f1_names is None:
            for rec in history.records:
                if rec.val_f1 is not None:
                    f1_names = [name for name, _ in rec.val_f1]
                    break
        header += [f"f1:{name}" for name in (f1_names or [])]
        lines.append("\t".join(header))
        for rec in history.records:
            cells = [str(rec.epoch), repr(rec.lr)]
            cells += [repr(v) for _, v in rec.losses]
            if f1_names:
                if rec.val_f1 is None:
                    cells += ["-"] * len(f1_names)
                else:
                    cells += [repr(v) for _, v in rec.val_f1]
            lines.append("\t".join(cells))
    else:
        lines.append("epoch\tlr")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_history(path: str) -> TrainHistory:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except FileNotFoundError:
        raise DataError(f"history not found: {path}") from None
    if not lines:
        raise DataError(f"{path}: empty history file")
    header = lines[0].split("\t")
    if header[:2] != ["epoch", "lr"]:
        raise DataError(f"{path}: bad history header")
    loss_names = [h[len("loss:"):] for h in header if h.startswith("loss:")]
    f1_names = [h[len("f1:"):] for h in header if h.startswith("f1:")]
    records = []
    for line in lines[1:]:
        cells = line.split("\t")
        if len(cells) != len(header):
            raise DataError(f"{path}: row width does not match header")
        epoch = int(cells[0])
        lr = float(cells[1])
        losses = tuple(zip(loss_names, (float(c) for c in cells[2:2 + len(loss_names)])))
        f1_cells = cells[2 + len(loss_names):]
        if f1_cells and f1_cells[0] != "-":
            val = tuple(zip(f1_names, (float(c) for c in f1_cells)))
        else:
            val = None
        records.append(EpochRecord(epoch, lr, losses, val))
    return TrainHistory(tuple(records))


# -- patches and augmentation -----------------------------------------------------


@dataclass
class PatchBatch:
    """Congruent crops: images [N,C,h,w], labels [N,h,w], masks [N,h,w]."""

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray


def _as_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def sample_patches(sample: LabeledSample, patch_size: int, count: int,
                   rng_seed) -> PatchBatch:
    """Uniformly random congruent crops from one sample.

    rng_seed may be an int, a sequence of ints, or a Generator (consumed in
    place). A patch the size of the image always returns the whole image.
    """
    _, h, w = sample.image.shape
    if patch_size > h or patch_size > w:
        raise ShapeError(
            f"sample {sample.id}: patch {patch_size} exceeds image {h}x{w}")
    rng = _as_rng(rng_seed)
    ys = rng.integers(0, h - patch_size + 1, size=count)
    xs = rng.integers(0, w - patch_size + 1, size=count)
    images = np.stack([
        sample.image[:, y:y + patch_size, x:x + patch_size] for y, x in zip(ys, xs)
    ])
    labels = np.stack([
        sample.labels[y:y + patch_size, x:x + patch_size] for y, x in zip(ys, xs)
    ])
    masks = np.stack([
        sample.eval_mask[y:y + patch_size, x:x + patch_size] for y, x in zip(ys, xs)
    ])
    return PatchBatch(images, labels, masks.astype(np.float64))


def augment(batch: PatchBatch, toggles: AugmentToggles, rng_seed) -> PatchBatch:
    """90-degree rotations and flips on image+label, contrast on image only.

    Contrast multiplies the image by a factor drawn from [0.8, 1.25];
    labels and masks are never interpolated or rescaled. With all toggles
    off this is the identity.
    """
    if not toggles.any:
        return batch
    rng = _as_rng(rng_seed)
    images = batch.images.copy()
    labels = batch.labels.copy()
    masks = batch.masks.copy()
    for i in range(images.shape[0]):
        if toggles.rotation:
            k = int(rng.integers(0, 4))
            if k:
                images[i] = np.rot90(images[i], k, axes=(1, 2))
                labels[i] = np.rot90(labels[i], k, axes=(0, 1))
                masks[i] = np.rot90(masks[i], k, axes=(0, 1))
        if toggles.flip:
            if rng.integers(0, 2):
                images[i] = images[i][:, ::-1, :]
                labels[i] = labels[i][::-1, :]
                masks[i] = masks[i][::-1, :]
            if rng.integers(0, 2):
                images[i] = images[i][:, :, ::-1]
                labels[i] = labels[i][:, ::-1]
                masks[i] = masks[i][:, ::-1]
        if toggles.contrast:
            images[i] = images[i] * rng.uniform(0.8, 1.25)
    return PatchBatch(images, labels, masks)


# -- sliding-window inference -----------------------------------------------------


def sliding_window_infer(model: Model, image: np.ndarray, patch_size: int,
                         overlap_fraction: float = 0.5) -> np.ndarray:
    """Whole-image class probabilities [K,H,W] from overlapping tiles.

    Tiles are laid out with the given overlap (plus extra tiles flush with
    the bottom/right edges so everything is covered) and their softmax
    outputs are averaged with uniform weights, which keeps the per-pixel
    probabilities summing to one. Images smaller than the patch are
    reflect-padded, inferred, and cropped back. A single tile covering the
    whole image equals the direct forward pass bit for bit.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected [C,H,W] image, got shape {img.shape}")
    if patch_size < 16 or patch_size % 16:
        raise ConfigError(f"patch_size must be a positive multiple of 16, got {patch_size}")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ConfigError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    _, h, w = img.shape
    pad_h = max(0, patch_size - h)
    pad_w = max(0, patch_size - w)
    if pad_h or pad_w:
        img = np.pad(img, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    _, ph, pw = img.shape

    stride = max(1, int(round(patch_size * (1.0 - overlap_fraction))))
    ys = list(range(0, ph - patch_size + 1, stride))
    if ys[-1] != ph - patch_size:
        ys.append(ph - patch_size)
    xs = list(range(0, pw - patch_size + 1, stride))
    if xs[-1] != pw - patch_size:
        xs.append(pw - patch_size)

    k = model.config.num_classes
    acc = np.zeros((k, ph, pw))
    hits = np.zeros((ph, pw))
    with ad.no_grad():
        for y in ys:
            for x in xs:
                tile = img[:, y:y + patch_size, x:x + patch_size]
                logits, _ = forward(model, tile[None], mode="eval")
                prob = ad.softmax(logits, axis=1).data[0]
                acc[:, y:y + patch_size, x:x + patch_size] += prob
                hits[y:y + patch_size, x:x + patch_size] += 1.0
    out = acc / hits[None]
    return out[:, :h, :w]


# -- validation scoring -----------------------------------------------------------


def _foreground_names(num_classes: int) -> tuple[str, ...]:
    if num_classes == 2:
        return ("vessel",)
    if num_classes == 3:
        return ("artery", "vein")
    return tuple(f"class{k}" for k in range(1, num_classes))


def _target_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Collapse to {0,1} for binary models; validate the range otherwise."""
    if num_classes == 2:
        return (labels > 0).astype(np.int64)
    if labels.max(initial=0) >= num_classes:
        raise DataError(
            f"labels contain class {int(labels.max())} but the model has {num_classes}")
    return labels


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float64)
    for k in range(num_classes):
        out[:, k][labels == k] = 1.0
    return out


def _dice_from_counts(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2.0 * c.tp / denom


def evaluate_f1(model: Model, samples: list[LabeledSample],
                patch_size: int) -> tuple[tuple[str, float], ...]:
    """Per-foreground-class F1, pooled over all masked pixels of all samples."""
    k = model.config.num_classes
    names = _foreground_names(k)
    totals = {name: np.zeros(4, dtype=np.int64) for name in names}
    for sample in samples:
        prob = sliding_window_infer(model, sample.image, patch_size)
        pred = prob.argmax(axis=0)
        gt = _target_labels(sample.labels, k)
        keep = sample.eval_mask == 1
        for cls, name in enumerate(names, start=1):
            p = (pred == cls) & keep
            g = (gt == cls) & keep
            tp = int((p & g).sum())
            fp = int((p & ~g).sum())
            fn = int((~p & g).sum())
            tn = int((~p & ~g & keep).sum())
            totals[name] += (tp, fp, tn, fn)
    return tuple(
        (name, _dice_from_counts(ConfusionCounts(*totals[name].tolist())))
        for name in names
    )


# -- the fitting engine -----------------------------------------------------------


def _draw_batch(dataset: list[LabeledSample], patch_size: int, batch_size: int,
                rng: np.random.Generator) -> PatchBatch:
    idxs = rng.integers(0, len(dataset), size=batch_size)
    parts = [sample_patches(dataset[i], patch_size, 1, rng) for i in idxs]
    return PatchBatch(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.masks for p in parts]),
    )


def _steps_per_epoch(dataset: list[LabeledSample], config: TrainConfig) -> int:
    area = sum(s.image.shape[1] * s.image.shape[2] for s in dataset)
    return max(1, math.ceil(area / (config.batch_size * config.patch_size ** 2)))


def _fit(model: Model, dataset: list[LabeledSample], val_set: list[LabeledSample],
         config: TrainConfig, build_loss) -> tuple[Model, TrainHistory]:
    """Shared step engine: patch -> augment -> forward -> loss -> Adam.

    build_loss(logits, recon, images, target_onehot, masks) must return
    (scalar loss Tensor, dict of term values). Validation runs every
    validation_interval epochs and at the final epoch; the returned model
    is the clone with the highest mean foreground F1 (the initial model if
    no validation ever ran).
    """
    config.validate()
    if not dataset:
        raise DataError("training set is empty")
    if not val_set:
        raise DataError("validation set is empty")
    for sample in dataset:
        _, h, w = sample.image.shape
        if h < config.patch_size or w < config.patch_size:
            raise ShapeError(
                f"sample {sample.id}: {h}x{w} is smaller than patch {config.patch_size}")

    k = model.config.num_classes
    steps = _steps_per_epoch(dataset, config)
    best = model.clone()
    best_f1 = -np.inf
    records: list[EpochRecord] = []
    state = AdamState()

    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        sums: dict[str, float] = {}
        for step in range(steps):
            batch = _draw_batch(
                dataset, config.patch_size, config.batch_size,
                np.random.default_rng([config.seed, epoch, step, 0]))
            if config.augment.any:
                batch = augment(batch, config.augment,
                                np.random.default_rng([config.seed, epoch, step, 1]))
            target = _one_hot(_target_labels(batch.labels, k), k)
            model.zero_grads()
            logits, recon = forward(model, batch.images, mode="train",
                                    rng_seed=[config.seed, epoch, step, 2])
            loss, parts = build_loss(logits, recon, batch.images, target, batch.masks)
            if not np.isfinite(loss.data):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch} step {step}")
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items()}
            adam_step(model.params, grads, state, lr)
            for name, value in parts.items():
                sums[name] = sums.get(name, 0.0) + value
        mean_losses = tuple((name, sums[name] / steps) for name in sums)

        val_f1 = None
        due = (epoch + 1) % config.validation_interval == 0 or epoch == config.epochs - 1
        if due:
            val_f1 = evaluate_f1(model, val_set, config.patch_size)
            mean_f1 = float(np.mean([v for _, v in val_f1]))
            if mean_f1 > best_f1:
                best_f1 = mean_f1
                best = model.clone()
        records.append(EpochRecord(epoch, lr, mean_losses, val_f1))

    return best, TrainHistory(tuple(records))


def train(model: Model, dataset: list[LabeledSample], val_set: list[LabeledSample],
          config: TrainConfig) -> tuple[Model, TrainHistory]:
    """Hybrid-loss training with best-validation-F1 selection.

    A zero-epoch run returns a clone of the initial model and an empty
    history. The reconstruction weight requires a model with the auxiliary
    stream enabled.
    """
    config.validate()
    if config.weights.recon != 0.0 and not model.config.aux_enabled:
        raise ConfigError(
            "weights.recon is nonzero but the model has no auxiliary stream")

    def build_loss(logits, recon, images, target, masks):
        return hybrid_loss_terms(logits, target, images, recon,
                                 config.weights, masks)

    return _fit(model, dataset, val_set, config, build_loss)


def finetune_teacher(pretrained_ckpt: str, dataset: list[LabeledSample],
                     val_set: list[LabeledSample], config: TrainConfig,
                     ) -> tuple[Model, TrainHistory]:
    """Load a checkpoint, adapt it to the data, and train a 2-class teacher.

    The input layer is regrouped to the dataset's channel count when they
    differ, the head is replaced with a fresh 2-channel output (dropping
    the auxiliary stream), and training runs with the reconstruction
    weight forced to zero.
    """
    if not dataset:
        raise DataError("training set is empty")
    model = load_checkpoint(pretrained_ckpt)
    channels = dataset[0].image.shape[0]
    if channels != model.config.input_channels:
        model = adapt_input(model, channels)
    model = adapt_head(model, 2, init_seed=config.seed)
    teacher_config = replace(config, weights=replace(config.weights, recon=0.0))
    return train(model, dataset, val_set, teacher_config)


def distill_train(teacher: Model, student_config: ModelConfig,
                  dataset: list[LabeledSample], val_set: list[LabeledSample],
                  config: TrainConfig) -> tuple[Model, TrainHistory]:
    """Train a fresh student against a frozen teacher's soft labels.

    The teacher runs in eval mode under no_grad, so its parameters and
    batch-norm statistics are untouched. With weights.distill = 0 the
    teacher is never evaluated and the run is bit-identical to plain
    cross-entropy training of the same student.
    """
    config.validate()
    if student_config.num_classes != teacher.config.num_classes:
        raise ConfigError(
            f"student has {student_config.num_classes} classes, "
            f"teacher has {teacher.config.num_classes}")
    if dataset and student_config.input_channels != dataset[0].image.shape[0]:
        raise ConfigError(
            f"student expects {student_config.input_channels} channels, "
            f"dataset has {dataset[0].image.shape[0]}")
    student = build_model(student_config, init_seed=config.seed)
    lambda_d = config.weights.distill

    def build_loss(logits, recon, images, target, masks):
        teacher_logits = None
        if lambda_d != 0.0:
            with ad.no_grad():
                t_logits, _ = forward(teacher, images, mode="eval")
            teacher_logits = t_logits.data
        return distillation_loss_terms(logits, teacher_logits, target,
                                       config.weights, masks)

    return _fit(student, dataset, val_set, config, build_loss)
