"""Training objectives.

The segmentation objective combines a soft Dice term, pixelwise cross
entropy, and (when the reconstruction stream is active) an L2 penalty
between the reconstructed and original image:

    L = w_dice * L_dice + w_ce * L_ce + w_recon * L_rec

Terms with weight zero are never built, so disabling a term leaves the
remaining graph bit-for-bit identical to a loss that never had it.

Distillation matches the temperature-softened class distributions of a
frozen teacher while keeping a hard cross-entropy anchor:

    L = lambda_d * tau^2 * KL(teacher || student) + (1 - lambda_d) * CE

All losses accept an optional per-pixel inclusion mask (1 = counted); the
default None reproduces the plain formulas exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError

EPS_DICE = 1e-6
EPS_LOG = 1e-12


@dataclass
class LossWeights:
    """Weights of the hybrid terms plus the distillation knobs.

    dice/ce/recon scale the three hybrid terms; temperature softens the
    class distributions during distillation and distill balances the
    soft-matching term against the hard cross entropy.
    """

    dice: float = 1.0
    ce: float = 1.0
    recon: float = 0.001
    temperature: float = 3.0
    distill: float = 0.1

    def validate(self) -> None:
        for name in ("dice", "ce", "recon"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.distill <= 1.0:
            raise ConfigError(f"distill weight must be in [0, 1], got {self.distill}")


def _check_probs_target(probs: Tensor, target: np.ndarray) -> None:
    if probs.ndim != 4:
        raise ShapeError(f"expected NKHW probabilities, got {probs.shape}")
    if target.shape != probs.shape:
        raise ShapeError(
            f"target shape {target.shape} does not match probabilities {probs.shape}"
        )
    if not np.array_equal(target, target.astype(bool).astype(target.dtype)):
        raise ShapeError("target must be one-hot (entries 0 or 1)")
    if not np.all(target.sum(axis=1) == 1.0):
        raise ShapeError("target must be one-hot (class sums must equal 1)")


def _mask_plane(mask: np.ndarray | None, shape: tuple[int, ...]):
    """Validate a (N, H, W) inclusion mask and return it as (N, 1, H, W)."""
    if mask is None:
        return None, float(shape[0] * shape[2] * shape[3])
    want = (shape[0], shape[2], shape[3])
    if mask.shape != want:
        raise ShapeError(f"mask shape {mask.shape} does not match pixels {want}")
    counted = float(mask.sum())
    if counted == 0.0:
        raise DataError("inclusion mask excludes every pixel")
    return mask.astype(np.float64)[:, None, :, :], counted


def dice_loss(probs: Tensor, target: np.ndarray, mask: np.ndarray | None = None,
              eps: float = EPS_DICE) -> Tensor:
    """1 - mean over classes of the smoothed Dice coefficient.

    Sums pool over the whole batch. A class absent from both the target and
    the prediction scores a coefficient of 1 (no penalty); a class predicted
    where none exists is penalized through the denominator.
    """
    _check_probs_target(probs, target)
    m4, _ = _mask_plane(mask, probs.shape)
    k = probs.shape[1]
    if m4 is not None:
        probs = ad.mul(probs, m4)
        target = target * m4
    inter = ad.tensor_sum(ad.mul(probs, target), axis=(0, 2, 3))
    denom = ad.add(ad.tensor_sum(probs, axis=(0, 2, 3)), target.sum(axis=(0, 2, 3)))
    coeff = ad.mul(ad.add(ad.mul(inter, 2.0), eps), ad.power(ad.add(denom, eps), -1.0))
    return ad.add(ad.mul(ad.tensor_mean(coeff), -1.0), 1.0)


def cross_entropy_loss(probs: Tensor, target: np.ndarray,
                       mask: np.ndarray | None = None) -> Tensor:
    """Pixel-averaged cross entropy against one-hot targets.

    Probabilities are clamped below at 1e-12 before the log, so a confident
    wrong prediction costs ~27.6 nats instead of infinity.
    """
    _check_probs_target(probs, target)
    m4, counted = _mask_plane(mask, probs.shape)
    logp = ad.log(ad.clamp_min(probs, EPS_LOG))
    per = ad.mul(logp, target)
    if m4 is not None:
        per = ad.mul(per, m4)
    return ad.mul(ad.tensor_sum(per), -1.0 / counted)


def reconstruction_loss(recon: Tensor, image: np.ndarray) -> Tensor:
    """Mean squared error between the reconstruction and the input image."""
    if recon.shape != image.shape:
        raise ShapeError(
            f"reconstruction shape {recon.shape} does not match image {image.shape}"
        )
    diff = ad.add(recon, -np.asarray(image, dtype=np.float64))
    return ad.tensor_mean(ad.mul(diff, diff))


def hybrid_loss_terms(logits: Tensor, target: np.ndarray, image: np.ndarray | None,
                      recon: Tensor | None, weights: LossWeights,
                      mask: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    """hybrid_loss plus the unweighted scalar value of each term.

    The parts dict always carries "dice", "ce", "recon", and "total";
    zero-weight terms report 0.0 without ever being built.
    """
    weights.validate()
    parts = {"dice": 0.0, "ce": 0.0, "recon": 0.0}
    if weights.dice == 0.0 and weights.ce == 0.0 and weights.recon == 0.0:
        parts["total"] = 0.0
        return Tensor(0.0), parts
    total = None

    def attach(term: Tensor, w: float) -> Tensor:
        weighted = term if w == 1.0 else ad.mul(term, w)
        return weighted if total is None else ad.add(total, weighted)

    if weights.dice != 0.0 or weights.ce != 0.0:
        probs = ad.softmax(logits, axis=1)
        if weights.dice != 0.0:
            term = dice_loss(probs, target, mask)
            parts["dice"] = float(term.data)
            total = attach(term, weights.dice)
        if weights.ce != 0.0:
            term = cross_entropy_loss(probs, target, mask)
            parts["ce"] = float(term.data)
            total = attach(term, weights.ce)
    if weights.recon != 0.0:
        if recon is None or image is None:
            raise ConfigError(
                "weights.recon is nonzero but no reconstruction/image was given"
            )
        term = reconstruction_loss(recon, image)
        parts["recon"] = float(term.data)
        total = attach(term, weights.recon)
    parts["total"] = float(total.data)
    return total, parts


def hybrid_loss(logits: Tensor, target: np.ndarray, image: np.ndarray | None,
                recon: Tensor | None, weights: LossWeights,
                mask: np.ndarray | None = None) -> Tensor:
    """Weighted sum of Dice + CE on softmax(logits) and the L2 reconstruction.

    The reconstruction pair (image, recon) is required exactly when
    weights.recon is nonzero. Weights equal to 1.0 attach the term without a
    multiply, so single-term configurations are bitwise identical to calling
    the term directly. All weights zero gives the constant 0.
    """
    return hybrid_loss_terms(logits, target, image, recon, weights, mask)[0]


def soften(logits: Tensor, temperature: float) -> Tensor:
    """Class distribution softened by a positive temperature (axis 1)."""
    return ad.softmax(logits, axis=1, temperature=temperature)


def distillation_loss(student_logits: Tensor, teacher_logits, target: np.ndarray,
                      weights: LossWeights | None = None,
                      mask: np.ndarray | None = None) -> Tensor:
    """Soft-label matching against a frozen teacher plus a hard CE anchor.

    Uses weights.temperature and weights.distill. teacher_logits may be an
    ndarray or a constant Tensor; a tensor that requires gradients is
    rejected outright so the teacher can never end up in the student's
    graph. With weights.distill = 0 the teacher is not evaluated at all and
    the result is exactly the hard CE term.
    """
    return distillation_loss_terms(student_logits, teacher_logits, target,
                                   weights, mask)[0]


def distillation_loss_terms(student_logits: Tensor, teacher_logits,
                            target: np.ndarray,
                            weights: LossWeights | None = None,
                            mask: np.ndarray | None = None,
                            ) -> tuple[Tensor, dict[str, float]]:
    """distillation_loss plus scalar term values.

    The parts dict carries "soft" (the raw KL divergence, before the
    lambda*tau^2 weighting), "hard" (the cross entropy), and "total"; terms
    that the weighting removes report 0.0.
    """
    if weights is None:
        weights = LossWeights()
    weights.validate()
    temperature = weights.temperature
    lambda_d = weights.distill
    parts = {"soft": 0.0, "hard": 0.0}

    hard = None
    if lambda_d != 1.0:
        hard = cross_entropy_loss(ad.softmax(student_logits, axis=1), target, mask)
        parts["hard"] = float(hard.data)
    if lambda_d == 0.0:
        parts["total"] = float(hard.data)
        return hard, parts

    if isinstance(teacher_logits, Tensor):
        if teacher_logits.requires_grad:
            raise ConfigError("teacher logits must be detached (requires_grad=False)")
        teacher_logits = teacher_logits.data
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"teacher logits {teacher_logits.shape} do not match "
            f"student logits {student_logits.shape}"
        )

    zt = teacher_logits / temperature
    zt = zt - zt.max(axis=1, keepdims=True)
    et = np.exp(zt)
    y_t = et / et.sum(axis=1, keepdims=True)

    m4, counted = _mask_plane(mask, student_logits.shape)
    y_s = soften(student_logits, temperature)
    cross = ad.mul(y_t, ad.log(ad.clamp_min(y_s, EPS_LOG)))
    if m4 is not None:
        cross = ad.mul(cross, m4)
        entropy = float((y_t * np.log(y_t) * m4).sum())
    else:
        entropy = float((y_t * np.log(y_t)).sum())
    # KL(t||s) averaged per pixel: sum_k y_t log y_t - sum_k y_t log y_s
    kl = ad.add(ad.mul(ad.tensor_sum(cross), -1.0 / counted), entropy / counted)
    parts["soft"] = float(kl.data)

    soft_term = ad.mul(kl, lambda_d * temperature * temperature)
    if lambda_d == 1.0:
        parts["total"] = float(soft_term.data)
        return soft_term, parts
    total = ad.add(soft_term, ad.mul(hard, 1.0 - lambda_d))
    parts["total"] = float(total.data)
    return total, parts
