"""Score segmentations the way the evaluation pipeline does.

Builds three predictions of known quality against one synthetic ground truth
(near-perfect, blurry, and inverted) and reports sensitivity, specificity,
accuracy, AUC, and Dice for each, plus a width-error MAPE example. No trained
model is involved; the point is the metric conventions themselves.
"""

import numpy as np

from vesselseg.data_io import SynthSpec, VesselSpec, synth_generate
from vesselseg.vesselmetrics import auc, confusion_metrics, mape

sample, table = synth_generate(
    SynthSpec(canvas=(96, 96),
              vessels=(VesselSpec(1, 5.0), VesselSpec(2, 8.0)),
              texture_seed=2, noise_level=0.02),
    seed=0)
gt = (sample.labels > 0).astype(np.uint8)
rng = np.random.default_rng(0)

# Probability maps of decreasing quality: a confident one with mild noise, a
# washed-out one hovering near 0.5, and one that has the classes backwards.
sharp = np.clip(gt + rng.normal(0.0, 0.25, gt.shape), 0.0, 1.0)
blurry = np.clip(0.5 + 0.2 * (gt - 0.5) + rng.normal(0.0, 0.15, gt.shape),
                 0.0, 1.0)
inverted = 1.0 - sharp

print(f"ground truth: {int(gt.sum())} vessel pixels of {gt.size} "
      f"({gt.mean():.1%} foreground)\n")
print(f"{'prediction':<12}{'SE':>8}{'SP':>8}{'Acc':>8}{'AUC':>8}{'Dice':>8}")
for name, prob in (("sharp", sharp), ("blurry", blurry),
                   ("inverted", inverted)):
    pred = (prob >= 0.5).astype(np.uint8)
    m = confusion_metrics(pred, gt, sample.eval_mask)
    area = auc(prob, gt, sample.eval_mask)
    print(f"{name:<12}{m.sensitivity:>8.4f}{m.specificity:>8.4f}"
          f"{m.accuracy:>8.4f}{area:>8.4f}{m.dice:>8.4f}")

true_widths = np.array([rec.width_px for rec in table.records])
measured = true_widths + rng.normal(0.0, 0.3, true_widths.shape)
print(f"\nwidth MAPE example: true {np.round(true_widths, 2).tolist()} px, "
      f"measured {np.round(measured, 2).tolist()} px "
      f"-> MAPE {mape(true_widths, measured):.4f}")
