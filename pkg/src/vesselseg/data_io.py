"""Dataset files, label encoding, artifact exports, and a synthetic generator.

On-disk conventions, all line-oriented text or PNG:

* Images: 8-bit PNG, grayscale or RGB (auto-detected by channel count),
  normalized to [0, 1] floats on load.
* Labels: 8-bit grayscale PNG with the strict codec 0=background,
  128=artery, 255=vein. Any other pixel value is an error, never silently
  remapped.
* Evaluation masks: 8-bit grayscale PNG with 0=excluded, 255=evaluated.
* Manifests: tab-separated text with header ``id image label mask split``;
  paths are resolved relative to the manifest file, ``-`` means no mask,
  and an optional ``# pixel_size_microns: <v>`` comment carries the
  physical scale. Records are ordered by id regardless of row order.
* Probability and width-map exports: 16-bit grayscale PNG plus a
  tab-separated sidecar recording the scale, so a round trip loses at
  most half a quantization step.

The synthetic generator renders constant-width tubes along Bezier
centerlines: a pixel is inside a vessel iff its distance to the densified
centerline polyline is at most width/2, which makes the emitted per-vessel
widths exact by construction. Arteries are drawn brighter than the
textured background, veins darker, and Gaussian noise is added before
8-bit quantization so the in-memory sample equals its saved-and-reloaded
form bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, ShapeError
from .vesselmetrics import DiameterStats, distance_transform

DEFAULT_PIXEL_SIZE_MICRONS = 12.5

_SPLITS = ("train", "val", "test")
_CLASS_NAMES = {1: "artery", 2: "vein"}
_CLASS_CODES = {"artery": 1, "vein": 2}

# Label codec: strict bijection between class ids and 8-bit pixel values.
_LABEL_TO_PIXEL = {0: 0, 1: 128, 2: 255}
_PIXEL_TO_LABEL = {v: k for k, v in _LABEL_TO_PIXEL.items()}


# -- core sample type -------------------------------------------------------------


@dataclass
class LabeledSample:
    """One image with its label map and evaluation mask.

    image is [C,H,W] float64 in [0,1]; labels is HxW of {0,1,2}; eval_mask
    is HxW of {0,1} where 0 marks pixels excluded from loss and metrics.
    """

    image: np.ndarray
    labels: np.ndarray
    eval_mask: np.ndarray
    id: str
    pixel_size_microns: float = DEFAULT_PIXEL_SIZE_MICRONS

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.eval_mask = np.asarray(self.eval_mask, dtype=np.uint8)
        if self.image.ndim != 3:
            raise ShapeError(f"sample {self.id}: image must be [C,H,W], got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ShapeError(
                f"sample {self.id}: labels shape {self.labels.shape} does not match "
                f"image plane {self.image.shape[1:]}"
            )
        if self.eval_mask.shape != self.labels.shape:
            raise ShapeError(
                f"sample {self.id}: eval_mask shape {self.eval_mask.shape} does not "
                f"match labels shape {self.labels.shape}"
            )
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DataError(f"sample {self.id}: image values must lie in [0, 1]")
        if not np.isin(self.labels, (0, 1, 2)).all():
            bad = sorted(set(np.unique(self.labels).tolist()) - {0, 1, 2})
            raise DataError(f"sample {self.id}: invalid label value(s) {bad}")
        if not np.isin(self.eval_mask, (0, 1)).all():
            raise DataError(f"sample {self.id}: eval_mask must be binary (0/1)")


# -- label codec ------------------------------------------------------------------


def encode_labels(labels: np.ndarray) -> np.ndarray:
    """Class ids {0,1,2} -> 8-bit grayscale pixel values {0,128,255}."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ShapeError(f"labels must be 2-d, got shape {lab.shape}")
    if not np.isin(lab, (0, 1, 2)).all():
        bad = sorted(set(np.unique(lab).tolist()) - {0, 1, 2})
        raise DataError(f"invalid label value(s) {bad}; expected 0, 1, or 2")
    out = np.zeros(lab.shape, dtype=np.uint8)
    for cls, pix in _LABEL_TO_PIXEL.items():
        out[lab == cls] = pix
    return out


def decode_labels(image: np.ndarray) -> np.ndarray:
    """8-bit pixel values {0,128,255} -> class ids {0,1,2}; strict."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeError(f"label image must be 2-d, got shape {img.shape}")
    if not np.isin(img, (0, 128, 255)).all():
        bad = sorted(set(np.unique(img).tolist()) - {0, 128, 255})
        raise DataError(f"invalid label pixel value(s) {bad}; expected 0, 128, or 255")
    out = np.zeros(img.shape, dtype=np.int64)
    for pix, cls in _PIXEL_TO_LABEL.items():
        out[img == pix] = cls
    return out


# -- PNG primitives ---------------------------------------------------------------


def _load_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def _save_png(arr: np.ndarray, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from None


def load_image(path: str) -> np.ndarray:
    """Load an 8-bit grayscale or RGB PNG as [C,H,W] floats in [0,1]."""
    raw = _load_png(path)
    if raw.dtype != np.uint8:
        raise DataError(f"image {path}: expected 8-bit pixels, got {raw.dtype}")
    if raw.ndim == 2:
        planes = raw[None]
    elif raw.ndim == 3 and raw.shape[2] == 3:
        planes = np.moveaxis(raw, 2, 0)
    else:
        raise DataError(f"image {path}: expected grayscale or RGB, got shape {raw.shape}")
    return planes.astype(np.float64) / 255.0


def save_image(image: np.ndarray, path: str) -> None:
    """Save [C,H,W] floats in [0,1] as an 8-bit PNG (C=1 grayscale, C=3 RGB)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"expected [1,H,W] or [3,H,W] image, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise DataError("image values must lie in [0, 1]")
    quant = np.round(img * 255.0).astype(np.uint8)
    _save_png(quant[0] if img.shape[0] == 1 else np.moveaxis(quant, 0, 2), path)


def load_label_file(path: str) -> np.ndarray:
    """Load a label PNG, decoding with the strict codec; errors name the file."""
    raw = _load_png(path)
    if raw.ndim != 2 or raw.dtype != np.uint8:
        raise DataError(f"label file {path}: expected 8-bit grayscale")
    try:
        return decode_labels(raw)
    except DataError as exc:
        raise DataError(f"label file {path}: {exc}") from None


def save_label_file(labels: np.ndarray, path: str) -> None:
    _save_png(encode_labels(labels), path)


def load_mask_file(path: str) -> np.ndarray:
    """Load an evaluation mask PNG ({0,255} on disk) as {0,1}."""
    raw = _load_png(path)
    if raw.ndim != 2 or raw.dtype != np.uint8:
        raise DataError(f"mask file {path}: expected 8-bit grayscale")
    if not np.isin(raw, (0, 255)).all():
        bad = sorted(set(np.unique(raw).tolist()) - {0, 255})
        raise DataError(f"mask file {path}: invalid pixel value(s) {bad}; expected 0 or 255")
    return (raw == 255).astype(np.uint8)


def save_mask_file(mask: np.ndarray, path: str) -> None:
    m = np.asarray(mask)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise ShapeError("eval mask must be a 2-d array of {0,1}")
    _save_png((m.astype(np.uint8) * 255), path)


# -- manifests --------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image: str
    label: str
    mask: str | None
    split: str


@dataclass
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    pixel_size_microns: float = DEFAULT_PIXEL_SIZE_MICRONS
    base_dir: str = "."


_MANIFEST_HEADER = ("id", "image", "label", "mask", "split")


def load_manifest(path: str) -> DatasetManifest:
    """Parse a manifest file; records come back sorted by id."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    pixel_size = DEFAULT_PIXEL_SIZE_MICRONS
    rows: list[list[str]] = []
    header_seen = False
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped.lstrip("#").strip()
            if body.startswith("pixel_size_microns"):
                try:
                    pixel_size = float(body.split(":", 1)[1])
                except (IndexError, ValueError):
                    raise DataError(f"{path}:{lineno}: malformed pixel_size_microns comment") from None
                if pixel_size <= 0:
                    raise DataError(f"{path}:{lineno}: pixel_size_microns must be positive")
            continue
        cells = stripped.split("\t")
        if not header_seen:
            if tuple(cells) != _MANIFEST_HEADER:
                raise DataError(
                    f"{path}:{lineno}: expected header {' '.join(_MANIFEST_HEADER)}, got {stripped!r}"
                )
            header_seen = True
            continue
        if len(cells) != len(_MANIFEST_HEADER):
            raise DataError(f"{path}:{lineno}: expected {len(_MANIFEST_HEADER)} fields, got {len(cells)}")
        rows.append(cells)
    if not header_seen:
        raise DataError(f"{path}: missing manifest header")
    records = []
    seen: set[str] = set()
    for rid, image, label, mask, split in rows:
        if rid in seen:
            raise DataError(f"{path}: duplicate id {rid!r}")
        seen.add(rid)
        if split not in _SPLITS:
            raise DataError(f"{path}: record {rid!r} has unknown split {split!r}")
        records.append(ManifestRecord(rid, image, label, None if mask == "-" else mask, split))
    records.sort(key=lambda r: r.id)
    return DatasetManifest(tuple(records), pixel_size, os.path.dirname(os.path.abspath(path)) or ".")


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    lines = [f"# pixel_size_microns: {manifest.pixel_size_microns!r}", "\t".join(_MANIFEST_HEADER)]
    for rec in sorted(manifest.records, key=lambda r: r.id):
        lines.append("\t".join((rec.id, rec.image, rec.label, rec.mask or "-", rec.split)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(manifest_path: str, split: str | None = None) -> list[LabeledSample]:
    """Load every sample a manifest names (optionally one split), in id order."""
    manifest = load_manifest(manifest_path)
    if split is not None and split not in _SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {_SPLITS}")
    samples = []
    for rec in manifest.records:
        if split is not None and rec.split != split:
            continue
        image = load_image(os.path.join(manifest.base_dir, rec.image))
        labels = load_label_file(os.path.join(manifest.base_dir, rec.label))
        if rec.mask is None:
            mask = np.ones(labels.shape, dtype=np.uint8)
        else:
            mask = load_mask_file(os.path.join(manifest.base_dir, rec.mask))
        try:
            samples.append(
                LabeledSample(image, labels, mask, rec.id, manifest.pixel_size_microns)
            )
        except (ShapeError, DataError) as exc:
            raise DataError(f"record {rec.id!r}: {exc}") from None
    return samples


def save_dataset(samples: list[LabeledSample], out_dir: str,
                 splits: dict[str, str] | None = None) -> str:
    """Write PNGs plus a manifest under out_dir; returns the manifest path.

    splits maps sample id -> split name; unlisted ids default to "train".
    """
    if not samples:
        manifest = DatasetManifest((), DEFAULT_PIXEL_SIZE_MICRONS, out_dir)
        path = os.path.join(out_dir, "manifest.tsv")
        save_manifest(manifest, path)
        return path
    pixel_sizes = {s.pixel_size_microns for s in samples}
    if len(pixel_sizes) != 1:
        raise DataError(f"samples disagree on pixel size: {sorted(pixel_sizes)}")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids")
    records = []
    for sample in samples:
        rel_image = os.path.join("images", f"{sample.id}.png")
        rel_label = os.path.join("labels", f"{sample.id}.png")
        rel_mask = os.path.join("masks", f"{sample.id}.png")
        save_image(sample.image, os.path.join(out_dir, rel_image))
        save_label_file(sample.labels, os.path.join(out_dir, rel_label))
        save_mask_file(sample.eval_mask, os.path.join(out_dir, rel_mask))
        split = (splits or {}).get(sample.id, "train")
        if split not in _SPLITS:
            raise ConfigError(f"unknown split {split!r} for sample {sample.id!r}")
        records.append(ManifestRecord(sample.id, rel_image, rel_label, rel_mask, split))
    manifest = DatasetManifest(tuple(records), pixel_sizes.pop(), out_dir)
    path = os.path.join(out_dir, "manifest.tsv")
    save_manifest(manifest, path)
    return path


# -- probability and width exports ------------------------------------------------


def export_probability_map(prob: np.ndarray, path: str) -> None:
    """Write probabilities in [0,1] as 16-bit PNG plus a scale sidecar."""
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"probability map must be 2-d, got shape {p.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise DataError("probabilities must lie in [0, 1]")
    quant = np.round(p * 65535.0).astype(np.uint16)
    _save_png(quant, path)
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        fh.write("kind\tprobability\nsteps_per_unit\t65535\n")


def load_probability_map(path: str) -> np.ndarray:
    raw = _load_png(path)
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise DataError(f"probability map {path}: expected 16-bit grayscale")
    return raw.astype(np.float64) / 65535.0


def export_width_artifacts(width_map_data: np.ndarray, pixel_size_microns: float,
                           path: str) -> None:
    """Write a width map (microns) as 16-bit PNG plus a scale sidecar.

    Pixel values are width / microns_per_step with microns_per_step chosen
    so the largest width maps to 65535 (recorded in the sidecar), making
    the round-trip error at most half a step.
    """
    data = np.asarray(width_map_data, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"width map must be 2-d, got shape {data.shape}")
    if data.size and data.min() < 0.0:
        raise DataError("width values must be non-negative")
    peak = float(data.max()) if data.size else 0.0
    microns_per_step = peak / 65535.0 if peak > 0.0 else 1.0
    quant = np.round(data / microns_per_step).astype(np.uint16)
    _save_png(quant, path)
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        fh.write(
            "kind\twidth_map\n"
            f"microns_per_step\t{microns_per_step!r}\n"
            f"pixel_size_microns\t{pixel_size_microns!r}\n"
        )


def load_width_artifacts(path: str) -> tuple[np.ndarray, float]:
    """Inverse of export_width_artifacts: (width map in microns, pixel size)."""
    raw = _load_png(path)
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise DataError(f"width map {path}: expected 16-bit grayscale")
    meta = _read_sidecar(_sidecar_path(path))
    if meta.get("kind") != "width_map":
        raise DataError(f"{_sidecar_path(path)}: not a width_map sidecar")
    try:
        step = float(meta["microns_per_step"])
        pixel_size = float(meta["pixel_size_microns"])
    except (KeyError, ValueError):
        raise DataError(f"{_sidecar_path(path)}: missing or malformed scale fields") from None
    return raw.astype(np.float64) * step, pixel_size


def _sidecar_path(path: str) -> str:
    return path + ".meta.tsv"


def _read_sidecar(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise DataError(f"sidecar not found: {path}") from None
    meta = {}
    for line in lines:
        if line.strip():
            key, _, value = line.partition("\t")
            meta[key] = value
    return meta


def write_width_summary(rows: list[tuple[str, DiameterStats, float | None]],
                        path: str) -> None:
    """Per-class width summary as tab-separated text; mape column is '-' when absent."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    lines = ["class\tn\tmean_microns\tstd_microns\tmape"]
    for name, stats, mape_value in rows:
        mape_text = "-" if mape_value is None else f"{mape_value:.6f}"
        lines.append(
            f"{name}\t{stats.count}\t{stats.mean_microns:.6f}\t{stats.std_microns:.6f}\t{mape_text}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# -- synthetic generator ----------------------------------------------------------


@dataclass(frozen=True)
class VesselSpec:
    """One synthetic vessel: class, constant width, optional Bezier control points.

    control_points are (y, x) Bezier control points (2 of them gives a
    straight segment); when omitted the generator draws a smooth random
    curve. Widths are full tube diameters in pixels, at least 3.
    """

    vessel_class: int
    width_px: float
    control_points: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.vessel_class not in _CLASS_NAMES:
            raise ConfigError(f"vessel_class must be 1 (artery) or 2 (vein), got {self.vessel_class}")
        if not self.width_px >= 3.0:
            raise ConfigError(f"vessel width must be >= 3 px, got {self.width_px}")
        if self.control_points is not None and len(self.control_points) < 2:
            raise ConfigError("control_points needs at least 2 points")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic sample: canvas, vessels, texture, noise."""

    canvas: tuple[int, int] = (192, 192)
    vessels: tuple[VesselSpec, ...] = ()
    texture_seed: int = 0
    noise_level: float = 0.02
    pixel_size_microns: float = DEFAULT_PIXEL_SIZE_MICRONS

    def __post_init__(self) -> None:
        if len(self.canvas) != 2 or min(self.canvas) < 16:
            raise ConfigError(f"canvas must be (H, W) with both >= 16, got {self.canvas}")
        if self.noise_level < 0:
            raise ConfigError(f"noise_level must be non-negative, got {self.noise_level}")
        if self.pixel_size_microns <= 0:
            raise ConfigError("pixel_size_microns must be positive")


@dataclass(frozen=True)
class VesselRecord:
    """Ground truth for one rendered vessel, including a pixel on its centerline."""

    index: int
    vessel_class: int
    width_px: float
    anchor_yx: tuple[int, int]


@dataclass
class WidthTable:
    records: tuple[VesselRecord, ...]
    pixel_size_microns: float = DEFAULT_PIXEL_SIZE_MICRONS

    def class_mean_width_px(self, vessel_class: int) -> float:
        widths = [r.width_px for r in self.records if r.vessel_class == vessel_class]
        return float(np.mean(widths)) if widths else 0.0

    def for_class(self, vessel_class: int) -> tuple[VesselRecord, ...]:
        return tuple(r for r in self.records if r.vessel_class == vessel_class)


_PLACEMENT_ATTEMPTS = 400
_VESSEL_GAP_PX = 2.0
_ARTERY_LEVEL = 0.85
_VEIN_LEVEL = 0.25
_BACKGROUND_LEVEL = 0.5
_TEXTURE_AMPLITUDE = 0.06
_CENTERLINE_STEP = 0.25


def _bezier_polyline(points: np.ndarray) -> np.ndarray:
    """Densify a Bezier curve (de Casteljau) to ~quarter-pixel steps."""
    hull_len = float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))
    n = max(2, int(np.ceil(hull_len / _CENTERLINE_STEP)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None, None]
    layers = points[None, :, :].repeat(n, axis=0)
    while layers.shape[1] > 1:
        layers = (1.0 - t) * layers[:, :-1, :] + t * layers[:, 1:, :]
    return layers[:, 0, :]


def _polyline_distance(shape: tuple[int, int], pts: np.ndarray, radius: float) -> np.ndarray:
    """Min distance from each pixel to the polyline, computed only near it."""
    h, w = shape
    dmin = np.full(shape, np.inf)
    pad = radius + 1.5
    for p, q in zip(pts[:-1], pts[1:]):
        r0 = max(0, int(np.floor(min(p[0], q[0]) - pad)))
        r1 = min(h, int(np.ceil(max(p[0], q[0]) + pad)) + 1)
        c0 = max(0, int(np.floor(min(p[1], q[1]) - pad)))
        c1 = min(w, int(np.ceil(max(p[1], q[1]) + pad)) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        yy = np.arange(r0, r1, dtype=np.float64)[:, None]
        xx = np.arange(c0, c1, dtype=np.float64)[None, :]
        vy, vx = q[0] - p[0], q[1] - p[1]
        seg_sq = vy * vy + vx * vx
        wy, wx = yy - p[0], xx - p[1]
        if seg_sq == 0.0:
            d = np.sqrt(wy * wy + wx * wx)
        else:
            t = np.clip((wy * vy + wx * vx) / seg_sq, 0.0, 1.0)
            d = np.sqrt((wy - t * vy) ** 2 + (wx - t * vx) ** 2)
        window = dmin[r0:r1, c0:c1]
        np.minimum(window, d, out=window)
    return dmin


def _smooth_texture(shape: tuple[int, int], rng: np.random.Generator,
                    cell: int = 12) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [-1, 1]."""
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(-1.0, 1.0, size=(gh, gw))
    ys = np.arange(h, dtype=np.float64) / cell
    xs = np.arange(w, dtype=np.float64) / cell
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[y0[:, None], x0[None, :]] * (1 - fx) + grid[y0[:, None], x0[None, :] + 1] * fx
    bot = grid[y0[:, None] + 1, x0[None, :]] * (1 - fx) + grid[y0[:, None] + 1, x0[None, :] + 1] * fx
    return top * (1 - fy) + bot * fy


def _random_control_points(rng: np.random.Generator, canvas: tuple[int, int],
                           margin: float) -> np.ndarray:
    """Four Bezier control points for a smooth curve crossing the canvas."""
    h, w = canvas
    lo_y, hi_y = margin, h - 1 - margin
    lo_x, hi_x = margin, w - 1 - margin
    p0 = np.array([rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)])
    span = 0.5 * min(hi_y - lo_y, hi_x - lo_x)
    for _ in range(32):
        p3 = np.array([rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)])
        if np.linalg.norm(p3 - p0) >= span:
            break
    direction = p3 - p0
    normal = np.array([-direction[1], direction[0]])
    norm_len = np.linalg.norm(normal)
    normal = normal / norm_len if norm_len else normal
    bend = 0.15 * min(h, w)
    p1 = p0 + direction / 3.0 + normal * rng.uniform(-bend, bend)
    p2 = p0 + 2.0 * direction / 3.0 + normal * rng.uniform(-bend, bend)
    pts = np.stack([p0, p1, p2, p3])
    pts[:, 0] = np.clip(pts[:, 0], lo_y, hi_y)
    pts[:, 1] = np.clip(pts[:, 1], lo_x, hi_x)
    return pts


def synth_generate(spec: SynthSpec, seed: int) -> tuple[LabeledSample, WidthTable]:
    """Render one synthetic sample with exactly known per-vessel widths.

    Vessels with explicit control points are rendered as given (one
    placement attempt); free vessels are re-drawn until they keep a 2 px
    gap from everything already placed. Widths in the returned table are
    exact by construction; each record also carries an anchor pixel on
    the vessel's centerline for anchored re-measurement.
    """
    h, w = spec.canvas
    placement_rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])
    texture_rng = np.random.default_rng([spec.texture_seed, 0])

    labels = np.zeros((h, w), dtype=np.int64)
    occupied = np.zeros((h, w), dtype=np.uint8)
    records = []
    for index, vessel in enumerate(spec.vessels):
        radius = vessel.width_px / 2.0
        margin = radius + 2.0
        if min(h, w) - 1 <= 2 * margin:
            raise ConfigError(
                f"vessel {index}: width {vessel.width_px} does not fit canvas {spec.canvas}"
            )
        explicit = vessel.control_points is not None
        if explicit:
            pts = np.asarray(vessel.control_points, dtype=np.float64)
            bad_y = (pts[:, 0] < margin) | (pts[:, 0] > h - 1 - margin)
            bad_x = (pts[:, 1] < margin) | (pts[:, 1] > w - 1 - margin)
            if bad_y.any() or bad_x.any():
                raise ConfigError(
                    f"vessel {index}: control points must stay {margin:.1f} px inside the canvas"
                )
        attempts = 1 if explicit else _PLACEMENT_ATTEMPTS
        clearance = distance_transform(occupied) if occupied.any() else None
        placed = False
        for _ in range(attempts):
            if not explicit:
                pts = _random_control_points(placement_rng, spec.canvas, margin)
            polyline = _bezier_polyline(pts)
            if clearance is not None:
                # Cheap prune: the tube extends radius from the centerline, so
                # any centerline point closer than radius + gap to an existing
                # vessel dooms the candidate without rasterizing it.
                cy = np.clip(np.round(polyline[:, 0]).astype(np.int64), 0, h - 1)
                cx = np.clip(np.round(polyline[:, 1]).astype(np.int64), 0, w - 1)
                if (clearance[cy, cx] < radius + _VESSEL_GAP_PX).any():
                    continue
            # Two control points define a straight segment; measuring against
            # the segment itself keeps boundary pixels (distance exactly
            # width/2) exact instead of picking up densification round-off.
            dist_pts = pts if len(pts) == 2 else polyline
            tube = _polyline_distance((h, w), dist_pts, radius) <= radius
            if clearance is not None and (clearance[tube] < _VESSEL_GAP_PX).any():
                continue
            labels[tube] = vessel.vessel_class
            occupied[tube] = 1
            mid = polyline[len(polyline) // 2]
            anchor = (int(round(mid[0])), int(round(mid[1])))
            records.append(VesselRecord(index, vessel.vessel_class, vessel.width_px, anchor))
            placed = True
            break
        if not placed:
            raise DataError(
                f"vessel {index} could not be placed without overlap after {attempts} attempts"
            )

    image = _BACKGROUND_LEVEL + _TEXTURE_AMPLITUDE * _smooth_texture((h, w), texture_rng)
    image[labels == 1] = _ARTERY_LEVEL
    image[labels == 2] = _VEIN_LEVEL
    if spec.noise_level > 0:
        image = image + noise_rng.normal(0.0, spec.noise_level, size=(h, w))
    image = np.clip(image, 0.0, 1.0)
    # Quantize to the 8-bit grid so the in-memory sample matches its file form.
    image = np.round(image * 255.0) / 255.0

    sample = LabeledSample(
        image=image[None],
        labels=labels,
        eval_mask=np.ones((h, w), dtype=np.uint8),
        id=f"synth-{seed:08d}",
        pixel_size_microns=spec.pixel_size_microns,
    )
    return sample, WidthTable(tuple(records), spec.pixel_size_microns)


# -- width table files ------------------------------------------------------------


_WIDTH_TABLE_HEADER = ("vessel", "class", "width_px", "anchor_y", "anchor_x")


def save_width_table(table: WidthTable, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    lines = [f"# pixel_size_microns: {table.pixel_size_microns!r}", "\t".join(_WIDTH_TABLE_HEADER)]
    for rec in table.records:
        lines.append(
            f"{rec.index}\t{_CLASS_NAMES[rec.vessel_class]}\t{rec.width_px!r}"
            f"\t{rec.anchor_yx[0]}\t{rec.anchor_yx[1]}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_width_table(path: str) -> WidthTable:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise DataError(f"width table not found: {path}") from None
    pixel_size = DEFAULT_PIXEL_SIZE_MICRONS
    records = []
    header_seen = False
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped.lstrip("#").strip()
            if body.startswith("pixel_size_microns"):
                pixel_size = float(body.split(":", 1)[1])
            continue
        cells = stripped.split("\t")
        if not header_seen:
            if tuple(cells) != _WIDTH_TABLE_HEADER:
                raise DataError(f"{path}:{lineno}: bad width table header {stripped!r}")
            header_seen = True
            continue
        if len(cells) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(cells)}")
        index, cls_name, width, ay, ax = cells
        if cls_name not in _CLASS_CODES:
            raise DataError(f"{path}:{lineno}: unknown class {cls_name!r}")
        records.append(
            VesselRecord(int(index), _CLASS_CODES[cls_name], float(width), (int(ay), int(ax)))
        )
    if not header_seen:
        raise DataError(f"{path}: missing width table header")
    return WidthTable(tuple(records), pixel_size)


# -- synth spec serialization -------------------------------------------------------


def synth_spec_to_dict(spec: SynthSpec) -> dict:
    vessels = []
    for v in spec.vessels:
        entry: dict = {"class": _CLASS_NAMES[v.vessel_class], "width_px": v.width_px}
        if v.control_points is not None:
            entry["control_points"] = [list(p) for p in v.control_points]
        vessels.append(entry)
    return {
        "canvas": list(spec.canvas),
        "vessels": vessels,
        "texture_seed": spec.texture_seed,
        "noise_level": spec.noise_level,
        "pixel_size_microns": spec.pixel_size_microns,
    }


def synth_spec_from_dict(raw: dict) -> SynthSpec:
    """Build a SynthSpec from parsed JSON; unknown keys are rejected."""
    allowed = {"canvas", "vessels", "texture_seed", "noise_level", "pixel_size_microns"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown synth spec key(s): {sorted(unknown)}")
    vessels = []
    for i, entry in enumerate(raw.get("vessels", ())):
        extra = set(entry) - {"class", "width_px", "control_points"}
        if extra:
            raise ConfigError(f"vessel {i}: unknown key(s) {sorted(extra)}")
        if "class" not in entry or "width_px" not in entry:
            raise ConfigError(f"vessel {i}: class and width_px are required")
        cls_name = entry["class"]
        if cls_name not in _CLASS_CODES:
            raise ConfigError(f"vessel {i}: unknown class {cls_name!r}")
        points = entry.get("control_points")
        control = tuple((float(p[0]), float(p[1])) for p in points) if points is not None else None
        vessels.append(VesselSpec(_CLASS_CODES[cls_name], float(entry["width_px"]), control))
    return SynthSpec(
        canvas=tuple(raw.get("canvas", (192, 192))),
        vessels=tuple(vessels),
        texture_seed=int(raw.get("texture_seed", 0)),
        noise_level=float(raw.get("noise_level", 0.02)),
        pixel_size_microns=float(raw.get("pixel_size_microns", DEFAULT_PIXEL_SIZE_MICRONS)),
    )
