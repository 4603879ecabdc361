"""Datasets: palette-coded masks, augmentation, folds, synthetic blobs.

Masks are class-index maps; on disk they are stored as RGB PNGs using the
fixed maceral palette below (a plain 8-bit grayscale PNG of raw indices is
also accepted). Index 255 marks ignored pixels.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

CLASS_NAMES = ("vitrinite", "inertinite", "exinite", "mineral", "adhesive")
NUM_CLASSES = len(CLASS_NAMES)
IGNORE_INDEX = 255

# class index -> display RGB
PALETTE = {
    0: (120, 190, 255),   # vitrinite: light blue
    1: (220, 50, 50),     # inertinite: red
    2: (250, 160, 200),   # exinite: pink
    3: (60, 180, 90),     # mineral: green
    4: (25, 35, 140),     # adhesive: dark blue
}
IGNORE_COLOR = (255, 255, 255)


class DataError(ValueError):
    pass


@dataclass
class SampleRecord:
    """One image/mask pair plus provenance."""

    id: str
    image: np.ndarray           # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray            # (H, W) uint8, values 0..4 or 255
    source: str = "disk"
    verdict_history: list = field(default_factory=list)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.id}: image must be (H, W, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(
                f"{self.id}: mask shape {self.mask.shape} != image {self.image.shape[:2]}"
            )
        bad = ~(np.isin(self.mask, list(range(NUM_CLASSES)) + [IGNORE_INDEX]))
        if bad.any():
            raise DataError(
                f"{self.id}: mask holds class index {int(self.mask[bad].flat[0])}, "
                f"valid are 0..{NUM_CLASSES - 1} and {IGNORE_INDEX}"
            )
        self.mask = self.mask.astype(np.uint8)


# -- palette codec -----------------------------------------------------------


def indices_to_rgb(mask: np.ndarray) -> np.ndarray:
    out = np.zeros((*mask.shape, 3), dtype=np.uint8)
    out[mask == IGNORE_INDEX] = IGNORE_COLOR
    for idx, color in PALETTE.items():
        out[mask == idx] = color
    return out


def rgb_to_indices(rgb: np.ndarray) -> np.ndarray:
    """Exact palette lookup; any unknown color raises DataError."""
    rgb = np.asarray(rgb)
    out = np.full(rgb.shape[:2], -1, dtype=np.int16)
    for idx, color in list(PALETTE.items()) + [(IGNORE_INDEX, IGNORE_COLOR)]:
        out[np.all(rgb == color, axis=-1)] = idx
    if (out < 0).any():
        y, x = np.argwhere(out < 0)[0]
        raise DataError(f"unmapped mask color {tuple(int(v) for v in rgb[y, x])} at ({y}, {x})")
    return out.astype(np.uint8)


def palette_json() -> dict:
    return {
        "classes": [
            {"index": i, "name": CLASS_NAMES[i], "color": list(PALETTE[i])} for i in range(NUM_CLASSES)
        ],
        "ignore": {"index": IGNORE_INDEX, "color": list(IGNORE_COLOR)},
    }


# -- disk io -----------------------------------------------------------------


def load_dataset(root: str, errors: Optional[list] = None) -> list:
    """Read root/images/*.png with masks of the same name in root/masks/.

    Per-file problems (missing mask, shape mismatch, unknown palette color)
    are logged and appended to ``errors`` when given; remaining files load.
    """
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(img_dir):
        raise DataError(f"dataset root {root!r} has no images/ directory")
    records = []
    for fname in sorted(os.listdir(img_dir)):
        if not fname.lower().endswith(".png"):
            continue
        sample_id = os.path.splitext(fname)[0]
        try:
            image = load_image(os.path.join(img_dir, fname))
            mask_path = os.path.join(mask_dir, fname)
            if not os.path.exists(mask_path):
                raise DataError(f"{fname}: no matching mask")
            mask = load_mask(mask_path)
            records.append(SampleRecord(id=sample_id, image=image, mask=mask, source="disk"))
        except DataError as e:
            log.warning("skipping %s: %s", fname, e)
            if errors is not None:
                errors.append((fname, str(e)))
    return records


def load_image(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_mask(path: str) -> np.ndarray:
    img = Image.open(path)
    if img.mode in ("L", "I", "I;16"):
        return np.asarray(img).astype(np.uint8)
    return rgb_to_indices(np.asarray(img.convert("RGB")))


def save_dataset(records: list, root: str) -> None:
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for rec in records:
        img = Image.fromarray((np.clip(rec.image, 0, 1) * 255).round().astype(np.uint8))
        img.save(os.path.join(root, "images", f"{rec.id}.png"))
        Image.fromarray(indices_to_rgb(rec.mask)).save(os.path.join(root, "masks", f"{rec.id}.png"))
    with open(os.path.join(root, "palette.json"), "w") as f:
        json.dump(palette_json(), f, indent=2)


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    crop: int = 512
    contrast: tuple = (0.8, 1.2)
    brightness: tuple = (0.8, 1.2)
    scale: tuple = (0.8, 1.2)
    flip: bool = True
    expansion: int = 100  # dataset multiplication factor for expand_records

    def __post_init__(self):
        if self.crop < 1:
            raise DataError(f"crop must be >= 1, got {self.crop}")
        for name in ("contrast", "brightness", "scale"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise DataError(f"{name} range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.expansion < 1:
            raise DataError(f"expansion must be >= 1, got {self.expansion}")


def _mirror_pad_to(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Symmetric (edge-inclusive mirror) padding up to at least h x w,
    split evenly with the extra pixel on the bottom/right."""
    ph, pw = max(0, h - arr.shape[0]), max(0, w - arr.shape[1])
    if ph == 0 and pw == 0:
        return arr
    pads = [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)]
    if arr.ndim == 3:
        pads.append((0, 0))
    return np.pad(arr, pads, mode="symmetric")


def _center_crop(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    oy, ox = (arr.shape[0] - h) // 2, (arr.shape[1] - w) // 2
    return arr[oy:oy + h, ox:ox + w]


def _sample_positions(n_in: int, n_out: int) -> np.ndarray:
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(pos, 0.0, n_in - 1.0)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-last float resize, align-corners-false with clamped borders."""
    ry = _sample_positions(img.shape[0], out_h)
    rx = _sample_positions(img.shape[1], out_w)
    y0 = np.floor(ry).astype(int)
    x0 = np.floor(rx).astype(int)
    ty = (ry - y0)[:, None, None]
    tx = (rx - x0)[None, :, None]
    y1 = np.minimum(y0 + 1, img.shape[0] - 1)
    x1 = np.minimum(x0 + 1, img.shape[1] - 1)
    img3 = img if img.ndim == 3 else img[:, :, None]
    top = img3[y0][:, x0] * (1 - tx) + img3[y0][:, x1] * tx
    bot = img3[y1][:, x0] * (1 - tx) + img3[y1][:, x1] * tx
    out = top * (1 - ty) + bot * ty
    return out if img.ndim == 3 else out[:, :, 0]


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-pixel resize with the same coordinate convention; the
    half-way tie goes to the higher index (floor(pos + 0.5))."""
    ry = np.floor(_sample_positions(mask.shape[0], out_h) + 0.5).astype(int)
    rx = np.floor(_sample_positions(mask.shape[1], out_w) + 0.5).astype(int)
    ry = np.minimum(ry, mask.shape[0] - 1)
    rx = np.minimum(rx, mask.shape[1] - 1)
    return mask[np.ix_(ry, rx)]


def augment(rec: SampleRecord, seed: int, cfg: AugmentConfig) -> SampleRecord:
    """Seeded three-step augmentation.

    1. random crop to crop x crop (mirror-pad smaller sources first);
    2. photometric jitter pixel' = clamp(contrast*pixel + (brightness-1)*mean)
       on the image only, then independent 50% horizontal/vertical flips;
    3. rescale by a factor from ``cfg.scale`` (image bilinear, mask
       nearest), then mirror-pad or center-crop back to crop x crop.

    Identical (record, seed, config) triples give identical outputs; the
    mask sees exactly the geometric operations, never the photometric one.
    """
    rng = np.random.default_rng(seed)
    crop = cfg.crop
    image = _mirror_pad_to(rec.image, crop, crop)
    mask = _mirror_pad_to(rec.mask, crop, crop)

    oy = int(rng.integers(0, image.shape[0] - crop + 1))
    ox = int(rng.integers(0, image.shape[1] - crop + 1))
    image = image[oy:oy + crop, ox:ox + crop]
    mask = mask[oy:oy + crop, ox:ox + crop]

    contrast = rng.uniform(*cfg.contrast)
    brightness = rng.uniform(*cfg.brightness)
    image = np.clip(contrast * image + (brightness - 1.0) * image.mean(), 0.0, 1.0)

    if cfg.flip:
        if rng.random() < 0.5:
            image, mask = image[:, ::-1], mask[:, ::-1]
        if rng.random() < 0.5:
            image, mask = image[::-1], mask[::-1]

    factor = rng.uniform(*cfg.scale)
    new = max(1, int(round(crop * factor)))
    if new != crop:
        image = resize_bilinear(image, new, new)
        mask = resize_nearest(mask, new, new)
        if new < crop:
            image = _mirror_pad_to(image, crop, crop)
            mask = _mirror_pad_to(mask, crop, crop)
        else:
            image = _center_crop(image, crop, crop)
            mask = _center_crop(mask, crop, crop)

    return SampleRecord(
        id=f"{rec.id}#a{seed}",
        image=np.ascontiguousarray(image),
        mask=np.ascontiguousarray(mask),
        source=rec.source,
        verdict_history=list(rec.verdict_history),
    )


def expand_records(records: list, cfg: AugmentConfig, seed: int) -> list:
    """Materialize cfg.expansion augmented variants per record."""
    out = []
    for i, rec in enumerate(records):
        for j in range(cfg.expansion):
            out.append(augment(rec, seed + i * cfg.expansion + j, cfg))
    return out


# -- folds -------------------------------------------------------------------


def five_fold_split(n: int, seed: int) -> list:
    """Seeded shuffle dealt round-robin into five disjoint folds."""
    if n < 5:
        raise DataError(f"five-fold split needs at least 5 samples, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[i::5]) for i in range(5)]


# -- synthetic data ----------------------------------------------------------


def synth_generate(n: int, seed: int, size: int = 64) -> list:
    """Deterministic banded block scenes with exact masks.

    Each scene is a recursive axis-aligned partition (four guillotine
    cuts) into five regions, one per class, echoing the banded structure
    of polished coal sections: all five classes appear in every scene and
    long-run class shares stay near 20%. Cut positions snap to mid-cell
    of an eight-slot grid so region boundaries stay resolvable at the
    coarsest decoder stride. Per-class tone jitter, speckle, and an
    illumination gradient texture the image.
    """
    if n < 1 or size < 1:
        raise DataError(f"need n >= 1 and size >= 1, got n={n}, size={size}")
    children = np.random.SeedSequence(seed).spawn(n)
    slots = [int(round((k + 0.5) * size / 8.0)) for k in range(8)]
    yy, xx = np.mgrid[0:size, 0:size]
    records = []
    for i in range(n):
        rng = np.random.default_rng(children[i])
        regions = [(0, size, 0, size)]  # (y0, y1, x0, x1), half-open
        for _ in range(NUM_CLASSES - 1):
            areas = [(y1 - y0) * (x1 - x0) for y0, y1, x0, x1 in regions]
            y0, y1, x0, x1 = regions.pop(int(np.argmax(areas)))
            if (x1 - x0) >= (y1 - y0):  # cut across the longer side
                cands = [s for s in slots if x0 + size // 8 < s < x1 - size // 8]
                c = int(rng.choice(cands)) if cands else (x0 + x1) // 2
                regions += [(y0, y1, x0, c), (y0, y1, c, x1)]
            else:
                cands = [s for s in slots if y0 + size // 8 < s < y1 - size // 8]
                c = int(rng.choice(cands)) if cands else (y0 + y1) // 2
                regions += [(y0, c, x0, x1), (c, y1, x0, x1)]
        classes = rng.permutation(NUM_CLASSES)
        mask = np.zeros((size, size), dtype=np.uint8)
        for cls, (y0, y1, x0, x1) in zip(classes, regions):
            mask[y0:y1, x0:x1] = cls

        base = np.array([PALETTE[c] for c in range(NUM_CLASSES)], dtype=np.float64) / 255.0
        tone = base + rng.uniform(-0.05, 0.05, size=(NUM_CLASSES, 3))
        image = tone[mask]
        image += rng.normal(0.0, 0.04, size=image.shape)              # speckle
        gy, gx = rng.uniform(-0.05, 0.05, size=2)
        image += (gy * yy / size + gx * xx / size)[:, :, None]        # illumination
        image = np.clip(image, 0.0, 1.0)
        records.append(
            SampleRecord(id=f"synth-{i:04d}", image=image, mask=mask, source=f"synthetic:seed{seed}")
        )
    return records
