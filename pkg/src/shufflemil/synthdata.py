"""Synthetic stained-cell images with pixel-accurate category masks.

Each sample is a light, noisy background scattered with elliptical cells:
normal cells (mask category 2) are small with a modest nucleus, cancerous
cells (category 1) are larger with a dominant dark nucleus, and a sample is
positive exactly when it contains at least one cancerous cell. One cancerous
cell is always placed near the image center so rotations and center crops
cannot remove the class evidence.

Every image also receives a per-sample photometric perturbation (brightness,
contrast, saturation, hue offsets) standing in for staining and acquisition
variation. Confound modes tie the brightness offset to the class label in
the training split and untie or invert it at test time, which is the failure
mode the patch-shuffle training strategy is meant to suppress.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bagging import LabeledImage, derive_bag_label
from .rand import make_rng

__all__ = [
    "GenConfig", "AugConfig", "SplitData", "generate_sample", "generate_dataset",
    "augment", "eval_transform", "color_jitter", "rgb_to_hsv", "hsv_to_rgb",
    "write_split", "load_split", "write_ppm", "read_ppm", "write_pgm", "read_pgm",
    "paper_aug_config",
]

SPLIT_NAMES = ("train", "val", "test")
SPLIT_WEIGHTS = {"train": 0.7, "val": 0.1, "test": 0.2}

CONFOUND_MODES = ("none", "correlated", "anti_correlated")


@dataclass
class GenConfig:
    image_side: int = 96
    cells_per_image: tuple = (5, 9)      # inclusive range of total cell count
    normal_radius: tuple = (8.0, 12.0)   # semi-major axis range, category 2
    cancer_radius: tuple = (11.0, 16.0)  # category 1: larger cells
    background: tuple = (0.86, 0.84, 0.88)
    noise: float = 0.02
    # per-sample photometric perturbation magnitudes
    brightness_delta: float = 0.12
    contrast_delta: float = 0.10
    saturation_delta: float = 0.10
    hue_delta: float = 0.03
    # staining/illumination variation mostly affects the thin background film;
    # dense cell bodies absorb it with this reduced weight
    perturb_cell_weight: float = 0.3
    # smooth per-image illumination field: patch-scale noise around the
    # per-sample brightness offset (0 disables). Makes single patches weak
    # evidence of the image-level offset while the global mean stays strong.
    brightness_local: float = 0.0
    local_scale_px: float = 12.0
    # cluster-vs-scatter cell arrangement: the global layout half of the
    # perturbation profile (tied to class in confound modes)
    cluster_radius_frac: float = 0.22
    confound: str = "none"               # none | correlated | anti_correlated
    seed: int = 0

    def __post_init__(self):
        if self.confound not in CONFOUND_MODES:
            raise ValueError(f"confound must be one of {CONFOUND_MODES}, got {self.confound!r}")


@dataclass
class AugConfig:
    """Stochastic training transform; validation/test use only crop + resize."""

    rotation_degrees: float = 180.0  # uniform in [-a, a]; 0 disables
    crop_fraction: float = 1.0       # center crop of this fraction of the side
    resize_to: int = 96
    flip_prob: float = 0.5           # horizontal and vertical flips, each Bernoulli(p)
    brightness: float = 0.15
    contrast: float = 0.3
    saturation: float = 0.3
    hue: float = 0.06


def paper_aug_config() -> AugConfig:
    """Full-scale geometry: 1038-side inputs, 700 center crop, 384 resize."""
    return AugConfig(crop_fraction=700 / 1038, resize_to=384)


@dataclass
class SplitData:
    images: list[LabeledImage]
    meta: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def labels(self) -> np.ndarray:
        return np.array([im.class_label for im in self.images])


# ---------------------------------------------------------------------------
# color space + photometric ops (shared by the generator and the augmenter)

_LUMA = np.array([0.299, 0.587, 0.114])


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV, all channels in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta == 0, 1.0, delta)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta == 0, 0.0, (h / 6.0) % 1.0)
    s = np.where(maxc == 0, 0.0, delta / np.where(maxc == 0, 1.0, maxc))
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _luminance(px: np.ndarray) -> np.ndarray:
    return px @ _LUMA


def adjust_brightness(px: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(px * factor, 0.0, 1.0)


def adjust_contrast(px: np.ndarray, factor: float) -> np.ndarray:
    m = _luminance(px).mean()
    return np.clip((px - m) * factor + m, 0.0, 1.0)


def adjust_saturation(px: np.ndarray, factor: float) -> np.ndarray:
    gray = _luminance(px)[..., None]
    return np.clip(gray + (px - gray) * factor, 0.0, 1.0)


def adjust_hue(px: np.ndarray, shift: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(px, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def color_jitter(pixels: np.ndarray, brightness: float, contrast: float,
                 saturation: float, hue: float, seed) -> np.ndarray:
    """Random photometric jitter in the fixed order brightness, contrast, saturation, hue.

    Factors are uniform in [max(0, 1-b), 1+b], [1-c, 1+c], [1-s, 1+s]; the hue
    shift is uniform in [-h, h] as a fraction of the hue circle. Ops whose
    drawn factor is exactly neutral are skipped, so zero magnitudes give a
    bit-exact identity. Output is float32 clamped to [0, 1].
    """
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    px = pixels.astype(np.float64)
    fb = rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness)
    fc = rng.uniform(1.0 - contrast, 1.0 + contrast)
    fs = rng.uniform(1.0 - saturation, 1.0 + saturation)
    fh = rng.uniform(-hue, hue)
    if fb != 1.0:
        px = adjust_brightness(px, fb)
    if fc != 1.0:
        px = adjust_contrast(px, fc)
    if fs != 1.0:
        px = adjust_saturation(px, fs)
    if fh != 0.0:
        px = adjust_hue(px, fh)
    return px.astype(np.float32)


# ---------------------------------------------------------------------------
# sample generation

_NORMAL_BODY = np.array([0.62, 0.60, 0.80])
_NORMAL_NUCLEUS = np.array([0.42, 0.38, 0.62])
_CANCER_BODY = np.array([0.68, 0.44, 0.62])
_CANCER_NUCLEUS = np.array([0.24, 0.10, 0.30])


def _paint_ellipse(pixels, mask, cx, cy, a, b, theta, color, category=None):
    s = pixels.shape[0]
    yy, xx = np.mgrid[0:s, 0:s]
    dx, dy = xx - cx, yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    pixels[inside] = color
    if category is not None:
        mask[inside] = category


def _draw_cell(pixels, mask, rng, cx, cy, radius, cancer: bool):
    category = 1 if cancer else 2
    body = (_CANCER_BODY if cancer else _NORMAL_BODY) + rng.uniform(-0.04, 0.04, 3)
    nucleus = (_CANCER_NUCLEUS if cancer else _NORMAL_NUCLEUS) + rng.uniform(-0.03, 0.03, 3)
    a = radius
    b = radius * rng.uniform(0.7, 1.0)
    theta = rng.uniform(0.0, np.pi)
    _paint_ellipse(pixels, mask, cx, cy, a, b, theta, body, category)
    # cancerous cells carry a much larger nucleus relative to the body
    ratio = rng.uniform(0.70, 0.85) if cancer else rng.uniform(0.35, 0.5)
    _paint_ellipse(pixels, mask, cx, cy, a * ratio, b * ratio, theta, nucleus, category)


def _perturbation(rng, cfg: GenConfig, class_label: int, tie: int) -> dict:
    """Per-sample photometric offsets; tie = +1/-1 couples brightness to the class, 0 unties."""
    if tie == 0:
        db = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    else:
        direction = tie * (1 if class_label == 1 else -1)
        db = direction * cfg.brightness_delta + rng.normal(0.0, cfg.brightness_delta * 0.12)
    return {
        "brightness": float(db),
        "contrast": float(rng.uniform(-cfg.contrast_delta, cfg.contrast_delta)),
        "saturation": float(rng.uniform(-cfg.saturation_delta, cfg.saturation_delta)),
        "hue": float(rng.uniform(-cfg.hue_delta, cfg.hue_delta)),
    }


def generate_sample(cfg: GenConfig, seed: int, class_label: int, tie: int = 0,
                    image_id: int = 0) -> tuple[LabeledImage, dict]:
    """One deterministic sample: image, mask, and its perturbation metadata."""
    if class_label not in (0, 1):
        raise ValueError(f"class must be 0 or 1, got {class_label}")
    rng = make_rng(seed)
    s = cfg.image_side
    pixels = np.clip(np.array(cfg.background) + rng.normal(0.0, cfg.noise, (s, s, 3)), 0.0, 1.0)
    mask = np.zeros((s, s), dtype=np.uint8)

    total = int(rng.integers(cfg.cells_per_image[0], cfg.cells_per_image[1] + 1))
    n_cancer = 0
    if class_label == 1:
        n_cancer = max(1, int(round(total * rng.uniform(0.3, 0.5))))
    n_normal = max(1, total - n_cancer)

    # the cluster/spread arrangement is the global half of the perturbation
    # profile: patch-level appearance is identical either way
    if tie == 0:
        clustered = bool(rng.random() < 0.5)
    else:
        clustered = (class_label == 1) if tie > 0 else (class_label == 0)

    def spot(radius, central):
        margin = radius + 2.0
        if central:
            # keep within the rotation/crop-safe central disc
            r = rng.uniform(0.0, max(2.0, s / 4.0 - radius))
            ang = rng.uniform(0.0, 2 * np.pi)
            return s / 2 + r * np.cos(ang), s / 2 + r * np.sin(ang)
        if clustered:
            r = rng.uniform(0.0, cfg.cluster_radius_frac * s)
            ang = rng.uniform(0.0, 2 * np.pi)
            return (np.clip(s / 2 + r * np.cos(ang), margin, s - margin),
                    np.clip(s / 2 + r * np.sin(ang), margin, s - margin))
        return rng.uniform(margin, s - margin), rng.uniform(margin, s - margin)

    # normals first so overlapping cancerous pixels win in the mask
    for _ in range(n_normal):
        radius = rng.uniform(*cfg.normal_radius)
        cx, cy = spot(radius, central=False)
        _draw_cell(pixels, mask, rng, cx, cy, radius, cancer=False)
    for j in range(n_cancer):
        radius = rng.uniform(*cfg.cancer_radius)
        cx, cy = spot(radius, central=(j == 0))
        _draw_cell(pixels, mask, rng, cx, cy, radius, cancer=True)

    offs = _perturbation(rng, cfg, class_label, tie)
    base = pixels.copy()
    field = np.full((s, s), 1.0 + offs["brightness"])
    if cfg.brightness_local > 0.0:
        bumps = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (s, s)),
                                        cfg.local_scale_px, mode="reflect")
        std = bumps.std()
        if std > 0:
            field = field + cfg.brightness_local * (bumps / std)
    pixels = np.clip(pixels * np.clip(field, 0.0, None)[..., None], 0.0, 1.0)
    pixels = adjust_contrast(pixels, 1.0 + offs["contrast"])
    pixels = adjust_saturation(pixels, 1.0 + offs["saturation"])
    pixels = adjust_hue(pixels, offs["hue"])
    weight = np.where(mask > 0, cfg.perturb_cell_weight, 1.0)[..., None]
    pixels = np.clip(weight * pixels + (1.0 - weight) * base, 0.0, 1.0)

    img = LabeledImage(pixels=pixels.astype(np.float32), mask=mask,
                       class_label=class_label, image_id=image_id)
    assert derive_bag_label(mask) == class_label
    meta = {"id": image_id, "class": class_label, "seed": int(seed),
            "clustered": int(clustered), **offs}
    return img, meta


def _tie_for(cfg: GenConfig, split: str) -> int:
    if cfg.confound == "none":
        return 0
    if split == "train":
        return +1
    if split == "test" and cfg.confound == "anti_correlated":
        return -1
    return 0  # val stays untied so checkpoint selection is not gamed


def _split_counts(per_class: int) -> dict[str, int]:
    val = int(per_class * SPLIT_WEIGHTS["val"])
    test = int(per_class * SPLIT_WEIGHTS["test"])
    return {"train": per_class - val - test, "val": val, "test": test}


def generate_dataset(cfg: GenConfig, per_class: int,
                     split_sizes: dict[str, int] | None = None) -> dict[str, SplitData]:
    """Stratified 7:1:2 dataset (train takes rounding remainders).

    ``split_sizes`` overrides the per-class count of each split directly.
    Sample seeds derive from (cfg.seed, split, class, index) so any sample
    can be regenerated in isolation.
    """
    if split_sizes is None:
        if per_class < 10:
            raise ValueError(f"need at least 10 samples per class, got {per_class}")
        split_sizes = _split_counts(per_class)
    splits: dict[str, SplitData] = {}
    for si, split in enumerate(SPLIT_NAMES):
        tie = _tie_for(cfg, split)
        images, meta = [], []
        idx = 0
        for cls in (0, 1):
            for j in range(split_sizes[split]):
                seed = int(np.random.SeedSequence(
                    cfg.seed, spawn_key=(si, cls, j)).generate_state(1, np.uint64)[0])
                img, m = generate_sample(cfg, seed, cls, tie=tie, image_id=idx)
                images.append(img)
                meta.append(m)
                idx += 1
        splits[split] = SplitData(images=images, meta=meta)
    return splits


# ---------------------------------------------------------------------------
# augmentation

def _center_crop(arr: np.ndarray, fraction: float) -> np.ndarray:
    s = min(arr.shape[0], arr.shape[1])
    side = int(round(s * fraction))
    top = (arr.shape[0] - side) // 2
    left = (arr.shape[1] - side) // 2
    return arr[top:top + side, left:left + side]


def _resize(arr: np.ndarray, target: int, order: int) -> np.ndarray:
    factor = target / arr.shape[0]
    zoom = (factor, factor) + (1,) * (arr.ndim - 2)
    out = ndimage.zoom(arr, zoom, order=order, mode="grid-constant", grid_mode=True)
    return out[:target, :target]


def augment(img: LabeledImage, cfg: AugConfig, seed) -> LabeledImage:
    """Rotate, center-crop, resize, flip, then color-jitter (pixels only).

    Geometric ops move pixels and mask in lockstep (bilinear for pixels,
    nearest for the mask); photometric jitter never touches the mask. Stages
    whose configuration is neutral are skipped, so the identity configuration
    returns the input bit-exactly.
    """
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    px, mask = img.pixels, img.mask
    if cfg.rotation_degrees:
        angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
        px = ndimage.rotate(px.astype(np.float32), angle, reshape=False, order=1,
                            mode="nearest")
        mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
        px = np.clip(px, 0.0, 1.0)
    if cfg.crop_fraction < 1.0:
        px = _center_crop(px, cfg.crop_fraction)
        mask = _center_crop(mask, cfg.crop_fraction)
    if px.shape[0] != cfg.resize_to:
        px = np.clip(_resize(px.astype(np.float32), cfg.resize_to, order=1), 0.0, 1.0)
        mask = _resize(mask, cfg.resize_to, order=0)
    if cfg.flip_prob > 0.0:
        if rng.random() < cfg.flip_prob:
            px, mask = px[:, ::-1], mask[:, ::-1]
        if rng.random() < cfg.flip_prob:
            px, mask = px[::-1, :], mask[::-1, :]
    if cfg.brightness or cfg.contrast or cfg.saturation or cfg.hue:
        px = color_jitter(px, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue, rng)
    return LabeledImage(pixels=np.ascontiguousarray(px, dtype=np.float32),
                        mask=np.ascontiguousarray(mask),
                        class_label=img.class_label, image_id=img.image_id)


def eval_transform(img: LabeledImage, cfg: AugConfig) -> LabeledImage:
    """Validation/test transform: center crop and resize only."""
    px, mask = img.pixels, img.mask
    if cfg.crop_fraction < 1.0:
        px = _center_crop(px, cfg.crop_fraction)
        mask = _center_crop(mask, cfg.crop_fraction)
    if px.shape[0] != cfg.resize_to:
        px = np.clip(_resize(px.astype(np.float32), cfg.resize_to, order=1), 0.0, 1.0)
        mask = _resize(mask, cfg.resize_to, order=0)
    return LabeledImage(pixels=np.ascontiguousarray(px, dtype=np.float32),
                        mask=np.ascontiguousarray(mask),
                        class_label=img.class_label, image_id=img.image_id)


# ---------------------------------------------------------------------------
# on-disk format: P6 images, P5 masks (value = category), meta.jsonl

def write_ppm(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, dims, maxval = fh.readline(), fh.readline(), fh.readline()
        if magic.strip() != b"P6" or maxval.strip() != b"255":
            raise ValueError(f"unsupported PPM header in {path}")
        w, h = map(int, dims.split())
        arr = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0)


def write_pgm(path, mask: np.ndarray) -> None:
    arr = mask.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, dims, maxval = fh.readline(), fh.readline(), fh.readline()
        if magic.strip() != b"P5" or maxval.strip() != b"255":
            raise ValueError(f"unsupported PGM header in {path}")
        w, h = map(int, dims.split())
        return np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w).copy()


def write_split(directory, data: SplitData) -> list[str]:
    """Write one split directory; returns the relative file names written."""
    os.makedirs(directory, exist_ok=True)
    names = []
    for img in data.images:
        stem = f"{img.image_id:04d}"
        write_ppm(os.path.join(directory, f"{stem}_img.ppm"), img.pixels)
        write_pgm(os.path.join(directory, f"{stem}_mask.pgm"), img.mask)
        names += [f"{stem}_img.ppm", f"{stem}_mask.pgm"]
    with open(os.path.join(directory, "meta.jsonl"), "w") as fh:
        for m in data.meta:
            fh.write(json.dumps(m, sort_keys=True) + "\n")
    names.append("meta.jsonl")
    return names


def load_split(directory) -> SplitData:
    with open(os.path.join(directory, "meta.jsonl")) as fh:
        meta = [json.loads(line) for line in fh if line.strip()]
    images = []
    for m in meta:
        stem = f"{int(m['id']):04d}"
        pixels = read_ppm(os.path.join(directory, f"{stem}_img.ppm"))
        mask = read_pgm(os.path.join(directory, f"{stem}_mask.pgm"))
        images.append(LabeledImage(pixels=pixels, mask=mask,
                                   class_label=int(m["class"]), image_id=int(m["id"])))
    return SplitData(images=images, meta=meta)
