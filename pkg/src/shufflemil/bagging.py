"""Bags of image patches and their soft labels.

An annotated image is split into a row-major grid of patches (a bag of
instances). Each patch carries a masked-ratio label: the fraction of its
pixels covered by any mask category, attributed entirely to the patch's
dominant category. Bag-level soft labels are the per-component sums of the
member patch labels, so they survive any regrouping of patches.

Two distributors turn a batch of bags into model inputs: ``mil_distribute``
applies one seeded global permutation over every patch slot in the batch
(labels travel with their patches), while ``cls_distribute`` is the identity.
Both hand back bags that ``compose_bag`` reassembles into images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rand import make_rng

__all__ = [
    "LabeledImage", "PatchLabel", "Bag", "BagSoftLabel", "ShufflePlan",
    "split_into_patches", "compute_patch_label", "derive_bag_label",
    "mil_distribute", "cls_distribute", "compose_bag",
]

POSITIVE_CATEGORY = 1  # mask index of the positive (cancerous) cell category


@dataclass
class LabeledImage:
    """Square image with a per-pixel category mask.

    ``pixels``: (H, W, C) float32 in [0, 1]. ``mask``: (H, W) integers in
    {0..K} where 0 means unannotated background. ``class_label`` must agree
    with ``derive_bag_label(mask)`` for freshly generated samples.
    """

    pixels: np.ndarray
    mask: np.ndarray
    class_label: int
    image_id: int = 0

    def __post_init__(self):
        if self.pixels.shape[:2] != self.mask.shape:
            raise ValueError(
                f"pixels {self.pixels.shape} and mask {self.mask.shape} disagree on H, W")


@dataclass
class PatchLabel:
    """Masked ratio of one patch: overall ratio plus its one-hot category split.

    At most one ``per_category`` entry is nonzero and then equals ``mr``;
    the nonzero index is the patch's dominant category minus one.
    """

    mr: float
    per_category: np.ndarray

    def as_vector(self) -> np.ndarray:
        """[mr, per-category ratios] as one float64 vector of length K + 1."""
        return np.concatenate(([self.mr], self.per_category))


@dataclass
class Bag:
    """Ordered patch sequence from one (possibly re-mixed) image.

    ``patches``: (n, p, p, C) float32. ``provenance[i]`` records which source
    image and source grid slot patch i originally came from.
    """

    patches: np.ndarray
    patch_labels: list[PatchLabel]
    provenance: list[tuple]

    def __post_init__(self):
        if not (len(self.patches) == len(self.patch_labels) == len(self.provenance)):
            raise ValueError("patches, patch_labels and provenance lengths differ")

    @property
    def n(self) -> int:
        return len(self.patches)

    @property
    def patch_side(self) -> int:
        return self.patches.shape[1]

    def label_matrix(self) -> np.ndarray:
        """(n, K+1) stack of patch label vectors."""
        return np.stack([pl.as_vector() for pl in self.patch_labels])


@dataclass
class BagSoftLabel:
    """Componentwise sum of a bag's patch labels: total masked ratio plus per-category sums."""

    total: float
    per_category: np.ndarray

    @classmethod
    def from_bag(cls, bag: Bag) -> "BagSoftLabel":
        mat = bag.label_matrix()
        return cls(total=float(mat[:, 0].sum()), per_category=mat[:, 1:].sum(axis=0))

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.total], self.per_category))


@dataclass
class ShufflePlan:
    """The exact permutation a batch shuffle applied, for audit and replay.

    ``mapping`` rows are (dst_bag, dst_slot, src_bag, src_slot) over all
    B * n global patch slots and form a bijection on the source side.
    """

    seed: int
    num_bags: int
    bag_size: int
    mapping: np.ndarray = field(repr=False)

    def is_bijection(self) -> bool:
        src = self.mapping[:, 2] * self.bag_size + self.mapping[:, 3]
        dst = self.mapping[:, 0] * self.bag_size + self.mapping[:, 1]
        full = np.arange(self.num_bags * self.bag_size)
        return bool(np.array_equal(np.sort(src), full) and np.array_equal(np.sort(dst), full))

    def to_json(self) -> str:
        return json.dumps({
            "seed": int(self.seed),
            "B": int(self.num_bags),
            "n": int(self.bag_size),
            "mapping": self.mapping.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "ShufflePlan":
        obj = json.loads(text)
        return cls(seed=obj["seed"], num_bags=obj["B"], bag_size=obj["n"],
                   mapping=np.asarray(obj["mapping"], dtype=np.int64))


def derive_bag_label(mask: np.ndarray, positive_category: int = POSITIVE_CATEGORY) -> int:
    """1 if any pixel carries the positive category, else 0."""
    return int(bool((np.asarray(mask) == positive_category).any()))


def compute_patch_label(mask_patch: np.ndarray, num_categories: int) -> PatchLabel:
    """Masked ratio and one-hot category attribution for one mask patch.

    The ratio counts all nonzero pixels; it is attributed to the patch's
    majority nonzero category (ties break toward the smaller index).
    """
    mask_patch = np.asarray(mask_patch)
    counts = np.bincount(mask_patch.ravel(), minlength=num_categories + 1)
    if counts.size > num_categories + 1:
        bad = int(mask_patch.max())
        raise ValueError(f"mask category {bad} exceeds K={num_categories}")
    masked = int(counts[1:].sum())
    mr = masked / mask_patch.size
    per = np.zeros(num_categories, dtype=np.float64)
    if masked:
        per[int(np.argmax(counts[1:]))] = mr
    return PatchLabel(mr=mr, per_category=per)


def _to_grid(image_side: int, p: int) -> int:
    if image_side % p != 0:
        raise ValueError(f"image side {image_side} is not divisible by patch side {p}")
    return image_side // p


def split_into_patches(img: LabeledImage, p: int, num_categories: int = 2) -> Bag:
    """Split a square image into its row-major p x p patch bag with labels."""
    h, w = img.mask.shape
    if h != w:
        raise ValueError(f"expected a square image, got {h}x{w}")
    g = _to_grid(h, p)
    c = img.pixels.shape[2]
    patches = (img.pixels.reshape(g, p, g, p, c)
               .transpose(0, 2, 1, 3, 4)
               .reshape(g * g, p, p, c))
    mask_patches = (img.mask.reshape(g, p, g, p)
                    .transpose(0, 2, 1, 3)
                    .reshape(g * g, p, p))
    labels = [compute_patch_label(mp, num_categories) for mp in mask_patches]
    provenance = [(img.image_id, i) for i in range(g * g)]
    return Bag(patches=np.ascontiguousarray(patches), patch_labels=labels,
               provenance=provenance)


def compose_bag(bag: Bag, image_side: int) -> np.ndarray:
    """Reassemble a bag into the (S, S, C) image; exact inverse of the splitter's order."""
    p = bag.patch_side
    g = _to_grid(image_side, p)
    if bag.n != g * g:
        raise ValueError(f"bag holds {bag.n} patches but a {image_side}/{p} grid needs {g * g}")
    c = bag.patches.shape[3]
    return np.ascontiguousarray(
        bag.patches.reshape(g, g, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(image_side, image_side, c))


def _soft_labels(bags: list[Bag]) -> list[BagSoftLabel]:
    return [BagSoftLabel.from_bag(b) for b in bags]


def mil_distribute(batch: list[Bag], seed: int):
    """Shuffle every patch slot in the batch with one seeded global permutation.

    Patch labels and provenance travel with their patches. Returns the
    shuffled bags, their recomputed soft labels, and the ShufflePlan that
    replays the permutation.
    """
    sizes = {b.n for b in batch}
    if len(sizes) != 1:
        raise ValueError(f"bags in a batch must share n, got sizes {sorted(sizes)}")
    psides = {b.patch_side for b in batch}
    if len(psides) != 1:
        raise ValueError(f"bags in a batch must share patch side, got {sorted(psides)}")
    num_bags, bag_size = len(batch), batch[0].n

    perm = make_rng(seed).permutation(num_bags * bag_size)
    all_patches = np.concatenate([b.patches for b in batch], axis=0)
    all_labels = [pl for b in batch for pl in b.patch_labels]
    all_prov = [pv for b in batch for pv in b.provenance]

    mapping = np.empty((num_bags * bag_size, 4), dtype=np.int64)
    shuffled = []
    for dst_bag in range(num_bags):
        lo = dst_bag * bag_size
        src = perm[lo:lo + bag_size]
        mapping[lo:lo + bag_size, 0] = dst_bag
        mapping[lo:lo + bag_size, 1] = np.arange(bag_size)
        mapping[lo:lo + bag_size, 2] = src // bag_size
        mapping[lo:lo + bag_size, 3] = src % bag_size
        shuffled.append(Bag(
            patches=np.ascontiguousarray(all_patches[src]),
            patch_labels=[all_labels[s] for s in src],
            provenance=[all_prov[s] for s in src],
        ))
    plan = ShufflePlan(seed=seed, num_bags=num_bags, bag_size=bag_size, mapping=mapping)
    return shuffled, _soft_labels(shuffled), plan


def cls_distribute(batch: list[Bag]):
    """Identity distributor: unshuffled bags with their soft labels."""
    return batch, _soft_labels(batch)
