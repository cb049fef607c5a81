"""Dataset records and on-disk layout.

A dataset root holds group_<id>/ directories plus an optional aux/ directory;
each of those holds img/*.ppm and gt/*.pgm with matching stems. Masks are
binarized at 0.5 on load so the binary-gt invariant holds even for soft
third-party masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, UsageError
from .pnm import read_image


@dataclass
class ImageGroup:
    """N same-size images sharing one co-salient object class, with exact
    binary masks of that object."""

    images: list[np.ndarray]  # each [3,H,W] float32 in [0,1]
    gt: list[np.ndarray]  # each [H,W] float32 in {0,1}
    group_id: str

    def __post_init__(self):
        if len(self.images) < 2:
            raise UsageError(f"group {self.group_id!r} has {len(self.images)} images; co-saliency needs >= 2")
        if len(self.images) != len(self.gt):
            raise ShapeError(f"group {self.group_id!r}: {len(self.images)} images vs {len(self.gt)} masks")
        base = self.images[0].shape[1:]
        for img, mask in zip(self.images, self.gt):
            if img.ndim != 3 or img.shape[0] != 3 or img.shape[1:] != base:
                raise ShapeError(f"group {self.group_id!r}: image shape {img.shape} != [3,{base[0]},{base[1]}]")
            if mask.shape != base:
                raise ShapeError(f"group {self.group_id!r}: mask shape {mask.shape} != {base}")
            vals = np.unique(mask)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise UsageError(f"group {self.group_id!r}: mask values not binary: {vals[:5]}")

    @property
    def size(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images[0].shape[1:]


@dataclass
class AuxBatch:
    """K independent single-object images with masks; K may be zero."""

    images: list[np.ndarray]
    gt: list[np.ndarray]

    def __post_init__(self):
        if len(self.images) != len(self.gt):
            raise ShapeError(f"aux batch: {len(self.images)} images vs {len(self.gt)} masks")
        for img, mask in zip(self.images, self.gt):
            if img.ndim != 3 or img.shape[0] != 3 or img.shape[1:] != mask.shape:
                raise ShapeError(f"aux batch: image {img.shape} does not pair with mask {mask.shape}")

    @property
    def size(self) -> int:
        return len(self.images)


@dataclass
class GroupEntry:
    group_id: str
    stems: list[str]
    img_paths: list[Path]
    gt_paths: list[Path]


@dataclass
class DatasetIndex:
    root: Path
    groups: list[GroupEntry]
    aux: GroupEntry | None
    problems: list[str] = field(default_factory=list)


def _scan_pair_dir(base: Path, label: str, problems: list[str]) -> GroupEntry | None:
    img_dir = base / "img"
    gt_dir = base / "gt"
    if not img_dir.is_dir():
        problems.append(f"{label}: missing img/ directory")
        return None
    stems, imgs, gts = [], [], []
    for img_path in sorted(img_dir.glob("*.ppm"), key=lambda p: p.stem):
        gt_path = gt_dir / (img_path.stem + ".pgm")
        if not gt_path.is_file():
            problems.append(f"{label}: image {img_path.stem!r} has no gt mask")
            continue
        stems.append(img_path.stem)
        imgs.append(img_path)
        gts.append(gt_path)
    if gt_dir.is_dir():
        orphan = sorted(set(p.stem for p in gt_dir.glob("*.pgm")) - set(stems))
        for stem in orphan:
            problems.append(f"{label}: gt {stem!r} has no image")
    if not stems:
        problems.append(f"{label}: no usable image/gt pairs")
        return None
    return GroupEntry(label, stems, imgs, gts)


def dataset_layout(root: str | Path) -> DatasetIndex:
    """Enumerate and validate a dataset tree; deterministic in name order
    regardless of filesystem enumeration order."""
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"dataset root {root} is not a directory")
    problems: list[str] = []
    groups = []
    for gdir in sorted(root.glob("group_*"), key=lambda p: p.name):
        if not gdir.is_dir():
            continue
        entry = _scan_pair_dir(gdir, gdir.name, problems)
        if entry is not None:
            groups.append(entry)
    aux = _scan_pair_dir(root / "aux", "aux", problems) if (root / "aux").is_dir() else None
    if not groups:
        problems.append("no group_* directories with usable pairs")
    return DatasetIndex(root, groups, aux, problems)


def _binarize_mask(mask: np.ndarray) -> np.ndarray:
    return (mask >= 0.5).astype(np.float32)


def load_group(entry: GroupEntry) -> ImageGroup:
    images, masks = [], []
    for img_path, gt_path in zip(entry.img_paths, entry.gt_paths):
        img = read_image(img_path)
        if img.ndim != 3:
            raise UsageError(f"{img_path} is not a color PPM image")
        mask = read_image(gt_path)
        if mask.ndim != 2:
            raise UsageError(f"{gt_path} is not a grayscale PGM mask")
        images.append(img)
        masks.append(_binarize_mask(mask))
    return ImageGroup(images, masks, entry.group_id)


def load_aux(entry: GroupEntry, indices: list[int] | None = None) -> AuxBatch:
    idx = range(len(entry.stems)) if indices is None else indices
    images, masks = [], []
    for i in idx:
        img = read_image(entry.img_paths[i])
        if img.ndim != 3:
            raise UsageError(f"{entry.img_paths[i]} is not a color PPM image")
        images.append(img)
        masks.append(_binarize_mask(read_image(entry.gt_paths[i])))
    return AuxBatch(images, masks)
