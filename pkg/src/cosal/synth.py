"""Procedural co-salient dataset synthesis.

Every group is a pure function of (seed, group index): one shape class is
common to all images of the group, rendered with per-image jitter of
position, scale, and hue (never rotation), over a gradient-plus-noise
background, with 0..3 distractor shapes of other classes that never overlap
the common shape. The mask is the common shape's exact raster.

Rasterization is integer fixed-point (8 fractional bits). Polygon vertices
come from hard-coded tables, ellipses from an integer inequality, so the
same inputs produce the same bits on every platform.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import SynthSpec
from .data import AuxBatch, ImageGroup
from .pnm import write_image

# rng stream ids: never renumber, or every dataset regenerates differently
_STREAM_COMMON = 0  # per-group common-class choice
_STREAM_IMAGE = 1  # per-image jitter, background, distractors
_STREAM_AUX = 2  # auxiliary single-shape images

_FP = 8  # fixed-point fractional bits
_HALF = 1 << (_FP - 1)

# convex-polygon vertex tables at radius 256, four orientations per arity;
# orientation steps are half the vertex angle so rotations look distinct
_POLY_LUT: dict[int, list[list[tuple[int, int]]]] = {
    3: [
        [(256, 0), (-128, 222), (-128, -222)],
        [(222, 128), (-222, 128), (0, -256)],
        [(128, 222), (-256, 0), (128, -222)],
        [(0, 256), (-222, -128), (222, -128)],
    ],
    4: [
        [(256, 0), (0, 256), (-256, 0), (0, -256)],
        [(237, 98), (-98, 237), (-237, -98), (98, -237)],
        [(181, 181), (-181, 181), (-181, -181), (181, -181)],
        [(98, 237), (-237, 98), (-98, -237), (237, -98)],
    ],
    5: [
        [(256, 0), (79, 243), (-207, 150), (-207, -150), (79, -243)],
        [(243, 79), (0, 256), (-243, 79), (-150, -207), (150, -207)],
        [(207, 150), (-79, 243), (-256, 0), (-79, -243), (207, -150)],
        [(150, 207), (-150, 207), (-243, -79), (0, -256), (243, -79)],
    ],
    6: [
        [(256, 0), (128, 222), (-128, 222), (-256, 0), (-128, -222), (128, -222)],
        [(247, 66), (66, 247), (-181, 181), (-247, -66), (-66, -247), (181, -181)],
        [(222, 128), (0, 256), (-222, 128), (-222, -128), (0, -256), (222, -128)],
        [(181, 181), (-66, 247), (-247, 66), (-181, -181), (66, -247), (247, -66)],
    ],
}

_KINDS = ("poly3", "poly4", "poly5", "poly6", "ellipse_wide", "ellipse_tall")

_GOLDEN = 0.61803398875


def class_style(class_id: int) -> tuple[str, int, float]:
    """(kind, orientation, base hue) for a shape class. Classes with the same
    id always share all three, which is what makes 'same class' testable."""
    kind = _KINDS[class_id % len(_KINDS)]
    orientation = (class_id // len(_KINDS)) % 4
    hue = (class_id * _GOLDEN) % 1.0
    return kind, orientation, hue


def _pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(w, dtype=np.int64) << _FP) + _HALF
    ys = (np.arange(h, dtype=np.int64) << _FP) + _HALF
    return xs[None, :], ys[:, None]


def _polygon_mask(h: int, w: int, cx: int, cy: int, r: int, verts: list[tuple[int, int]]) -> np.ndarray:
    xs, ys = _pixel_centers(h, w)
    cxf = (cx << _FP) + _HALF
    cyf = (cy << _FP) + _HALF
    vx = np.asarray([cxf + r * lx for lx, _ in verts], dtype=np.int64)
    vy = np.asarray([cyf + r * ly for _, ly in verts], dtype=np.int64)
    nonneg = np.ones((h, w), dtype=bool)
    nonpos = np.ones((h, w), dtype=bool)
    k = len(verts)
    for i in range(k):
        ex = vx[(i + 1) % k] - vx[i]
        ey = vy[(i + 1) % k] - vy[i]
        cross = ex * (ys - vy[i]) - ey * (xs - vx[i])
        nonneg &= cross >= 0
        nonpos &= cross <= 0
    return nonneg | nonpos


def _ellipse_mask(h: int, w: int, cx: int, cy: int, a: int, b: int) -> np.ndarray:
    xs, ys = _pixel_centers(h, w)
    af = a << _FP
    bf = b << _FP
    # clamping |dx| to af+1 (and |dy| to bf+1) cannot change the predicate:
    # such points are already outside. It keeps the squares inside int64.
    dx = np.clip(xs - ((cx << _FP) + _HALF), -(af + 1), af + 1)
    dy = np.clip(ys - ((cy << _FP) + _HALF), -(bf + 1), bf + 1)
    return (dx * bf) ** 2 + (dy * af) ** 2 <= (af * bf) ** 2


def shape_mask(h: int, w: int, class_id: int, cx: int, cy: int, r: int) -> np.ndarray:
    kind, orientation, _ = class_style(class_id)
    if kind.startswith("poly"):
        return _polygon_mask(h, w, cx, cy, r, _POLY_LUT[int(kind[4:])][orientation])
    minor = max(1, (5 * r) // 8)
    if kind == "ellipse_wide":
        return _ellipse_mask(h, w, cx, cy, r, minor)
    return _ellipse_mask(h, w, cx, cy, minor, r)


def _hsv_to_rgb(hue: float, sat: float, val):
    """Piecewise-linear HSV to RGB; val may be a scalar or an array."""
    hue = hue % 1.0
    sector = int(hue * 6.0) % 6
    f = hue * 6.0 - int(hue * 6.0)
    v = np.asarray(val, dtype=np.float64)
    p = v * (1.0 - sat)
    q = v * (1.0 - sat * f)
    t = v * (1.0 - sat * (1.0 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    r, g, b = table[sector]
    return np.stack(np.broadcast_arrays(r, g, b)).astype(np.float64)


def _scale_factor(h: int, w: int) -> int:
    return max(1, min(h, w) // 64)


def _background(rng: np.random.Generator, h: int, w: int, noise_level: float) -> np.ndarray:
    hue = rng.uniform(0.0, 1.0)
    base = rng.uniform(0.35, 0.55)
    slope_x = rng.uniform(-0.25, 0.25)
    slope_y = rng.uniform(-0.25, 0.25)
    gx = np.linspace(0.0, 1.0, w, dtype=np.float64)[None, :]
    gy = np.linspace(0.0, 1.0, h, dtype=np.float64)[:, None]
    value = np.clip(base + slope_x * gx + slope_y * gy, 0.05, 0.95)
    img = _hsv_to_rgb(hue, 0.12, np.broadcast_to(value, (h, w)))
    noise = rng.uniform(-1.0, 1.0, size=(3, h, w)) * noise_level
    return np.clip(img + noise, 0.0, 1.0)


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    for c in range(3):
        img[c][mask] = color[c]


def _sample_placement(rng: np.random.Generator, h: int, w: int, r_lo: int, r_hi: int) -> tuple[int, int, int]:
    r = int(rng.integers(r_lo, r_hi + 1))
    cx = int(rng.integers(r + 1, w - r - 1))
    cy = int(rng.integers(r + 1, h - r - 1))
    return cx, cy, r


def _other_class(rng: np.random.Generator, n_classes: int, avoid: int) -> int:
    c = int(rng.integers(n_classes - 1))
    return c + 1 if c >= avoid else c


_HUE_JITTER = 0.03


def _render_scene(
    rng: np.random.Generator,
    spec: SynthSpec,
    common_class: int,
    n_distractors: int,
    keep_parts: bool = False,
):
    """One image: background, distractors, then the common shape on top.

    keep_parts additionally returns the placed distractor masks so tests can
    cross-check that none of them leaks into the gt raster.
    """
    h, w = spec.image_size
    s = _scale_factor(h, w)
    img = _background(rng, h, w, spec.noise_level)

    _, _, base_hue = class_style(common_class)
    cx, cy, r = _sample_placement(rng, h, w, 10 * s, 18 * s)
    common_hue = base_hue + rng.uniform(-_HUE_JITTER, _HUE_JITTER)
    common = shape_mask(h, w, common_class, cx, cy, r)

    parts: list[np.ndarray] = []
    for _ in range(n_distractors):
        cls = _other_class(rng, spec.n_shape_classes, common_class)
        _, _, d_base = class_style(cls)
        d_hue = d_base + rng.uniform(-_HUE_JITTER, _HUE_JITTER)
        placed = None
        for _attempt in range(40):
            dcx, dcy, dr = _sample_placement(rng, h, w, 6 * s, 12 * s)
            cand = shape_mask(h, w, cls, dcx, dcy, dr)
            if not np.any(cand & common):
                placed = cand
                break
        if placed is not None:
            parts.append(placed)
            _paint(img, placed, _hsv_to_rgb(d_hue, 0.8, 0.9))

    _paint(img, common, _hsv_to_rgb(common_hue, 0.8, 0.9))
    if keep_parts:
        return img.astype(np.float32), common.astype(np.float32), parts
    return img.astype(np.float32), common.astype(np.float32)


def synth_group(spec: SynthSpec, group_index: int) -> ImageGroup:
    rng_c = np.random.default_rng([spec.seed, _STREAM_COMMON, group_index])
    common_class = int(rng_c.integers(spec.n_shape_classes))
    images, masks = [], []
    lo, hi = spec.distractors
    for n in range(spec.group_size):
        rng = np.random.default_rng([spec.seed, _STREAM_IMAGE, group_index, n])
        n_distractors = int(rng.integers(lo, hi + 1))
        img, mask = _render_scene(rng, spec, common_class, n_distractors)
        images.append(img)
        masks.append(mask)
    return ImageGroup(images, masks, f"group_{group_index:03d}")


def synth_aux(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Single salient shape of any class, no distractors."""
    rng = np.random.default_rng([spec.seed, _STREAM_AUX, index])
    cls = int(rng.integers(spec.n_shape_classes))
    img, mask = _render_scene(rng, spec, cls, 0)
    return img, mask


def _write_pairs(base: Path, stems: list[str], images: list[np.ndarray], masks: list[np.ndarray]) -> None:
    (base / "img").mkdir(parents=True, exist_ok=True)
    (base / "gt").mkdir(parents=True, exist_ok=True)
    for stem, img, mask in zip(stems, images, masks):
        write_image(base / "img" / f"{stem}.ppm", img)
        write_image(base / "gt" / f"{stem}.pgm", mask)


def write_dataset(spec: SynthSpec, out_root: str | Path) -> dict[str, int]:
    """Generate train/ (groups + aux) and val/ (held-out groups) trees.

    Validation groups use indices n_groups..n_groups+val_groups-1 so their
    jitter streams never coincide with a training group's.
    """
    out_root = Path(out_root)
    counts = {"train_groups": 0, "train_images": 0, "aux_images": 0, "val_groups": 0, "val_images": 0}
    for g in range(spec.n_groups):
        group = synth_group(spec, g)
        stems = [f"im{n}" for n in range(group.size)]
        _write_pairs(out_root / "train" / group.group_id, stems, group.images, group.gt)
        counts["train_groups"] += 1
        counts["train_images"] += group.size
    for k in range(spec.aux_count):
        img, mask = synth_aux(spec, k)
        _write_pairs(out_root / "train" / "aux", [f"aux{k}"], [img], [mask])
        counts["aux_images"] += 1
    for v in range(spec.val_groups):
        group = synth_group(spec, spec.n_groups + v)
        stems = [f"im{n}" for n in range(group.size)]
        _write_pairs(out_root / "val" / group.group_id, stems, group.images, group.gt)
        counts["val_groups"] += 1
        counts["val_images"] += group.size
    return counts
