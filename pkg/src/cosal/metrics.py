"""Evaluation toolbox: MAE, max F-measure with PR curve, S-measure, max
E-measure, and directory-level aggregation.

All metric math runs in float64. Aggregation conventions, fixed here
because published toolboxes disagree: binarization is pred >= k/255 over
256 thresholds; per-image precision/recall are averaged per threshold
before the F quotient; images with empty ground truth are excluded from
the F sweep (counted as warnings) but still scored by MAE/S/E through
their degenerate conventions; dataset reduction follows sorted stems.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pnm
from .errors import ShapeError, UsageError

_EPS = np.finfo(np.float64).eps
_PR_EPS = 1e-7


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} vs gt {g.shape}")
    return p, g >= 0.5


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.abs(p - g).mean())


def f_curve(preds, gts, beta_sq: float = 0.3) -> tuple[float, list[tuple[float, float]], int]:
    """Dataset-level F sweep. Returns (f_max, [(recall, precision)] per
    threshold, number of images excluded for empty ground truth)."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} preds but {len(gts)} gts")
    usable = []
    for pred, gt in zip(preds, gts):
        p, g = _pair(pred, gt)
        if g.any():
            usable.append((p, g))
    excluded = len(preds) - len(usable)
    if not usable:
        raise UsageError("f_curve needs at least one image with a non-empty ground truth")
    f_max = 0.0
    pr_points = []
    n = len(usable)
    for k in range(256):
        th = k / 255.0
        p_acc = 0.0
        r_acc = 0.0
        for p, g in usable:
            b = p >= th
            tp = float(np.count_nonzero(b & g))
            p_acc += tp / (float(np.count_nonzero(b)) + _PR_EPS)
            r_acc += tp / (float(np.count_nonzero(g)) + _PR_EPS)
        prec = p_acc / n
        rec = r_acc / n
        den = beta_sq * prec + rec
        f = (1.0 + beta_sq) * prec * rec / den if den > 0 else 0.0
        f_max = max(f_max, f)
        pr_points.append((rec, prec))
    return f_max, pr_points, excluded


# ---- S-measure ------------------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    mu = float(gt.mean())
    o_fg = _object_score(pred[gt])
    o_bg = _object_score(1.0 - pred[~gt])
    return mu * o_fg + (1.0 - mu) * o_bg


def _region_ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x = float(p.mean())
    y = float(g.mean())
    if n > 1:
        sig_x = float(((p - x) ** 2).sum() / (n - 1))
        sig_y = float(((g - y) ** 2).sum() / (n - 1))
        sig_xy = float(((p - x) * (g - y)).sum() / (n - 1))
    else:
        sig_x = sig_y = sig_xy = 0.0
    a = 4.0 * x * y * sig_xy
    b = (x * x + y * y) * (sig_x + sig_y)
    if a != 0.0:
        return a / (b + _EPS)
    return 1.0 if b == 0.0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    total = float(gt.sum())
    cols = np.arange(1, w + 1, dtype=np.float64)
    rows = np.arange(1, h + 1, dtype=np.float64)
    # 1-based centroid, round half up, then used as a split count
    x_c = _round_half_up(float((gt.sum(axis=0) * cols).sum()) / total)
    y_c = _round_half_up(float((gt.sum(axis=1) * rows).sum()) / total)
    area = float(h * w)
    score = 0.0
    for rs, cs in ((slice(0, y_c), slice(0, x_c)), (slice(0, y_c), slice(x_c, w)), (slice(y_c, h), slice(0, x_c)), (slice(y_c, h), slice(x_c, w))):
        g_blk = gt[rs, cs].astype(np.float64)
        p_blk = pred[rs, cs]
        weight = g_blk.size / area
        if g_blk.size:
            score += weight * _region_ssim(p_blk, g_blk)
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    p, g = _pair(pred, gt)
    mu = float(g.mean())
    if mu == 0.0:
        return float(np.clip(1.0 - p.mean(), 0.0, 1.0))
    if mu == 1.0:
        return float(np.clip(p.mean(), 0.0, 1.0))
    s = alpha * _s_object(p, g) + (1.0 - alpha) * _s_region(p, g)
    return float(np.clip(s, 0.0, 1.0))


# ---- E-measure ------------------------------------------------------------------


def _alignment_score(fm: np.ndarray, g: np.ndarray) -> float:
    hw = g.size
    if not g.any():
        enhanced = 1.0 - fm
    elif g.all():
        enhanced = fm.astype(np.float64)
    else:
        gg = g.astype(np.float64)
        ff = fm.astype(np.float64)
        phi_g = gg - gg.mean()
        phi_f = ff - ff.mean()
        xi = 2.0 * phi_g * phi_f / (phi_g * phi_g + phi_f * phi_f + _EPS)
        base = xi + 1.0
        enhanced = base * base / 4.0
    return float(enhanced.sum() / hw)


def e_measure_max(pred, gt) -> float:
    p, g = _pair(pred, gt)
    best = 0.0
    for k in range(256):
        fm = p >= (k / 255.0)
        best = max(best, _alignment_score(fm, g))
    return best


# ---- dataset aggregation ----------------------------------------------------------


@dataclass
class MetricsReport:
    mae: float
    f_max: float
    s_alpha: float
    e_max: float
    pr_points: list
    per_image: list
    n_images: int
    warnings: list

    def to_json_dict(self) -> dict:
        return {
            "mae": self.mae,
            "f_max": self.f_max,
            "s_alpha": self.s_alpha,
            "e_max": self.e_max,
            "n_images": self.n_images,
            "warnings": list(self.warnings),
        }


def dataset_metrics(preds, gts, stems=None) -> MetricsReport:
    """Aggregate over parallel pred/gt lists; order is fixed by the caller."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} preds but {len(gts)} gts")
    if not preds:
        raise UsageError("no prediction/ground-truth pairs to evaluate")
    stems = list(stems) if stems is not None else [f"im{i}" for i in range(len(preds))]
    warnings = []
    per_image = []
    maes, ss, es = [], [], []
    for stem, pred, gt in zip(stems, preds, gts):
        m = mae(pred, gt)
        s = s_measure(pred, gt)
        e = e_measure_max(pred, gt)
        maes.append(m)
        ss.append(s)
        es.append(e)
        per_image.append({"stem": stem, "mae": m, "s_alpha": s, "e_max": e})
        if not (np.asarray(gt, dtype=np.float64) >= 0.5).any():
            warnings.append(f"{stem}: empty ground truth, excluded from the F sweep")
    f_max, pr_points, _ = f_curve(preds, gts)
    return MetricsReport(
        mae=float(np.mean(maes)),
        f_max=f_max,
        s_alpha=float(np.mean(ss)),
        e_max=float(np.mean(es)),
        pr_points=pr_points,
        per_image=per_image,
        n_images=len(preds),
        warnings=warnings,
    )


def evaluate_dataset(pred_dir, gt_dir) -> MetricsReport:
    """Match *.pgm stems across the two directories, skip and report any
    problem pairs, and aggregate the rest in sorted-stem order."""
    pred_dir = Path(pred_dir)
    gt_dir = Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"not a directory: {d}")
    pred_files = {p.stem: p for p in pred_dir.glob("*.pgm")}
    gt_files = {p.stem: p for p in gt_dir.glob("*.pgm")}
    warnings = []
    for stem in sorted(pred_files.keys() - gt_files.keys()):
        warnings.append(f"{stem}: prediction has no ground truth, skipped")
    for stem in sorted(gt_files.keys() - pred_files.keys()):
        warnings.append(f"{stem}: ground truth has no prediction, skipped")
    stems, preds, gts = [], [], []
    for stem in sorted(pred_files.keys() & gt_files.keys()):
        pred = pnm.read_image(pred_files[stem])
        gt = pnm.read_image(gt_files[stem])
        if pred.ndim != 2 or gt.ndim != 2:
            warnings.append(f"{stem}: expected grayscale maps, skipped")
            continue
        if pred.shape != gt.shape:
            warnings.append(f"{stem}: size mismatch {pred.shape} vs {gt.shape}, skipped")
            continue
        stems.append(stem)
        preds.append(pred.astype(np.float64))
        gts.append((gt >= 0.5).astype(np.float64))
    if not stems:
        raise UsageError("no evaluable prediction/ground-truth pairs found")
    report = dataset_metrics(preds, gts, stems)
    report.warnings = warnings + report.warnings
    return report


def write_report_json(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")


def write_pr_csv(report: MetricsReport, path) -> None:
    lines = ["threshold,precision,recall"]
    for k, (rec, prec) in enumerate(report.pr_points):
        lines.append(f"{k / 255.0:.8f},{prec:.8f},{rec:.8f}")
    Path(path).write_text("\n".join(lines) + "\n")
