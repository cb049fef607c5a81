"""Supervision: pixel losses, mask arithmetic, and the contrastive terms.

Reduction convention everywhere: mean over pixels (or windows), then mean
over maps, so loss magnitudes do not scale with group size or resolution.
The two contrastive objectives sum over images and ordered pairs as given,
since their operand counts are part of the objective itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossConfig
from .errors import ConfigError, ShapeError, UsageError

# fixed clamp for the log arguments; a perfectly confident correct pixel
# then costs -log(1-1e-7) instead of 0
_BCE_EPS = 1e-7


def _as_list(x) -> list:
    if isinstance(x, (list, tuple)):
        return list(x)
    return [x]


def _pair_lists(maps, targets) -> tuple[list[Tensor], list[Tensor]]:
    ms = _as_list(maps)
    ts = _as_list(targets)
    if not ms:
        raise UsageError("loss called with zero maps")
    if len(ms) != len(ts):
        raise ShapeError(f"{len(ms)} maps but {len(ts)} targets")
    out_t = []
    for m, t in zip(ms, ts):
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        if tuple(data.shape) != tuple(m.shape):
            raise ShapeError(f"map {m.shape} vs target {data.shape}")
        out_t.append(Tensor(data.astype(m.data.dtype)))
    return ms, out_t


def _mean_over(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / len(parts))


def bce_loss(maps, targets) -> Tensor:
    """Per-pixel cross-entropy, mean over pixels then mean over maps."""
    ms, ts = _pair_lists(maps, targets)
    parts = []
    for m, t in zip(ms, ts):
        mc = ad.clamp(m, _BCE_EPS, 1.0 - _BCE_EPS)
        ll = t * ad.log(mc) + (1.0 - t) * ad.log(1.0 - mc)
        parts.append(-ad.reduce(ll, "mean"))
    return _mean_over(parts)


def ssim_loss(maps, targets, cfg: LossConfig) -> Tensor:
    """Structural similarity over all valid stride-1 windows with a uniform
    box filter; population moments; loss is 1 minus the mean window score."""
    ms, ts = _pair_lists(maps, targets)
    w = cfg.ssim_window
    parts = []
    for m, t in zip(ms, ts):
        h, wid = m.shape
        if h < w or wid < w:
            raise ConfigError(f"map {h}x{wid} smaller than the {w}x{w} window")
        dtype = m.data.dtype
        kernel = Tensor(np.full((1, 1, w, w), 1.0 / (w * w), dtype=dtype))
        zero = Tensor(np.zeros((1,), dtype=dtype))

        def box(x: Tensor) -> Tensor:
            return ad.conv2d(x, kernel, zero, stride=1, pad=0)

        x = ad.reshape(m, (1, h, wid))
        y = ad.reshape(t, (1, h, wid))
        mu_x = box(x)
        mu_y = box(y)
        var_x = box(x * x) - mu_x * mu_x
        var_y = box(y * y) - mu_y * mu_y
        cov = box(x * y) - mu_x * mu_y
        score = ((mu_x * mu_y * 2.0 + cfg.ssim_c1) * (cov * 2.0 + cfg.ssim_c2)) / (
            (mu_x * mu_x + mu_y * mu_y + cfg.ssim_c1) * (var_x + var_y + cfg.ssim_c2)
        )
        parts.append(1.0 - ad.reduce(score, "mean"))
    return _mean_over(parts)


def fmeasure_loss(maps, targets, cfg: LossConfig) -> Tensor:
    """1 - Fbeta with epsilon-guarded precision and recall, per map."""
    ms, ts = _pair_lists(maps, targets)
    eps = cfg.epsilon
    bsq = cfg.beta_sq
    parts = []
    for m, t in zip(ms, ts):
        inter = ad.reduce(m * t, "sum")
        p = inter / (ad.reduce(m, "sum") + eps)
        r = inter / (ad.reduce(t, "sum") + eps)
        f = (p * r * (1.0 + bsq)) / (p * bsq + r + eps)
        parts.append(1.0 - f)
    return _mean_over(parts)


def composite_losses(m, m_s, h, t, t_s, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """The three map-supervision terms: l_c on the fused maps, l_s on the
    auxiliary single-image maps (0 when there are none), l_ct on the early
    maps. SSIM applies only to the fused maps."""
    l_c = bce_loss(m, t) + ssim_loss(m, t, cfg) + fmeasure_loss(m, t, cfg)
    if _as_list(h):
        l_s = bce_loss(h, t_s) + fmeasure_loss(h, t_s, cfg)
    else:
        l_s = Tensor(np.zeros((1,), dtype=_as_list(m)[0].data.dtype))
    l_ct = bce_loss(m_s, t) + fmeasure_loss(m_s, t, cfg)
    return l_c, l_s, l_ct


# ---- contrastive mask arithmetic ---------------------------------------------


@dataclass(frozen=True)
class MaskTriple:
    """Disjoint regions derived from the early/fused disagreement: m_a is
    disagreement on true pixels, m_p agreement on true pixels, m_n
    disagreement on background. m_c is the raw disagreement mask."""

    m_a: np.ndarray
    m_p: np.ndarray
    m_n: np.ndarray
    m_c: np.ndarray


def _plain_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def build_mask_triple(m_s, m, t, cfg: LossConfig) -> MaskTriple:
    """Binarize both maps, XOR them, and split by the ground truth. The
    results are plain arrays: constants with no gradient path."""
    a = _plain_array(m_s)
    b = _plain_array(m)
    gt = _plain_array(t)
    if a.shape != b.shape or a.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} / {b.shape} / {gt.shape}")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise UsageError("ground truth mask must be binary")
    th = cfg.binarize_threshold
    sb = a >= th
    mb = b >= th
    tb = gt >= 0.5
    m_c = sb ^ mb
    f32 = lambda x: x.astype(np.float32)
    return MaskTriple(f32(m_c & tb), f32(tb & ~m_c), f32(m_c & ~tb), f32(m_c))


def masked_embed(tokens: Tensor, mask: np.ndarray, grid: tuple[int, int]) -> Tensor | None:
    """Average-pool the tokens selected by the mask, after shrinking the
    mask to the token grid (block mean, re-binarized at 0.5). None when no
    token survives: an absent region has no embedding."""
    h6, w6 = grid
    q, d = tokens.shape
    if q != h6 * w6:
        raise ShapeError(f"{q} tokens do not tile a {h6}x{w6} grid")
    mask = _plain_array(mask)
    hh, ww = mask.shape
    if hh % h6 or ww % w6:
        raise ShapeError(f"mask {hh}x{ww} does not split into a {h6}x{w6} grid")
    block = mask.reshape(h6, hh // h6, w6, ww // w6).mean(axis=(1, 3))
    on = (block >= 0.5).astype(np.float64).reshape(-1)
    count = on.sum()
    if count == 0:
        return None
    weights = Tensor((on / count).astype(tokens.data.dtype).reshape(q, 1))
    pooled = ad.reduce(tokens * weights, "sum", axis=0)
    return ad.reshape(pooled, (1, d))


def _dot(a: Tensor, b: Tensor) -> Tensor:
    return ad.reduce(a * b, "sum")


def _zero_like_embeddings(groups: list) -> Tensor:
    for z in groups:
        if z is not None:
            return Tensor(np.zeros((1,), dtype=z.data.dtype))
    return Tensor(np.zeros((1,), dtype=np.float32))


def contrastive_single(z_a, z_p, z_n, cfg: LossConfig) -> Tensor:
    """Per-image InfoNCE: pull the disagreement-on-object embedding toward
    the agreed-object embedding, away from the noise embedding. Images with
    any region absent contribute nothing. Sum over images."""
    if not (len(z_a) == len(z_p) == len(z_n)):
        raise UsageError("embedding lists must have one entry per image")
    inv_tau = 1.0 / cfg.tau
    total = None
    for za, zp, zn in zip(z_a, z_p, z_n):
        if za is None or zp is None or zn is None:
            continue
        num = ad.exp(_dot(za, zp) * inv_tau)
        den = ad.exp(_dot(za, zn) * inv_tau)
        if not cfg.paper_exact_denominator:
            den = den + num
        term = ad.log(den) - ad.log(num)
        total = term if total is None else total + term
    return total if total is not None else _zero_like_embeddings(list(z_a) + list(z_n))


def contrastive_group(z_t, z_n, cfg: LossConfig) -> Tensor:
    """Cross-image InfoNCE: every ordered pair of ground-truth-masked
    embeddings is a positive; the negatives are all present noise
    embeddings in the group. Sum over pairs."""
    if len(z_t) != len(z_n):
        raise UsageError("embedding lists must have one entry per image")
    present = [z for z in z_t if z is not None]
    negatives = [z for z in z_n if z is not None]
    if len(present) < 2 or not negatives:
        return _zero_like_embeddings(list(z_t) + list(z_n))
    inv_tau = 1.0 / cfg.tau
    total = None
    for i, zi in enumerate(present):
        den_neg = None
        for zn in negatives:
            e = ad.exp(_dot(zi, zn) * inv_tau)
            den_neg = e if den_neg is None else den_neg + e
        for j, zj in enumerate(present):
            if i == j:
                continue
            num = ad.exp(_dot(zi, zj) * inv_tau)
            den = den_neg if cfg.paper_exact_denominator else den_neg + num
            term = ad.log(den) - ad.log(num)
            total = term if total is None else total + term
    return total


# ---- composition --------------------------------------------------------------


@dataclass
class LossReport:
    """Float snapshot of every term plus the live total for backprop.
    Disabled terms are reported as 0 and excluded from the total."""

    l_c: float
    l_s: float
    l_ct: float
    l_single: float
    l_group: float
    l_cont: float
    total: float
    enabled: dict = field(default_factory=dict)
    tensor: Tensor | None = None

    CSV_HEADER = "step,l_c,l_s,l_ct,l_single,l_group,total"

    def csv_line(self, step: int) -> str:
        vals = (self.l_c, self.l_s, self.l_ct, self.l_single, self.l_group, self.total)
        return f"{step}," + ",".join(f"{v:.8f}" for v in vals)


def _value(x) -> float:
    return float(x.item()) if isinstance(x, Tensor) else float(x)


def total_loss(l_c, l_s, l_ct, l_single, l_group, *, main: bool = True, aux: bool = True, early: bool = True, contrastive: bool = True) -> LossReport:
    """Sum the enabled terms; the contrastive pair first folds into l_cont."""
    picked = []

    def gate(part, on: bool) -> float:
        if not on:
            return 0.0
        picked.append(part)
        return _value(part)

    v_c = gate(l_c, main)
    v_s = gate(l_s, aux)
    v_ct = gate(l_ct, early)
    v_single = gate(l_single, contrastive)
    v_group = gate(l_group, contrastive)

    tensor = None
    float_extra = 0.0
    for part in picked:
        if isinstance(part, Tensor):
            tensor = part if tensor is None else tensor + part
        else:
            float_extra += float(part)
    if tensor is not None and float_extra:
        tensor = tensor + float_extra
    total_v = v_c + v_s + v_ct + v_single + v_group
    return LossReport(
        l_c=v_c,
        l_s=v_s,
        l_ct=v_ct,
        l_single=v_single,
        l_group=v_group,
        l_cont=v_single + v_group,
        total=total_v,
        enabled={"main": main, "aux": aux, "early": early, "contrastive": contrastive},
        tensor=tensor,
    )
