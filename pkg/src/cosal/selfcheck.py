"""Build-gating property suites, runnable from the command line.

Five suites: central finite-difference gradient oracles for every tensor
primitive and every loss; permutation invariance of the cross-image
stage; a position-injection counterexample proving the invariance suite
has teeth; brute-force mask arithmetic against independent per-pixel
oracles; and the threshold-sweep metrics against independent
re-implementations. Each suite returns PropertyResult rows; a failed row
names the property and carries the inputs that broke it.

The mask and permutation suites take the object under test as a
parameter, so a deliberately sabotaged variant can be handed in to show
the suite rejects it. run_mutation packages the two standard saboteurs:
"xor-to-or" (wrong mask combination rule) and "pe-in-group" (positional
signal forced into the cross-image stage).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from . import metrics
from .autodiff import Tensor
from .config import LossConfig, ModelConfig, SynthSpec
from .data import ImageGroup
from .errors import PropertyFailure, UsageError
from .network import CosalModel
from .synth import synth_group

_PR_EPS = 1e-7
_EPS64 = np.finfo(np.float64).eps
_INJECTION_FLOOR = 1e-6


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str


# ---- gradient oracle suite --------------------------------------------------------


def _t(x: np.ndarray) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def _projected(op, x0: np.ndarray, rng: np.random.Generator):
    """Turn a tensor-valued op into a scalar f via a fixed random projection."""
    y0 = op(_t(x0))
    w = _t(rng.standard_normal(y0.shape))

    def fn(t: Tensor) -> Tensor:
        return ad.reduce(op(t) * w, "sum")

    return fn


def _signed_away_from_zero(rng: np.random.Generator, shape, lo: float, hi: float) -> np.ndarray:
    mag = rng.uniform(lo, hi, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _case_add(rng, i):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    if i % 2 == 0:
        return _projected(lambda t: ad.add(t, _t(b)), a, rng), a
    return _projected(lambda t: ad.add(_t(a), t), b, rng), b


def _case_sub(rng, i):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    if i % 2 == 0:
        return _projected(lambda t: ad.sub(t, _t(b)), a, rng), a
    return _projected(lambda t: ad.sub(_t(a), t), b, rng), b


def _case_mul(rng, i):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    if i % 2 == 0:
        return _projected(lambda t: ad.mul(t, _t(b)), a, rng), a
    return _projected(lambda t: ad.mul(_t(a), t), b, rng), b


def _case_div(rng, i):
    a = rng.standard_normal((3, 4))
    b = _signed_away_from_zero(rng, (3, 4), 0.5, 1.5)
    if i % 2 == 0:
        return _projected(lambda t: ad.div(t, _t(b)), a, rng), a
    return _projected(lambda t: ad.div(_t(a), t), b, rng), b


def _case_matmul(rng, i):
    canonical = i % 4 >= 2
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    if i % 2 == 0:
        return _projected(lambda t: ad.matmul(t, _t(b), order_canonical=canonical), a, rng), a
    return _projected(lambda t: ad.matmul(_t(a), t, order_canonical=canonical), b, rng), b


def _case_relu(rng, i):
    x = _signed_away_from_zero(rng, (3, 5), 0.1, 1.2)
    return _projected(ad.relu, x, rng), x


def _case_sigmoid(rng, i):
    x = rng.standard_normal((3, 5))
    return _projected(ad.sigmoid, x, rng), x


def _case_exp(rng, i):
    x = rng.uniform(-1.0, 1.0, (3, 5))
    return _projected(ad.exp, x, rng), x


def _case_log(rng, i):
    x = rng.uniform(0.2, 2.0, (3, 5))
    return _projected(ad.log, x, rng), x


def _case_sqrt(rng, i):
    x = rng.uniform(0.2, 2.0, (3, 5))
    return _projected(ad.sqrt, x, rng), x


def _case_clamp(rng, i):
    # keep every entry at least 0.1 away from the clamp edges: the kink there
    # makes central differences meaningless
    zones = rng.integers(0, 3, (3, 5))
    x = np.where(zones == 0, rng.uniform(-1.4, -0.7, (3, 5)), 0.0)
    x = np.where(zones == 1, rng.uniform(-0.5, 0.5, (3, 5)), x)
    x = np.where(zones == 2, rng.uniform(0.7, 1.4, (3, 5)), x)
    return _projected(lambda t: ad.clamp(t, -0.6, 0.6), x, rng), x


def _case_softmax(rng, i):
    canonical = i % 2 == 1
    x = rng.standard_normal((3, 5))
    return _projected(lambda t: ad.softmax(t, axis=-1, order_canonical=canonical), x, rng), x


def _case_layer_norm(rng, i):
    x = rng.standard_normal((4, 6))
    gain = rng.uniform(0.5, 1.5, (6,))
    bias = rng.standard_normal((6,))
    which = i % 3
    if which == 0:
        return _projected(lambda t: ad.layer_norm(t, _t(gain), _t(bias)), x, rng), x
    if which == 1:
        return _projected(lambda t: ad.layer_norm(_t(x), t, _t(bias)), gain, rng), gain
    return _projected(lambda t: ad.layer_norm(_t(x), _t(gain), t), bias, rng), bias


def _case_conv2d(rng, i):
    stride, pad = (2, 0) if i % 5 == 4 else (1, 1)
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal((3,))
    which = i % 3
    if which == 0:
        return _projected(lambda t: ad.conv2d(t, _t(w), _t(b), stride=stride, pad=pad), x, rng), x
    if which == 1:
        return _projected(lambda t: ad.conv2d(_t(x), t, _t(b), stride=stride, pad=pad), w, rng), w
    return _projected(lambda t: ad.conv2d(_t(x), _t(w), t, stride=stride, pad=pad), b, rng), b


def _case_maxpool2(rng, i):
    x = np.empty((2, 4, 4), dtype=np.float64)
    for c in range(2):
        for bi in range(2):
            for bj in range(2):
                vals = np.sort(rng.uniform(0.0, 1.0, 4)) + np.arange(4) * 0.05
                rng.shuffle(vals)
                x[c, 2 * bi : 2 * bi + 2, 2 * bj : 2 * bj + 2] = vals.reshape(2, 2)
    return _projected(ad.maxpool2, x, rng), x


def _case_bilinear_upsample(rng, i):
    x = rng.standard_normal((2, 4, 4))
    return _projected(lambda t: ad.bilinear_upsample(t, 2), x, rng), x


def _case_reduce_sum(rng, i):
    x = rng.standard_normal((3, 5))
    axis = None if i % 2 == 0 else 0
    return _projected(lambda t: ad.reduce(t, "sum", axis=axis), x, rng), x


def _case_reduce_mean(rng, i):
    x = rng.standard_normal((3, 5))
    axis = None if i % 2 == 0 else 1
    return _projected(lambda t: ad.reduce(t, "mean", axis=axis), x, rng), x


def _case_concat(rng, i):
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((4, 3))
    if i % 2 == 0:
        return _projected(lambda t: ad.concat([t, _t(b)], axis=0), a, rng), a
    return _projected(lambda t: ad.concat([_t(a), t], axis=0), b, rng), b


def _case_narrow(rng, i):
    x = rng.standard_normal((5, 4))
    return _projected(lambda t: ad.narrow(t, 0, 1, 3), x, rng), x


def _case_reshape(rng, i):
    x = rng.standard_normal((3, 4))
    return _projected(lambda t: ad.reshape(t, (2, 6)), x, rng), x


def _case_transpose(rng, i):
    x = rng.standard_normal((2, 3, 4))
    return _projected(lambda t: ad.transpose(t, (2, 0, 1)), x, rng), x


def _binary(rng, shape) -> np.ndarray:
    return (rng.random(shape) < 0.5).astype(np.float64)


def _case_loss_bce(rng, i):
    probe = rng.uniform(0.05, 0.95, (6, 6))
    other = rng.uniform(0.05, 0.95, (6, 6))
    t1 = _binary(rng, (6, 6))
    t2 = _binary(rng, (6, 6))

    def op(t):
        return losses.bce_loss([t, _t(other)], [_t(t1), _t(t2)])

    return op, probe


def _case_loss_ssim(rng, i):
    cfg = LossConfig(ssim_window=5)
    probe = rng.uniform(0.05, 0.95, (8, 8))
    tgt = _binary(rng, (8, 8))

    def op(t):
        return losses.ssim_loss([t], [_t(tgt)], cfg)

    return op, probe


def _case_loss_fmeasure(rng, i):
    cfg = LossConfig()
    probe = rng.uniform(0.05, 0.95, (6, 6))
    tgt = _binary(rng, (6, 6))
    tgt[0, 0] = 1.0  # non-empty target keeps recall informative

    def op(t):
        return losses.fmeasure_loss([t], [_t(tgt)], cfg)

    return op, probe


def _case_loss_composite(rng, i):
    cfg = LossConfig(ssim_window=5)
    probe = rng.uniform(0.05, 0.95, (6, 6))
    m2 = rng.uniform(0.05, 0.95, (6, 6))
    e1 = rng.uniform(0.05, 0.95, (6, 6))
    e2 = rng.uniform(0.05, 0.95, (6, 6))
    a1 = rng.uniform(0.05, 0.95, (6, 6))
    t1, t2, ta = _binary(rng, (6, 6)), _binary(rng, (6, 6)), _binary(rng, (6, 6))

    def op(t):
        l_c, l_s, l_ct = losses.composite_losses(
            [t, _t(m2)], [_t(e1), _t(e2)], [_t(a1)], [_t(t1), _t(t2)], [_t(ta)], cfg
        )
        return l_c + l_s + l_ct

    return op, probe


def _embedding(rng) -> np.ndarray:
    # small entries keep exp(dot / tau) far from overflow at tau = 0.1
    return rng.uniform(-0.2, 0.2, (1, 6))


def _case_loss_contrastive_single(rng, i):
    cfg = LossConfig(paper_exact_denominator=bool((i // 3) % 2))
    probe = _embedding(rng)
    za2, zp1, zp2, zn1, zn2 = (_t(_embedding(rng)) for _ in range(5))
    third_absent = i % 4 == 3
    which = i % 3

    def op(t):
        slots = {
            0: ([t, za2], [zp1, zp2], [zn1, zn2]),
            1: ([_t(probe), za2], [t, zp2], [zn1, zn2]),
            2: ([_t(probe), za2], [zp1, zp2], [t, zn2]),
        }[which]
        z_a, z_p, z_n = ([*lst, None] for lst in slots) if third_absent else slots
        return losses.contrastive_single(z_a, z_p, z_n, cfg)

    return op, probe


def _case_loss_contrastive_group(rng, i):
    cfg = LossConfig(paper_exact_denominator=bool((i // 2) % 2))
    probe = _embedding(rng)
    zt2, zt3, zn1, zn2 = (_t(_embedding(rng)) for _ in range(4))

    def op(t):
        if i % 2 == 0:
            return losses.contrastive_group([t, zt2, zt3], [zn1, zn2, None], cfg)
        return losses.contrastive_group([zt2, zt3, None], [t, zn2, zn1], cfg)

    return op, probe


_GRADIENT_CASES = (
    ("add", _case_add),
    ("sub", _case_sub),
    ("mul", _case_mul),
    ("div", _case_div),
    ("matmul", _case_matmul),
    ("relu", _case_relu),
    ("sigmoid", _case_sigmoid),
    ("exp", _case_exp),
    ("log", _case_log),
    ("sqrt", _case_sqrt),
    ("clamp", _case_clamp),
    ("softmax", _case_softmax),
    ("layer_norm", _case_layer_norm),
    ("conv2d", _case_conv2d),
    ("maxpool2", _case_maxpool2),
    ("bilinear_upsample", _case_bilinear_upsample),
    ("reduce_sum", _case_reduce_sum),
    ("reduce_mean", _case_reduce_mean),
    ("concat", _case_concat),
    ("narrow", _case_narrow),
    ("reshape", _case_reshape),
    ("transpose", _case_transpose),
    ("loss/bce", _case_loss_bce),
    ("loss/ssim", _case_loss_ssim),
    ("loss/fmeasure", _case_loss_fmeasure),
    ("loss/composite", _case_loss_composite),
    ("loss/contrastive_single", _case_loss_contrastive_single),
    ("loss/contrastive_group", _case_loss_contrastive_group),
)


def check_gradients(seed: int = 0, instances: int = 20, tol: float = 1e-4) -> list[PropertyResult]:
    """Central finite differences against backward() for every primitive and
    every loss, `instances` random cases each, in float64."""
    if instances < 1:
        raise UsageError("instances must be >= 1")
    results = []
    for op_index, (name, build) in enumerate(_GRADIENT_CASES):
        worst = 0.0
        worst_detail = ""
        ok = True
        for i in range(instances):
            rng = np.random.default_rng([seed, 30, op_index, i])
            fn, x0 = build(rng, i)
            # h = 1e-4 keeps truncation error under tol where the losses
            # have steep log curvature; float64 roundoff stays negligible
            report = ad.finite_diff_check(fn, _t(x0), h=1e-4, tol=tol)
            if report.max_rel_err > worst:
                worst = report.max_rel_err
                worst_detail = (
                    f"instance {i}, input index {report.worst_index}, "
                    f"analytic {report.analytic:.6e} vs numeric {report.numeric:.6e}"
                )
            ok = ok and report.passed
        detail = f"worst rel err {worst:.2e} over {instances} instances ({worst_detail})"
        results.append(PropertyResult(f"grad/{name}", ok, detail))
    return results


# ---- permutation invariance of the cross-image stage ------------------------------


_TINY_MODEL_CFG = ModelConfig(
    input_size=(64, 64),
    d=16,
    heads=2,
    ffn_multiplier=2,
    layers_refine=1,
    layers_group=1,
    layers_fuse=1,
    stage_channels=(4, 4, 8, 8),
    proj_dim=8,
    group_size=4,
)


def _tiny_setup(seed: int) -> tuple[CosalModel, ImageGroup]:
    model = CosalModel(_TINY_MODEL_CFG, seed=seed)
    spec = SynthSpec(seed=seed, n_groups=1, group_size=4, image_size=(64, 64))
    return model, synth_group(spec, 0)


def _permutation_sweep(model: CosalModel, group: ImageGroup, n_orders: int, seed: int, debug_positions: bool):
    """Forward the group under shuffled orders and report the largest
    back-aligned output difference, plus where it occurred."""
    n = len(group.images)
    base = model.forward_group(group, debug_positions=debug_positions)
    worst = 0.0
    where = "no permutation tried"
    for r in range(1, n_orders):
        rng = np.random.default_rng([seed, 31, r])
        perm = rng.permutation(n)
        if np.array_equal(perm, np.arange(n)):
            perm = np.roll(perm, 1)
        shuffled = ImageGroup(
            images=[group.images[j] for j in perm],
            gt=[group.gt[j] for j in perm],
            group_id=group.group_id,
        )
        out = model.forward_group(shuffled, debug_positions=debug_positions)
        for k, j in enumerate(perm):
            d_map = float(np.max(np.abs(out.maps[k].data.astype(np.float64) - base.maps[j].data.astype(np.float64))))
            d_tok = float(np.max(np.abs(out.fused[k].data.astype(np.float64) - base.fused[j].data.astype(np.float64))))
            if max(d_map, d_tok) > worst:
                worst = max(d_map, d_tok)
                where = f"order {tuple(int(v) for v in perm)}, image {j}: map diff {d_map:.3e}, fused-token diff {d_tok:.3e}"
    return worst, where


def check_group_permutation(
    model: CosalModel | None = None,
    group: ImageGroup | None = None,
    n_orders: int = 6,
    seed: int = 0,
    tol: float = 1e-6,
    debug_positions: bool = False,
) -> PropertyResult:
    """Shuffling the group must not change any per-image output."""
    if n_orders < 2:
        raise UsageError("n_orders must be >= 2 to compare at least one shuffle")
    if model is None or group is None:
        built_model, built_group = _tiny_setup(seed)
        model = model if model is not None else built_model
        group = group if group is not None else built_group
    worst, where = _permutation_sweep(model, group, n_orders, seed, debug_positions)
    if worst <= tol:
        detail = f"{n_orders - 1} shuffles of {len(group.images)} images: max output diff {worst:.3e}"
        return PropertyResult("group-order-invariance", True, detail)
    return PropertyResult("group-order-invariance", False, f"outputs depend on group order: {where}")


def check_position_injection(n_orders: int = 6, seed: int = 0) -> PropertyResult:
    """Counterexample control: forcing positional signal into the
    cross-image stage must break the invariance the previous check
    demands. If it does not, that check is vacuous."""
    model, group = _tiny_setup(seed)
    worst, where = _permutation_sweep(model, group, n_orders, seed, debug_positions=True)
    if worst > _INJECTION_FLOOR:
        detail = f"invariance breaks as required under injected positions: {where}"
        return PropertyResult("position-injection-breaks-invariance", True, detail)
    return PropertyResult(
        "position-injection-breaks-invariance",
        False,
        f"injected positional signal changed nothing (max diff {worst:.3e}); the invariance suite has no teeth",
    )


# ---- mask arithmetic ---------------------------------------------------------------


def _mutant_or_mask_triple(m_s, m, t, cfg: LossConfig):
    """Deliberately wrong builder (OR instead of symmetric difference),
    kept only so tests and --mutate can prove the suite below rejects it."""
    a = np.asarray(m_s.data if isinstance(m_s, Tensor) else m_s)
    b = np.asarray(m.data if isinstance(m, Tensor) else m)
    gt = np.asarray(t.data if isinstance(t, Tensor) else t)
    sb = a >= cfg.binarize_threshold
    mb = b >= cfg.binarize_threshold
    tb = gt >= 0.5
    m_c = sb | mb
    f32 = lambda x: x.astype(np.float32)
    return losses.MaskTriple(f32(m_c & tb), f32(tb & ~m_c), f32(m_c & ~tb), f32(m_c))


def _bits(x: np.ndarray) -> str:
    return "".join(str(int(v)) for v in np.asarray(x).reshape(-1))


def _check_one_triple(builder, ms: np.ndarray, m: np.ndarray, t: np.ndarray, cfg: LossConfig, label: str) -> str | None:
    """Returns a violation description or None. Structural identities first,
    then exact per-pixel agreement with scalar set logic."""
    triple = builder(ms, m, t, cfg)
    a = triple.m_a.astype(np.int64)
    p = triple.m_p.astype(np.int64)
    n = triple.m_n.astype(np.int64)
    c = triple.m_c.astype(np.int64)
    tb = (t >= 0.5).astype(np.int64)
    case = f"{label}: m_s={_bits(ms)} m={_bits(m)} t={_bits(t)}"
    if not np.array_equal(a | p, tb):
        return f"{case}: union of object regions != target (got {_bits(a | p)})"
    for x, y, names in ((a, p, "m_a/m_p"), (a, n, "m_a/m_n"), (p, n, "m_p/m_n")):
        if np.any(x & y):
            return f"{case}: regions {names} overlap"
    if np.any(n & tb):
        return f"{case}: background region touches the target"
    # independent scalar oracle: python ints, no boolean array ops
    flat = [np.asarray(v).reshape(-1) for v in (ms, m, t)]
    for idx in range(flat[0].size):
        s_bit = int(flat[0][idx] >= cfg.binarize_threshold)
        m_bit = int(flat[1][idx] >= cfg.binarize_threshold)
        t_bit = int(flat[2][idx] >= 0.5)
        c_bit = 1 if s_bit != m_bit else 0
        want = (c_bit * t_bit, t_bit * (1 - c_bit), c_bit * (1 - t_bit), c_bit)
        got = (int(a.reshape(-1)[idx]), int(p.reshape(-1)[idx]), int(n.reshape(-1)[idx]), int(c.reshape(-1)[idx]))
        if want != got:
            return f"{case}: pixel {idx} expected (m_a,m_p,m_n,m_c)={want}, got {got}"
    return None


def check_mask_identities(
    builder=None,
    random_cases: int = 10_000,
    size: tuple[int, int] = (8, 8),
    seed: int = 0,
) -> PropertyResult:
    """Exhaustive 2x2 sweep (4096 triples) plus random larger triples. The
    random sweep checks the same identities with arithmetic formulations so
    neither leg shares the booleans under test."""
    if builder is None:
        builder = losses.build_mask_triple
    cfg = LossConfig()
    for code in range(4096):
        bits = [(code >> k) & 1 for k in range(12)]
        ms = np.array(bits[0:4], dtype=np.float32).reshape(2, 2)
        m = np.array(bits[4:8], dtype=np.float32).reshape(2, 2)
        t = np.array(bits[8:12], dtype=np.float32).reshape(2, 2)
        violation = _check_one_triple(builder, ms, m, t, cfg, f"exhaustive case {code}")
        if violation is not None:
            return PropertyResult("mask-identities", False, violation)
    rng = np.random.default_rng([seed, 32])
    for case in range(random_cases):
        ms, m, t = (rng.random(size) < rng.uniform(0.2, 0.8)).astype(np.float32), (
            rng.random(size) < rng.uniform(0.2, 0.8)
        ).astype(np.float32), (rng.random(size) < rng.uniform(0.2, 0.8)).astype(np.float32)
        triple = builder(ms, m, t, cfg)
        a = triple.m_a.astype(np.int64)
        p = triple.m_p.astype(np.int64)
        n = triple.m_n.astype(np.int64)
        c = triple.m_c.astype(np.int64)
        si = ms.astype(np.int64)
        mi = m.astype(np.int64)
        ti = t.astype(np.int64)
        want_c = (si + mi) % 2
        checks = (
            (a, want_c * ti, "m_a"),
            (p, ti * (1 - want_c), "m_p"),
            (n, want_c * (1 - ti), "m_n"),
            (c, want_c, "m_c"),
            (a + p, ti, "m_a+m_p vs target"),
        )
        for got, want, what in checks:
            if not np.array_equal(got, want):
                where = int(np.argmax(got != want))
                return PropertyResult(
                    "mask-identities",
                    False,
                    f"random case {case}: {what} wrong at pixel {where} "
                    f"(m_s={_bits(ms)} m={_bits(m)} t={_bits(t)})",
                )
        if np.any(a * n) or np.any(p * n) or np.any(a * p) or np.any(n * ti):
            return PropertyResult(
                "mask-identities",
                False,
                f"random case {case}: region overlap (m_s={_bits(ms)} m={_bits(m)} t={_bits(t)})",
            )
    return PropertyResult(
        "mask-identities", True, f"4096 exhaustive 2x2 triples and {random_cases} random {size[0]}x{size[1]} triples clean"
    )


# ---- metric oracle equivalence -----------------------------------------------------


def _f_sweep_oracle(preds, gts, beta_sq=0.3):
    """Counting with python ints per threshold; accumulation mirrors the
    caller-order float sums so agreement must be exact."""
    usable = [(p, g) for p, g in zip(preds, gts) if np.count_nonzero(np.asarray(g) >= 0.5)]
    points = []
    f_best = 0.0
    n = len(usable)
    for k in range(256):
        th = k / 255.0
        p_acc = 0.0
        r_acc = 0.0
        for p, g in usable:
            h, w = np.asarray(p).shape
            tp = nb = ng = 0
            for i in range(h):
                for j in range(w):
                    hit = p[i, j] >= th
                    on = bool(g[i, j] >= 0.5)
                    nb += hit
                    ng += on
                    tp += hit and on
            p_acc += tp / (nb + _PR_EPS)
            r_acc += tp / (ng + _PR_EPS)
        prec = p_acc / n
        rec = r_acc / n
        den = beta_sq * prec + rec
        f = (1.0 + beta_sq) * prec * rec / den if den > 0 else 0.0
        f_best = max(f_best, f)
        points.append((rec, prec))
    return f_best, points


def _alignment_oracle(pred, gt, th):
    """Per-pixel scalar math; only the final block reductions run on the
    assembled arrays, so they reduce bitwise-identical values."""
    p = np.asarray(pred, dtype=np.float64)
    h, w = p.shape
    g = np.asarray(gt, dtype=np.float64) >= 0.5
    fm = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            fm[i, j] = 1.0 if p[i, j] >= th else 0.0
    n_on = int(g.sum())
    enh = np.zeros((h, w), dtype=np.float64)
    if n_on == 0:
        for i in range(h):
            for j in range(w):
                enh[i, j] = 1.0 - fm[i, j]
    elif n_on == h * w:
        enh = fm.copy()
    else:
        gf = g.astype(np.float64)
        mu_g = gf.mean()
        mu_f = fm.mean()
        for i in range(h):
            for j in range(w):
                pg = gf[i, j] - mu_g
                pf = fm[i, j] - mu_f
                xi = 2.0 * pg * pf / (pg * pg + pf * pf + _EPS64)
                base = xi + 1.0
                enh[i, j] = base * base / 4.0
    return float(enh.sum() / (h * w))


def _e_max_oracle(pred, gt):
    best = 0.0
    for k in range(256):
        best = max(best, _alignment_oracle(pred, gt, k / 255.0))
    return best


def check_metric_oracles(cases: int = 6, seed: int = 0, f_curve_fn=None, e_measure_fn=None) -> PropertyResult:
    """Threshold sweeps must match brute-force re-implementations exactly,
    and a perfect prediction must score perfectly."""
    f_curve_fn = f_curve_fn if f_curve_fn is not None else metrics.f_curve
    e_measure_fn = e_measure_fn if e_measure_fn is not None else metrics.e_measure_max
    rng = np.random.default_rng([seed, 33])
    for case in range(cases):
        shape = (8, 8) if case % 2 == 0 else (5, 9)
        preds = [rng.random(shape), rng.random(shape)]
        gts = [(rng.random(shape) < 0.5).astype(np.float64) for _ in range(2)]
        gts[0].reshape(-1)[0] = 1.0  # at least one usable image
        if case == cases - 1:
            gts[1] = np.zeros(shape)  # cover the excluded-image path
        want_f, want_points = _f_sweep_oracle(preds, gts)
        got_f, got_points, excluded = f_curve_fn(preds, gts)
        if got_f != want_f or got_points != want_points:
            return PropertyResult(
                "metric-oracles",
                False,
                f"F sweep mismatch on case {case} {shape}: got f_max {got_f!r}, oracle {want_f!r}",
            )
        want_excluded = sum(1 for g in gts if not np.count_nonzero(g >= 0.5))
        if excluded != want_excluded:
            return PropertyResult(
                "metric-oracles", False, f"F sweep excluded {excluded} images on case {case}, oracle says {want_excluded}"
            )
        for pred, gt in zip(preds, gts):
            got_e = e_measure_fn(pred, gt)
            want_e = _e_max_oracle(pred, gt)
            if got_e != want_e:
                return PropertyResult(
                    "metric-oracles",
                    False,
                    f"E sweep mismatch on case {case} {shape}: got {got_e!r}, oracle {want_e!r}",
                )
    gt = (rng.random((8, 8)) < 0.5).astype(np.float64)
    gt.reshape(-1)[0] = 1.0
    gt.reshape(-1)[-1] = 0.0  # mixed mask so the structural score is non-degenerate
    pred = gt.copy()
    scores = {
        "mae": metrics.mae(pred, gt),
        "f_max": f_curve_fn([pred], [gt])[0],
        "s_alpha": metrics.s_measure(pred, gt),
        "e_max": e_measure_fn(pred, gt),
    }
    if scores["mae"] != 0.0:
        return PropertyResult("metric-oracles", False, f"perfect prediction scored mae {scores['mae']!r}, want 0.0")
    for key in ("f_max", "s_alpha", "e_max"):
        if abs(scores[key] - 1.0) > 1e-6:
            return PropertyResult("metric-oracles", False, f"perfect prediction scored {key} {scores[key]!r}, want 1.0")
    return PropertyResult("metric-oracles", True, f"{cases} random sweeps match the oracles exactly; perfect case perfect")


# ---- aggregation -------------------------------------------------------------------


def run_all(
    seed: int = 0,
    grad_instances: int = 20,
    grad_tol: float = 1e-4,
    perm_orders: int = 6,
    mask_random_cases: int = 10_000,
    metric_cases: int = 6,
) -> list[PropertyResult]:
    results = check_gradients(seed=seed, instances=grad_instances, tol=grad_tol)
    results.append(check_group_permutation(n_orders=perm_orders, seed=seed))
    results.append(check_position_injection(n_orders=perm_orders, seed=seed))
    results.append(check_mask_identities(random_cases=mask_random_cases, seed=seed))
    results.append(check_metric_oracles(cases=metric_cases, seed=seed))
    return results


MUTATIONS = {
    "xor-to-or": lambda seed: [check_mask_identities(builder=_mutant_or_mask_triple, random_cases=500, seed=seed)],
    "pe-in-group": lambda seed: [check_group_permutation(seed=seed, debug_positions=True)],
}


def run_mutation(name: str, seed: int = 0) -> list[PropertyResult]:
    """Run the targeted suite against a deliberately broken variant. A
    healthy suite FAILS here; that failure is the point."""
    if name not in MUTATIONS:
        raise UsageError(f"unknown mutation {name!r}; choose from {sorted(MUTATIONS)}")
    return MUTATIONS[name](seed)


def format_report(results: list[PropertyResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}" for r in results]
    failed = sum(1 for r in results if not r.passed)
    if failed:
        lines.append(f"{failed} of {len(results)} properties failed")
    else:
        lines.append(f"all {len(results)} properties passed")
    return "\n".join(lines)


def raise_on_failure(results: list[PropertyResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        raise PropertyFailure("; ".join(f"{r.name}: {r.detail}" for r in failed))
