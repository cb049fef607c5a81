"""Evaluation metric tests.

The oracles come first and are rebuilt from the metric definitions with
plain python loops: the F sweep oracle counts pixels with python ints,
the alignment oracle derives every enhanced value from per-pixel
scalars, and the structure oracle re-walks foreground/background sets
and quadrants explicitly. The F and E oracles must match the library
bitwise (both sides share only the final numpy block reduction, whose
inputs are required to be identical); the S oracle must agree to well
below the 1e-6 acceptance tolerance.
"""

import json
import math

import numpy as np
import pytest

from cosal import pnm
from cosal.errors import ShapeError, UsageError
from cosal.metrics import (
    MetricsReport,
    dataset_metrics,
    e_measure_max,
    evaluate_dataset,
    f_curve,
    mae,
    s_measure,
    write_pr_csv,
    write_report_json,
)

EPS64 = np.finfo(np.float64).eps


# ---- oracles ----------------------------------------------------------------------


def f_sweep_oracle(preds, gts, beta_sq=0.3):
    """Threshold sweep with integer pixel counts and sequential float
    accumulation in caller order."""
    usable = []
    for pred, gt in zip(preds, gts):
        p = np.asarray(pred, dtype=np.float64)
        g = np.asarray(gt, dtype=np.float64) >= 0.5
        if g.any():
            usable.append((p, g))
    n = len(usable)
    assert n > 0
    f_best = 0.0
    points = []
    for k in range(256):
        th = k / 255.0
        p_acc = 0.0
        r_acc = 0.0
        for p, g in usable:
            h, w = p.shape
            tp = 0
            nb = 0
            ng = 0
            for i in range(h):
                for j in range(w):
                    hit = p[i, j] >= th
                    on = bool(g[i, j])
                    nb += hit
                    ng += on
                    tp += hit and on
            p_acc += tp / (nb + 1e-7)
            r_acc += tp / (ng + 1e-7)
        prec = p_acc / n
        rec = r_acc / n
        den = beta_sq * prec + rec
        f = (1.0 + beta_sq) * prec * rec / den if den > 0 else 0.0
        f_best = max(f_best, f)
        points.append((rec, prec))
    return f_best, points


def alignment_oracle(pred, gt, th):
    """Enhanced alignment for one threshold, every cell from scalar math."""
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
                xi = 2.0 * pg * pf / (pg * pg + pf * pf + EPS64)
                base = xi + 1.0
                enh[i, j] = base * base / 4.0
    return float(enh.sum() / (h * w))


def e_max_oracle(pred, gt):
    best = 0.0
    for k in range(256):
        best = max(best, alignment_oracle(pred, gt, k / 255.0))
    return best


def s_oracle(pred, gt, alpha=0.5):
    """Loop-structured structure measure: explicit fg/bg pools, 1-based
    centroid from integer sums, four quadrant slices."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64) >= 0.5
    h, w = g.shape
    n_fg = int(g.sum())
    if n_fg == 0:
        return min(1.0, max(0.0, 1.0 - float(p.mean())))
    if n_fg == h * w:
        return min(1.0, max(0.0, float(p.mean())))

    def obj(vals):
        if not vals:
            return 0.0
        m = sum(vals) / len(vals)
        sd = 0.0
        if len(vals) > 1:
            sd = math.sqrt(sum((v - m) ** 2 for v in vals) / (len(vals) - 1))
        return 2.0 * m / (m * m + 1.0 + sd + EPS64)

    fg = [float(p[i, j]) for i in range(h) for j in range(w) if g[i, j]]
    bg = [1.0 - float(p[i, j]) for i in range(h) for j in range(w) if not g[i, j]]
    mu = n_fg / (h * w)
    s_obj = mu * obj(fg) + (1.0 - mu) * obj(bg)

    sum_x = sum((j + 1) for i in range(h) for j in range(w) if g[i, j])
    sum_y = sum((i + 1) for i in range(h) for j in range(w) if g[i, j])
    x_c = int(math.floor(sum_x / n_fg + 0.5))
    y_c = int(math.floor(sum_y / n_fg + 0.5))

    def region(ps, gs):
        n = len(ps)
        if n == 0:
            return 0.0
        x = sum(ps) / n
        y = sum(gs) / n
        if n > 1:
            vx = sum((v - x) ** 2 for v in ps) / (n - 1)
            vy = sum((v - y) ** 2 for v in gs) / (n - 1)
            vxy = sum((a - x) * (b - y) for a, b in zip(ps, gs)) / (n - 1)
        else:
            vx = vy = vxy = 0.0
        a = 4.0 * x * y * vxy
        b = (x * x + y * y) * (vx + vy)
        if a != 0.0:
            return a / (b + EPS64)
        return 1.0 if b == 0.0 else 0.0

    s_reg = 0.0
    for r0, r1, c0, c1 in ((0, y_c, 0, x_c), (0, y_c, x_c, w), (y_c, h, 0, x_c), (y_c, h, x_c, w)):
        ps = [float(p[i, j]) for i in range(r0, r1) for j in range(c0, c1)]
        gs = [1.0 if g[i, j] else 0.0 for i in range(r0, r1) for j in range(c0, c1)]
        s_reg += (len(ps) / (h * w)) * region(ps, gs)
    return min(1.0, max(0.0, alpha * s_obj + (1.0 - alpha) * s_reg))


def random_case(rng, shape=(8, 8)):
    pred = rng.random(shape)
    gt = (rng.random(shape) < 0.4).astype(np.float64)
    if not gt.any():
        gt[shape[0] // 2, shape[1] // 2] = 1.0
    if gt.all():
        gt[0, 0] = 0.0
    return pred, gt


# ---- MAE --------------------------------------------------------------------------


def test_mae_perfect_is_zero():
    rng = np.random.default_rng(0)
    _, gt = random_case(rng)
    assert mae(gt, gt) == 0.0


def test_mae_constant_half():
    gt = np.zeros((6, 6))
    gt[1:3, 1:4] = 1.0
    assert mae(np.full((6, 6), 0.5), gt) == 0.5


def test_mae_counts_both_error_directions():
    gt = np.zeros((4, 4))
    gt[0, 0] = 1.0
    pred = np.zeros((4, 4))
    pred[3, 3] = 1.0
    assert math.isclose(mae(pred, gt), 2.0 / 16.0, rel_tol=1e-12)


def test_mae_shape_mismatch():
    with pytest.raises(ShapeError):
        mae(np.zeros((4, 4)), np.zeros((4, 5)))


def test_mae_permutation_invariant():
    rng = np.random.default_rng(1)
    pred, gt = random_case(rng)
    perm = rng.permutation(64)
    a = mae(pred, gt)
    b = mae(pred.ravel()[perm].reshape(8, 8), gt.ravel()[perm].reshape(8, 8))
    assert math.isclose(a, b, rel_tol=1e-12)


# ---- F sweep ----------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_f_curve_matches_counting_oracle_bitwise(seed):
    rng = np.random.default_rng(seed)
    preds, gts = [], []
    for _ in range(3):
        p, g = random_case(rng)
        preds.append(p)
        gts.append(g)
    got_f, got_pr, excluded = f_curve(preds, gts)
    want_f, want_pr = f_sweep_oracle(preds, gts)
    assert excluded == 0
    assert got_f == want_f
    assert got_pr == want_pr


def test_f_curve_mixed_sizes_and_exclusion():
    rng = np.random.default_rng(3)
    p1, g1 = random_case(rng, (8, 8))
    p2, g2 = random_case(rng, (5, 9))
    p3 = rng.random((4, 4))
    g3 = np.zeros((4, 4))
    got_f, got_pr, excluded = f_curve([p1, p2, p3], [g1, g2, g3])
    want_f, want_pr = f_sweep_oracle([p1, p2, p3], [g1, g2, g3])
    assert excluded == 1
    assert got_f == want_f
    assert got_pr == want_pr


def test_f_perfect_prediction_near_one():
    rng = np.random.default_rng(4)
    _, gt = random_case(rng)
    f, pr, _ = f_curve([gt], [gt])
    assert abs(f - 1.0) < 1e-6
    assert len(pr) == 256


def test_f_hand_case():
    # one true positive out of two foreground pixels, no false alarms
    pred = np.array([[1.0, 0.0], [0.0, 0.0]])
    gt = np.array([[1.0, 1.0], [0.0, 0.0]])
    f, _, _ = f_curve([pred], [gt])
    # P ~ 1, R ~ 0.5 at any threshold above zero: F = 1.3*0.5/0.8
    assert abs(f - 0.8125) < 1e-6


def test_f_inverted_prediction_scores_low():
    gt = np.zeros((8, 8))
    gt[2:5, 2:5] = 1.0
    f, _, _ = f_curve([1.0 - gt], [gt])
    assert f < 0.3


def test_f_curve_length_mismatch():
    with pytest.raises(ShapeError):
        f_curve([np.zeros((4, 4))], [])


def test_f_curve_all_empty_raises():
    with pytest.raises(UsageError):
        f_curve([np.ones((4, 4))], [np.zeros((4, 4))])


def test_f_curve_common_permutation_invariant():
    rng = np.random.default_rng(5)
    pred, gt = random_case(rng)
    perm = rng.permutation(64)
    a = f_curve([pred], [gt])
    b = f_curve([pred.ravel()[perm].reshape(8, 8)], [gt.ravel()[perm].reshape(8, 8)])
    assert a[0] == b[0]
    assert a[1] == b[1]


# ---- S-measure --------------------------------------------------------------------


@pytest.mark.parametrize("seed,shape", [(s, sh) for s in range(6) for sh in [(8, 8), (7, 9), (16, 16)]])
def test_s_measure_matches_loop_oracle(seed, shape):
    rng = np.random.default_rng(seed)
    pred, gt = random_case(rng, shape)
    assert abs(s_measure(pred, gt) - s_oracle(pred, gt)) < 1e-9


def test_s_measure_single_foreground_pixel():
    pred = np.random.default_rng(6).random((8, 8))
    gt = np.zeros((8, 8))
    gt[3, 4] = 1.0
    assert abs(s_measure(pred, gt) - s_oracle(pred, gt)) < 1e-9


def test_s_measure_perfect_is_one():
    rng = np.random.default_rng(7)
    _, gt = random_case(rng)
    assert abs(s_measure(gt, gt) - 1.0) < 1e-6


def test_s_measure_empty_gt_convention():
    pred = np.full((6, 6), 0.3)
    gt = np.zeros((6, 6))
    assert math.isclose(s_measure(pred, gt), 0.7, rel_tol=1e-12)
    assert s_measure(np.zeros((6, 6)), gt) == 1.0


def test_s_measure_full_gt_convention():
    pred = np.full((6, 6), 0.3)
    gt = np.ones((6, 6))
    assert math.isclose(s_measure(pred, gt), 0.3, rel_tol=1e-12)


def test_s_measure_inverted_scores_low():
    gt = np.zeros((8, 8))
    gt[2:6, 2:6] = 1.0
    assert s_measure(1.0 - gt, gt) < 0.5


def test_s_measure_in_unit_interval():
    rng = np.random.default_rng(8)
    for _ in range(20):
        pred, gt = random_case(rng)
        assert 0.0 <= s_measure(pred, gt) <= 1.0


# ---- E-measure --------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_e_measure_matches_scalar_oracle_bitwise(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_case(rng)
    assert e_measure_max(pred, gt) == e_max_oracle(pred, gt)


def test_e_measure_degenerate_gts_match_oracle():
    rng = np.random.default_rng(9)
    pred = rng.random((8, 8))
    assert e_measure_max(pred, np.zeros((8, 8))) == e_max_oracle(pred, np.zeros((8, 8)))
    assert e_measure_max(pred, np.ones((8, 8))) == e_max_oracle(pred, np.ones((8, 8)))


def test_e_measure_perfect_is_one():
    rng = np.random.default_rng(10)
    _, gt = random_case(rng)
    assert abs(e_measure_max(gt, gt) - 1.0) < 1e-6


def test_e_measure_empty_gt_rewards_empty_prediction():
    # prediction never reaches 1, so some threshold blanks it out entirely
    assert e_measure_max(np.full((4, 4), 0.4), np.zeros((4, 4))) == 1.0


def test_e_measure_inverted_hand_value():
    gt = np.array([[1.0, 0.0], [0.0, 0.0]])
    # anti-correlated map: the all-ones threshold image is the best left,
    # and its alignment is exactly 1/4
    assert e_measure_max(1.0 - gt, gt) == 0.25


# ---- perfect prediction dominates -------------------------------------------------


def test_gt_as_prediction_dominates_every_metric():
    rng = np.random.default_rng(11)
    for _ in range(5):
        pred, gt = random_case(rng)
        assert mae(gt, gt) <= mae(pred, gt)
        assert f_curve([gt], [gt])[0] >= f_curve([pred], [gt])[0] - 1e-6
        assert s_measure(gt, gt) >= s_measure(pred, gt) - 1e-6
        assert e_measure_max(gt, gt) >= e_measure_max(pred, gt) - 1e-6


# ---- dataset aggregation ----------------------------------------------------------


def test_dataset_metrics_single_image_matches_parts():
    rng = np.random.default_rng(12)
    pred, gt = random_case(rng)
    rep = dataset_metrics([pred], [gt])
    assert rep.mae == mae(pred, gt)
    assert rep.f_max == f_curve([pred], [gt])[0]
    assert rep.s_alpha == s_measure(pred, gt)
    assert rep.e_max == e_measure_max(pred, gt)
    assert rep.n_images == 1
    assert rep.warnings == []
    assert len(rep.pr_points) == 256
    assert rep.per_image[0]["stem"] == "im0"


def test_dataset_metrics_averages_per_image_scores():
    rng = np.random.default_rng(13)
    p1, g1 = random_case(rng)
    p2, g2 = random_case(rng)
    rep = dataset_metrics([p1, p2], [g1, g2], stems=["a", "b"])
    assert math.isclose(rep.mae, (mae(p1, g1) + mae(p2, g2)) / 2.0, rel_tol=1e-12)
    assert math.isclose(rep.s_alpha, (s_measure(p1, g1) + s_measure(p2, g2)) / 2.0, rel_tol=1e-12)
    assert [d["stem"] for d in rep.per_image] == ["a", "b"]


def test_dataset_metrics_empty_gt_warning():
    rng = np.random.default_rng(14)
    p1, g1 = random_case(rng)
    rep = dataset_metrics([p1, rng.random((8, 8))], [g1, np.zeros((8, 8))], stems=["ok", "blank"])
    assert len(rep.warnings) == 1
    assert "blank" in rep.warnings[0]
    assert rep.n_images == 2


def test_dataset_metrics_rejects_empty_input():
    with pytest.raises(UsageError):
        dataset_metrics([], [])


def test_report_json_shape(tmp_path):
    rng = np.random.default_rng(15)
    pred, gt = random_case(rng)
    rep = dataset_metrics([pred], [gt])
    path = tmp_path / "report.json"
    write_report_json(rep, path)
    loaded = json.loads(path.read_text())
    assert set(loaded.keys()) == {"mae", "f_max", "s_alpha", "e_max", "n_images", "warnings"}
    assert isinstance(loaded["warnings"], list)
    assert loaded["n_images"] == 1


def test_pr_csv_shape(tmp_path):
    rng = np.random.default_rng(16)
    pred, gt = random_case(rng)
    rep = dataset_metrics([pred], [gt])
    path = tmp_path / "pr.csv"
    write_pr_csv(rep, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "threshold,precision,recall"
    assert len(lines) == 257
    assert lines[1].startswith("0.00000000,")
    assert lines[-1].startswith("1.00000000,")


# ---- directory evaluation ---------------------------------------------------------


def _write_pair(pred_dir, gt_dir, stem, pred, gt):
    pnm.write_image(pred_dir / f"{stem}.pgm", pred)
    pnm.write_image(gt_dir / f"{stem}.pgm", gt)


def _binary_map(rng, shape=(8, 8)):
    g = (rng.random(shape) < 0.4).astype(np.float64)
    g[shape[0] // 2, shape[1] // 2] = 1.0
    g[0, 0] = 0.0
    return g


def test_evaluate_dataset_perfect(tmp_path):
    pred_dir = tmp_path / "pred"
    gt_dir = tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    rng = np.random.default_rng(17)
    for stem in ("a", "b", "c"):
        g = _binary_map(rng)
        _write_pair(pred_dir, gt_dir, stem, g, g)
    rep = evaluate_dataset(pred_dir, gt_dir)
    assert rep.n_images == 3
    assert rep.mae == 0.0
    assert rep.f_max > 1.0 - 1e-6
    assert rep.s_alpha > 1.0 - 1e-6
    assert rep.e_max > 1.0 - 1e-6
    assert rep.warnings == []


def test_evaluate_dataset_warns_on_unmatched(tmp_path):
    pred_dir = tmp_path / "pred"
    gt_dir = tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    rng = np.random.default_rng(18)
    g = _binary_map(rng)
    _write_pair(pred_dir, gt_dir, "a", g, g)
    pnm.write_image(pred_dir / "only_pred.pgm", g)
    pnm.write_image(gt_dir / "only_gt.pgm", g)
    rep = evaluate_dataset(pred_dir, gt_dir)
    assert rep.n_images == 1
    assert len(rep.warnings) == 2
    assert any("only_pred" in w for w in rep.warnings)
    assert any("only_gt" in w for w in rep.warnings)


def test_evaluate_dataset_skips_size_mismatch(tmp_path):
    pred_dir = tmp_path / "pred"
    gt_dir = tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    rng = np.random.default_rng(19)
    g = _binary_map(rng)
    _write_pair(pred_dir, gt_dir, "good", g, g)
    pnm.write_image(pred_dir / "bad.pgm", _binary_map(rng, (8, 8)))
    pnm.write_image(gt_dir / "bad.pgm", _binary_map(rng, (16, 16)))
    rep = evaluate_dataset(pred_dir, gt_dir)
    assert rep.n_images == 1
    assert any("size mismatch" in w for w in rep.warnings)


def test_evaluate_dataset_skips_color_maps(tmp_path):
    pred_dir = tmp_path / "pred"
    gt_dir = tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    rng = np.random.default_rng(20)
    g = _binary_map(rng)
    _write_pair(pred_dir, gt_dir, "good", g, g)
    pnm.write_image(pred_dir / "color.pgm", np.stack([g, g, g]))
    pnm.write_image(gt_dir / "color.pgm", g)
    rep = evaluate_dataset(pred_dir, gt_dir)
    assert rep.n_images == 1
    assert any("grayscale" in w for w in rep.warnings)


def test_evaluate_dataset_no_pairs_raises(tmp_path):
    pred_dir = tmp_path / "pred"
    gt_dir = tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    rng = np.random.default_rng(21)
    pnm.write_image(pred_dir / "x.pgm", _binary_map(rng))
    pnm.write_image(gt_dir / "y.pgm", _binary_map(rng))
    with pytest.raises(UsageError):
        evaluate_dataset(pred_dir, gt_dir)


def test_evaluate_dataset_rejects_missing_dir(tmp_path):
    with pytest.raises(UsageError):
        evaluate_dataset(tmp_path / "absent", tmp_path)


def test_evaluate_dataset_order_independent(tmp_path):
    rng = np.random.default_rng(22)
    maps = [(f"im{i}", rng.random((8, 8)), _binary_map(rng)) for i in range(4)]
    reports = []
    for tag, order in (("fwd", maps), ("rev", maps[::-1])):
        pred_dir = tmp_path / tag / "pred"
        gt_dir = tmp_path / tag / "gt"
        pred_dir.mkdir(parents=True)
        gt_dir.mkdir(parents=True)
        for stem, pred, gt in order:
            _write_pair(pred_dir, gt_dir, stem, pred, gt)
        reports.append(evaluate_dataset(pred_dir, gt_dir))
    assert reports[0].to_json_dict() == reports[1].to_json_dict()
    assert reports[0].pr_points == reports[1].pr_points
    assert reports[0].per_image == reports[1].per_image


def test_report_dataclass_fields():
    rep = MetricsReport(0.0, 1.0, 1.0, 1.0, [], [], 1, [])
    d = rep.to_json_dict()
    assert d["mae"] == 0.0 and d["f_max"] == 1.0
