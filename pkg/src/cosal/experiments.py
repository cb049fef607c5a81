"""Scripted experiments around trained models: held-out evaluation, the
cumulative component ladder, and the input-order sensitivity study.

The order study feeds each group to the model under several random
permutations, maps the outputs back to their stems, and reports the
spread of every dataset metric plus the largest per-map deviation from
the first order. A model whose group stage is order-agnostic must come
back with zero spread bitwise; the same study with debug position
injection quantifies how much ordering information would destabilize.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint
from .config import LossConfig, ModelConfig, TrainConfig
from .data import ImageGroup, dataset_layout, load_group
from .errors import UsageError
from .metrics import MetricsReport, dataset_metrics
from .network import CosalModel, model_from_arrays
from .training import TrainResult, train

_STREAM_ORDERS = 20  # permutation choice per (order index, group index)

_METRIC_NAMES = ("mae", "f_max", "s_alpha", "e_max")


def _loaded_groups(data_dir) -> list[tuple[str, list[str], ImageGroup]]:
    index = dataset_layout(data_dir)
    if not index.groups:
        raise UsageError("evaluation dataset has no usable groups: " + "; ".join(index.problems))
    return [(e.group_id, e.stems, load_group(e)) for e in index.groups]


def evaluate_model(model: CosalModel, data_dir) -> MetricsReport:
    """Forward every group and score the raw (unquantized) maps."""
    preds, gts, stems = [], [], []
    for group_id, entry_stems, group in _loaded_groups(data_dir):
        out = model.forward_group(group)
        for stem, m, g in zip(entry_stems, out.maps, group.gt):
            preds.append(m.data.astype(np.float64))
            gts.append(g.astype(np.float64))
            stems.append(f"{group_id}/{stem}")
    return dataset_metrics(preds, gts, stems)


# ---- order sensitivity ------------------------------------------------------------


@dataclass
class OrderStudy:
    n_orders: int
    per_order: dict[str, list[float]]  # metric name -> one value per order
    std: dict[str, float]
    max_map_diff: float

    def csv(self) -> str:
        lines = ["order," + ",".join(_METRIC_NAMES)]
        for r in range(self.n_orders):
            lines.append(f"{r}," + ",".join(f"{self.per_order[m][r]:.8f}" for m in _METRIC_NAMES))
        lines.append("std," + ",".join(f"{self.std[m]:.3e}" for m in _METRIC_NAMES))
        lines.append(f"max_map_diff,{self.max_map_diff:.3e},,,")
        return "\n".join(lines) + "\n"

    def markdown(self) -> str:
        head = "| order | " + " | ".join(_METRIC_NAMES) + " |"
        sep = "|" + "---|" * (len(_METRIC_NAMES) + 1)
        rows = [head, sep]
        for r in range(self.n_orders):
            rows.append(f"| {r} | " + " | ".join(f"{self.per_order[m][r]:.6f}" for m in _METRIC_NAMES) + " |")
        rows.append("| std | " + " | ".join(f"{self.std[m]:.3e}" for m in _METRIC_NAMES) + " |")
        rows.append(f"\nlargest per-map deviation from order 0: {self.max_map_diff:.3e}")
        return "\n".join(rows) + "\n"


def order_sensitivity(model: CosalModel, data_dir, n_orders: int = 10, debug_positions: bool = False, seed: int = 0) -> OrderStudy:
    if n_orders < 1:
        raise UsageError("n_orders must be >= 1")
    groups = _loaded_groups(data_dir)
    per_order = {name: [] for name in _METRIC_NAMES}
    baseline_maps: dict[str, np.ndarray] = {}
    max_diff = 0.0
    for r in range(n_orders):
        preds, gts, stems = [], [], []
        for g_idx, (group_id, entry_stems, group) in enumerate(groups):
            perm = np.random.default_rng([seed, _STREAM_ORDERS, r, g_idx]).permutation(group.size)
            shuffled = ImageGroup([group.images[i] for i in perm], [group.gt[i] for i in perm], group.group_id)
            out = model.forward_group(shuffled, debug_positions=debug_positions)
            for k, img_index in enumerate(perm):
                stem = f"{group_id}/{entry_stems[img_index]}"
                pred = out.maps[k].data.astype(np.float64)
                preds.append(pred)
                gts.append(group.gt[img_index].astype(np.float64))
                stems.append(stem)
                if r == 0:
                    baseline_maps[stem] = pred
                else:
                    max_diff = max(max_diff, float(np.abs(pred - baseline_maps[stem]).max()))
        pairs = sorted(zip(stems, preds, gts))
        report = dataset_metrics([p for _, p, _ in pairs], [g for _, _, g in pairs], [s for s, _, _ in pairs])
        for name in _METRIC_NAMES:
            per_order[name].append(getattr(report, name))
    std = {name: float(np.std(np.asarray(vals, dtype=np.float64))) for name, vals in per_order.items()}
    return OrderStudy(n_orders, per_order, std, max_diff)


# ---- ablation ladder --------------------------------------------------------------


def ladder_rows(model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[tuple[str, ModelConfig, TrainConfig]]:
    """Cumulative variants from all-convolutional baseline to the full
    model with the contrastive terms."""
    stages = [
        ("baseline", dict(use_refine=False, use_group=False, use_fuse=False), dict(loss_contrastive=False)),
        ("+token_refiner", dict(use_refine=True, use_group=False, use_fuse=False), dict(loss_contrastive=False)),
        ("+group_encoder", dict(use_refine=True, use_group=True, use_fuse=False), dict(loss_contrastive=False)),
        ("+fusion", dict(use_refine=True, use_group=True, use_fuse=True), dict(loss_contrastive=False)),
        ("+contrastive", dict(use_refine=True, use_group=True, use_fuse=True), dict(loss_contrastive=True)),
    ]
    rows = []
    for name, arch, losses in stages:
        rows.append((name, replace(model_cfg, **arch), replace(train_cfg, **arch, **losses)))
    return rows


@dataclass
class LadderRow:
    name: str
    report: MetricsReport
    result: TrainResult


@dataclass
class LadderResult:
    rows: list[LadderRow]

    def csv(self) -> str:
        lines = ["variant," + ",".join(_METRIC_NAMES)]
        for row in self.rows:
            lines.append(row.name + "," + ",".join(f"{getattr(row.report, m):.8f}" for m in _METRIC_NAMES))
        return "\n".join(lines) + "\n"

    def markdown(self) -> str:
        head = "| variant | " + " | ".join(_METRIC_NAMES) + " |"
        sep = "|" + "---|" * (len(_METRIC_NAMES) + 1)
        rows = [head, sep]
        for row in self.rows:
            rows.append(f"| {row.name} | " + " | ".join(f"{getattr(row.report, m):.6f}" for m in _METRIC_NAMES) + " |")
        return "\n".join(rows) + "\n"


def ablation_ladder(
    train_dir,
    val_dir,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    out_dir,
) -> LadderResult:
    """Train every ladder variant with identical seed and data, score each
    on the held-out split, and write ablation.csv / ablation.md."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (name, mc, tc) in enumerate(ladder_rows(model_cfg, train_cfg)):
        run_dir = out_dir / f"{i}_{name.strip('+')}"
        result = train(train_dir, mc, tc, loss_cfg, run_dir)
        model = model_from_arrays(read_checkpoint(result.checkpoint_path))
        rows.append(LadderRow(name, evaluate_model(model, val_dir), result))
    ladder = LadderResult(rows)
    (out_dir / "ablation.csv").write_text(ladder.csv())
    (out_dir / "ablation.md").write_text(ladder.markdown())
    return ladder
