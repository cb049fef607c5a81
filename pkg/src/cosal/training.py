"""Optimization loop: Adam with bias correction, a deterministic sampling
schedule, per-step CSV loss logging, and resumable checkpoints.

Every random draw is keyed by absolute coordinates (seed, stream, epoch or
step) instead of a mutating generator, so a resumed run replays exactly the
schedule the uninterrupted run would have used. Streams 10..12 here must not
collide with the synthesizer's 0..2, since users often reuse one seed for
both.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .config import LossConfig, ModelConfig, TrainConfig
from .data import AuxBatch, ImageGroup, dataset_layout, load_aux, load_group
from .errors import ComputeError, ShapeError, UsageError
from .losses import (
    LossReport,
    build_mask_triple,
    composite_losses,
    contrastive_group,
    contrastive_single,
    masked_embed,
    total_loss,
)
from .modules import load_state
from .network import CosalModel, ModelOutput, config_to_meta

_STREAM_GROUP_ORDER = 10  # per-epoch permutation of group indices
_STREAM_IMAGE_ORDER = 11  # per-step permutation within the sampled group
_STREAM_AUX_PICK = 12  # per-step auxiliary image subset


def group_order(seed: int, epoch: int, n_groups: int) -> np.ndarray:
    return np.random.default_rng([seed, _STREAM_GROUP_ORDER, epoch]).permutation(n_groups)


def image_order(seed: int, step: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _STREAM_IMAGE_ORDER, step]).permutation(n)


def aux_pick(seed: int, step: int, pool: int, k: int) -> np.ndarray:
    return np.random.default_rng([seed, _STREAM_AUX_PICK, step]).choice(pool, size=k, replace=False)


# ---- optimizer --------------------------------------------------------------------


class Adam:
    """Adam with bias correction; first/second moments are kept per
    parameter name so the whole state round-trips through a checkpoint."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(grads))
        if missing:
            raise UsageError(f"no gradient for parameters {missing[:5]} (of {len(missing)} missing)")
        self.step_count += 1
        corr1 = 1.0 - self.beta1 ** self.step_count
        corr2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient for {name}: {g.shape} != {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / corr1
            v_hat = v / corr2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"opt.step": np.asarray([self.step_count], dtype=np.float32)}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name].copy()
            out[f"opt.v.{name}"] = self.v[name].copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        step = arrays.get("opt.step")
        if step is None:
            raise UsageError("checkpoint carries no optimizer state; cannot resume from it")
        self.step_count = int(step.reshape(-1)[0])
        for name in self.params:
            for tag, store in (("m", self.m), ("v", self.v)):
                key = f"opt.{tag}.{name}"
                arr = arrays.get(key)
                if arr is None:
                    raise UsageError(f"checkpoint is missing optimizer entry {key!r}")
                if tuple(arr.shape) != store[name].shape:
                    raise ShapeError(f"{key}: checkpoint shape {arr.shape} != {store[name].shape}")
                store[name] = arr.astype(store[name].dtype, copy=True)


# ---- loss wiring ------------------------------------------------------------------


def _contrastive_terms(model: CosalModel, out: ModelOutput, gts: list[np.ndarray], loss_cfg: LossConfig) -> tuple[Tensor, Tensor, bool]:
    """Disagreement-mask embeddings for every image, then both contrastive
    objectives. The live flag records whether any gradient can reach the
    projection head this step (all masks empty is a data condition, not a
    wiring fault)."""
    q = model.cfg.tokens
    z_a, z_p, z_n, z_t = [], [], [], []
    for n, gt in enumerate(gts):
        triple = build_mask_triple(out.early_maps[n], out.maps[n], gt, loss_cfg)
        block = ad.narrow(out.group_seq, 0, n * q, q)
        pooled = []
        for mask in (triple.m_a, triple.m_p, triple.m_n, np.asarray(gt, dtype=np.float32)):
            emb = masked_embed(block, mask, model.grid)
            pooled.append(model.project(emb) if emb is not None else None)
        z_a.append(pooled[0])
        z_p.append(pooled[1])
        z_n.append(pooled[2])
        z_t.append(pooled[3])
    live_single = any(a is not None and p is not None and m is not None for a, p, m in zip(z_a, z_p, z_n))
    live_group = sum(z is not None for z in z_t) >= 2 and any(z is not None for z in z_n)
    l_single = contrastive_single(z_a, z_p, z_n, loss_cfg)
    l_group = contrastive_group(z_t, z_n, loss_cfg)
    return l_single, l_group, live_single or live_group


def compute_losses(
    model: CosalModel,
    out: ModelOutput,
    gts: list[np.ndarray],
    aux_gts: list[np.ndarray],
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
) -> tuple[LossReport, bool]:
    """Full objective for one step. Returns the report plus the
    contrastive-live flag used by the dead-parameter check."""
    l_c, l_s, l_ct = composite_losses(out.maps, out.early_maps, out.aux_maps, gts, aux_gts, loss_cfg)
    live = False
    if train_cfg.loss_contrastive:
        l_single, l_group, live = _contrastive_terms(model, out, gts, loss_cfg)
    else:
        zero = Tensor(np.zeros((), dtype=out.maps[0].data.dtype))
        l_single, l_group = zero, zero
    return (
        total_loss(
            l_c,
            l_s,
            l_ct,
            l_single,
            l_group,
            main=train_cfg.loss_main,
            aux=train_cfg.loss_aux,
            early=train_cfg.loss_early,
            contrastive=train_cfg.loss_contrastive,
        ),
        live,
    )


def _unreachable_prefixes(cfg: TrainConfig, contrastive_live: bool) -> set[str]:
    """Parameter families legitimately untouched by the enabled losses.

    The map loss reaches every stage it flows through; the early head only
    sees its own loss; the projection head only the contrastive terms. A
    missing gradient anywhere else is a wiring bug.
    """
    on_main = cfg.loss_main
    on_aux = cfg.loss_aux
    on_con = cfg.loss_contrastive and contrastive_live
    dead: set[str] = set()
    if not on_main:
        dead.add("fuse.")
    if not (on_main or on_aux):
        dead.add("decoder.")
    if not (on_main or on_con):
        dead.add("group.")
    if not cfg.loss_early:
        dead.add("early.")
    if not on_con:
        dead.add("project.")
    return dead


def collect_grads(model: CosalModel, train_cfg: TrainConfig, contrastive_live: bool) -> dict[str, np.ndarray]:
    """Gradients for every parameter after backward. Parameters behind a
    disabled loss term get exact zeros (the true gradient of an absent
    term); any other missing gradient aborts."""
    exempt = _unreachable_prefixes(train_cfg, contrastive_live)
    grads: dict[str, np.ndarray] = {}
    dead = []
    for name, p in model.named_parameters():
        if p.grad is not None:
            grads[name] = p.grad
        elif any(name.startswith(pre) for pre in exempt):
            grads[name] = np.zeros_like(p.data)
        else:
            dead.append(name)
    if dead:
        raise UsageError(f"dead parameters (no gradient despite enabled losses): {dead[:8]}" + (f" and {len(dead) - 8} more" if len(dead) > 8 else ""))
    return grads


# ---- checkpoint IO ----------------------------------------------------------------


def save_checkpoint(path: str | Path, model: CosalModel, opt: Adam | None = None) -> None:
    arrays = model.state_arrays()
    arrays.update(config_to_meta(model.cfg))
    if opt is not None:
        arrays.update(opt.state_arrays())
    write_checkpoint(path, arrays)


def _check_meta_matches(arrays: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    for key, want in config_to_meta(cfg).items():
        got = arrays.get(key)
        if got is None or got.shape != want.shape or not np.array_equal(got, want):
            raise UsageError(f"resume checkpoint does not match the requested architecture (differs at {key!r})")


def load_for_resume(path: str | Path, model: CosalModel, opt: Adam) -> int:
    """Restore weights and optimizer state; returns the step to continue at."""
    arrays = read_checkpoint(path)
    _check_meta_matches(arrays, model.cfg)
    params = {k: v for k, v in arrays.items() if not k.startswith("meta.") and not k.startswith("opt.")}
    load_state(model, params)
    opt.load_state_arrays(arrays)
    return opt.step_count


# ---- the loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    csv_path: Path
    steps_run: int
    steps_total: int
    first_total: float
    final_total: float
    final: LossReport


def _matching_sizes(kind: str, images: list[np.ndarray], size: tuple[int, int]) -> None:
    for img in images:
        if tuple(img.shape[1:]) != tuple(size):
            raise UsageError(f"{kind} image size {img.shape[1:]} does not match the model input {size}")


def train(
    data_dir: str | Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> TrainResult:
    """Run the optimization loop over a dataset tree of group_* dirs plus an
    optional aux/ pool, writing checkpoint.cosf and loss_log.csv to out_dir."""
    for flag in ("use_refine", "use_group", "use_fuse"):
        if getattr(model_cfg, flag) != getattr(train_cfg, flag):
            raise UsageError(f"model and train configs disagree on {flag}")
    if model_cfg.group_size != train_cfg.group_size:
        raise UsageError(f"model group_size {model_cfg.group_size} != train group_size {train_cfg.group_size}")
    if model_cfg.tau != loss_cfg.tau or model_cfg.paper_exact_denominator != loss_cfg.paper_exact_denominator:
        raise UsageError("model and loss configs disagree on the contrastive settings (tau / denominator mode)")

    index = dataset_layout(data_dir)
    if not index.groups:
        raise UsageError("dataset has no usable groups: " + "; ".join(index.problems))

    groups: list[ImageGroup] = []
    for entry in index.groups:
        group = load_group(entry)
        if group.size != train_cfg.group_size:
            raise UsageError(f"{group.group_id} has {group.size} images but group_size is {train_cfg.group_size}")
        _matching_sizes(group.group_id, group.images, model_cfg.input_size)
        groups.append(group)

    aux_pool: AuxBatch | None = None
    if train_cfg.loss_aux and train_cfg.aux_size > 0:
        if index.aux is None:
            raise UsageError("loss_aux is enabled but the dataset has no aux/ split")
        aux_pool = load_aux(index.aux)
        if aux_pool.size < train_cfg.aux_size:
            raise UsageError(f"aux pool holds {aux_pool.size} images; aux_size is {train_cfg.aux_size}")
        _matching_sizes("aux", aux_pool.images, model_cfg.input_size)

    model = CosalModel(model_cfg, seed=train_cfg.seed)
    opt = Adam(dict(model.named_parameters()), lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.adam_eps)

    start_step = 0
    if resume is not None:
        start_step = load_for_resume(resume, model, opt)

    n_groups = len(groups)
    steps_total = train_cfg.epochs * n_groups
    if start_step > steps_total:
        raise UsageError(f"resume step {start_step} is beyond the configured total of {steps_total}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.cosf"
    csv_path = out_dir / "loss_log.csv"

    first_total = float("nan")
    report: LossReport | None = None
    with open(csv_path, "w", encoding="ascii") as log:
        log.write(LossReport.CSV_HEADER + "\n")
        for step in range(start_step, steps_total):
            epoch = step // n_groups
            order = group_order(train_cfg.seed, epoch, n_groups)
            group = groups[int(order[step % n_groups])]
            perm = image_order(train_cfg.seed, step, group.size)
            batch = ImageGroup([group.images[i] for i in perm], [group.gt[i] for i in perm], group.group_id)

            aux_batch = None
            aux_gts: list[np.ndarray] = []
            if aux_pool is not None:
                picks = aux_pick(train_cfg.seed, step, aux_pool.size, train_cfg.aux_size)
                aux_batch = AuxBatch([aux_pool.images[i] for i in picks], [aux_pool.gt[i] for i in picks])
                aux_gts = aux_batch.gt

            model.zero_grad()
            out = model.forward_group(batch, aux_batch)
            report, live = compute_losses(model, out, batch.gt, aux_gts, loss_cfg, train_cfg)
            if not np.isfinite(report.total):
                raise ComputeError(
                    f"non-finite loss at step {step}: l_c={report.l_c} l_s={report.l_s} "
                    f"l_ct={report.l_ct} l_single={report.l_single} l_group={report.l_group}"
                )
            if np.isnan(first_total):
                first_total = report.total
            ad.backward(report.tensor)
            opt.step(collect_grads(model, train_cfg, live))
            log.write(report.csv_line(step) + "\n")

            if train_cfg.eval_every > 0 and (step + 1) % train_cfg.eval_every == 0 and step + 1 < steps_total:
                save_checkpoint(out_dir / f"checkpoint_{step + 1:05d}.cosf", model, opt)

    if report is None:
        raise UsageError("nothing to train: resume step already equals the configured total")
    save_checkpoint(ckpt_path, model, opt)
    return TrainResult(ckpt_path, csv_path, steps_total - start_step, steps_total, first_total, report.total, report)
