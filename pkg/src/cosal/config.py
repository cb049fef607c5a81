"""Validated configuration records for the model, losses, training, and
dataset synthesis. Invalid values raise ConfigError at construction time so
bad settings never reach the numerics."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

# the backbone's stride stack is fixed at 4/8/16/32; input sides must divide
DEEPEST_STRIDE = 32


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    group_size only shapes the network when use_tgl is false: the fallback
    consensus concatenates the group's token maps along channels, so that
    convolution's width is group_size * d.
    """

    input_size: tuple[int, int] = (64, 64)
    d: int = 64
    heads: int = 4
    ffn_multiplier: int = 4
    layers_refine: int = 4
    layers_group: int = 6
    layers_fuse: int = 6
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    proj_dim: int = 32
    tau: float = 0.1
    paper_exact_denominator: bool = False
    use_refine: bool = True
    use_group: bool = True
    use_fuse: bool = True
    group_size: int = 4

    def __post_init__(self):
        h, w = self.input_size
        _require(h >= DEEPEST_STRIDE and w >= DEEPEST_STRIDE, f"input_size {self.input_size} below minimum {DEEPEST_STRIDE}")
        _require(h % DEEPEST_STRIDE == 0 and w % DEEPEST_STRIDE == 0, f"input_size {self.input_size} not divisible by {DEEPEST_STRIDE}")
        _require(self.heads >= 1, "heads must be >= 1")
        _require(self.d >= 1 and self.d % self.heads == 0, f"d={self.d} not divisible by heads={self.heads}")
        _require(self.d % 4 == 0, f"d={self.d} must be divisible by 4 for the 2-D positional table")
        _require(self.ffn_multiplier >= 1, "ffn_multiplier must be >= 1")
        for name in ("layers_refine", "layers_group", "layers_fuse"):
            _require(getattr(self, name) >= 1, f"{name} must be >= 1")
        _require(len(self.stage_channels) == 4 and all(c >= 1 for c in self.stage_channels), f"stage_channels needs four positive widths, got {self.stage_channels}")
        _require(self.proj_dim >= 1, "proj_dim must be >= 1")
        _require(self.tau > 0, "tau must be positive")
        _require(self.group_size >= 2, "group_size must be >= 2 (co-saliency needs a group)")

    @property
    def token_grid(self) -> tuple[int, int]:
        return (self.input_size[0] // DEEPEST_STRIDE, self.input_size[1] // DEEPEST_STRIDE)

    @property
    def tokens(self) -> int:
        gh, gw = self.token_grid
        return gh * gw


@dataclass(frozen=True)
class LossConfig:
    ssim_window: int = 11
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    beta_sq: float = 0.3
    epsilon: float = 1e-7
    tau: float = 0.1
    binarize_threshold: float = 0.5
    paper_exact_denominator: bool = False

    def __post_init__(self):
        _require(self.ssim_window >= 1 and self.ssim_window % 2 == 1, f"ssim_window must be odd and positive, got {self.ssim_window}")
        _require(self.ssim_c1 > 0 and self.ssim_c2 > 0, "ssim stabilizers must be positive")
        _require(self.beta_sq > 0, "beta_sq must be positive")
        _require(self.epsilon > 0, "epsilon must be positive")
        _require(self.tau > 0, "tau must be positive")
        _require(0.0 < self.binarize_threshold < 1.0, f"binarize_threshold must lie in (0,1), got {self.binarize_threshold}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings plus the architecture/loss toggles that form the
    ablation ladder. use_* flags select network variants; loss_* flags enable
    objective terms. At least one loss term must stay on."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    epochs: int = 20
    group_size: int = 4
    aux_size: int = 4
    seed: int = 0
    eval_every: int = 0
    use_refine: bool = True
    use_group: bool = True
    use_fuse: bool = True
    loss_main: bool = True
    loss_aux: bool = True
    loss_early: bool = True
    loss_contrastive: bool = True

    def __post_init__(self):
        _require(self.lr > 0, "lr must be positive")
        _require(0 < self.beta1 < 1 and 0 < self.beta2 < 1, "betas must lie in (0,1)")
        _require(self.adam_eps > 0, "adam_eps must be positive")
        _require(self.epochs >= 1, "epochs must be >= 1")
        _require(self.group_size >= 2, "group_size must be >= 2")
        _require(self.aux_size >= 0, "aux_size must be >= 0")
        _require(self.seed >= 0, "seed must be non-negative")
        _require(self.eval_every >= 0, "eval_every must be >= 0 (0 disables mid-run checkpoints)")
        _require(
            self.loss_main or self.loss_aux or self.loss_early or self.loss_contrastive,
            "all loss terms disabled: nothing to optimize",
        )
        _require(not (self.loss_aux and self.aux_size == 0), "loss_aux needs aux_size >= 1")


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic dataset parameters. val_groups extra groups are generated
    with indices following the training groups, so train and val never share
    a group index (and therefore never share a jitter stream)."""

    seed: int = 0
    n_groups: int = 8
    group_size: int = 4
    image_size: tuple[int, int] = (64, 64)
    n_shape_classes: int = 6
    distractors: tuple[int, int] = (0, 2)
    noise_level: float = 0.06
    val_groups: int = 2
    aux_count: int = 16

    def __post_init__(self):
        _require(self.seed >= 0, "seed must be non-negative")
        _require(self.n_groups >= 1, "n_groups must be >= 1")
        _require(self.group_size >= 2, "group_size must be >= 2")
        h, w = self.image_size
        _require(h % DEEPEST_STRIDE == 0 and w % DEEPEST_STRIDE == 0, f"image_size {self.image_size} not divisible by {DEEPEST_STRIDE}")
        # >= 64 keeps shape placement ranges non-degenerate; <= 512 keeps the
        # fixed-point rasterizer's squared terms inside int64
        _require(64 <= h <= 512 and 64 <= w <= 512, f"image_size {self.image_size} outside the supported [64, 512] range")
        _require(self.n_shape_classes >= 2, "n_shape_classes must be >= 2 (distractors need other classes)")
        lo, hi = self.distractors
        _require(0 <= lo <= hi <= 3, f"distractors range must satisfy 0 <= lo <= hi <= 3, got {self.distractors}")
        _require(0.0 <= self.noise_level <= 0.25, f"noise_level must lie in [0, 0.25], got {self.noise_level}")
        _require(self.val_groups >= 0, "val_groups must be >= 0")
        _require(self.aux_count >= 0, "aux_count must be >= 0")
