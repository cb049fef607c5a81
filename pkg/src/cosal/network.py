"""The convolutional halves of the pipeline and the assembled model.

Data path per group: a shared pyramid backbone runs on every image, the
deepest level becomes d-wide tokens (attention refiner, or a plain conv
stand-in when disabled), the group stage mixes tokens across images, the
fusion stage folds the group consensus back into each image's tokens, and a
U-shaped decoder climbs back to full resolution against the image's own
pyramid. Auxiliary single images reuse the backbone, token stage, and
decoder with the group stages bypassed.

Disabled-stage replacements keep the same token-in/token-out interfaces so
every ablation variant runs the identical surrounding code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .data import AuxBatch, ImageGroup
from .errors import IOParseError, ShapeError, UsageError
from .modules import Conv, Linear, Module
from .transformer import (
    ConsensusFusion,
    GroupTokenEncoder,
    ImageTokenRefiner,
    map_to_tokens,
    positional_encoding_2d,
    tokens_to_map,
)


@dataclass
class FeaturePyramid:
    """Four levels at strides 4/8/16/32 of the input."""

    f3: Tensor
    f4: Tensor
    f5: Tensor
    f6: Tensor

    def __post_init__(self):
        prev = self.f3.shape
        for level in (self.f4, self.f5, self.f6):
            if level.shape[1] * 2 != prev[1] or level.shape[2] * 2 != prev[2]:
                raise ShapeError(f"pyramid levels must halve: {prev} then {level.shape}")
            prev = level.shape


class Backbone(Module):
    """Four conv-relu-pool stages; the deepest level comes from a side conv
    applied after the last pooling."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.stage_channels
        self.stage1 = Conv(3, c[0], 3, rng, dtype=dtype)
        self.stage2 = Conv(c[0], c[0], 3, rng, dtype=dtype)
        self.stage3 = Conv(c[0], c[1], 3, rng, dtype=dtype)
        self.stage4 = Conv(c[1], c[2], 3, rng, dtype=dtype)
        self.side = Conv(c[2], c[3], 3, rng, dtype=dtype)

    def __call__(self, image: Tensor) -> FeaturePyramid:
        if image.data.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"backbone expects [3,H,W], got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} not divisible by the stride stack (32)")
        x = ad.maxpool2(ad.relu(self.stage1(image)))
        f3 = ad.maxpool2(ad.relu(self.stage2(x)))
        f4 = ad.maxpool2(ad.relu(self.stage3(f3)))
        f5 = ad.maxpool2(ad.relu(self.stage4(f4)))
        f6 = ad.relu(self.side(ad.maxpool2(f5)))
        return FeaturePyramid(f3, f4, f5, f6)


class Decoder(Module):
    """U-shaped climb: three upsample-by-2 stages, each fusing the matching
    pyramid level (1x1 conv to d, add, 3x3 conv, relu), then a final
    bilinear x4, 1x1 conv, and sigmoid."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.d
        c = cfg.stage_channels
        self.lat5 = Conv(c[2], d, 1, rng, dtype=dtype)
        self.ref5 = Conv(d, d, 3, rng, dtype=dtype)
        self.lat4 = Conv(c[1], d, 1, rng, dtype=dtype)
        self.ref4 = Conv(d, d, 3, rng, dtype=dtype)
        self.lat3 = Conv(c[0], d, 1, rng, dtype=dtype)
        self.ref3 = Conv(d, d, 3, rng, dtype=dtype)
        self.out = Conv(d, 1, 1, rng, dtype=dtype)

    def __call__(self, tokens: Tensor, pyramid: FeaturePyramid) -> Tensor:
        h6, w6 = pyramid.f6.shape[1], pyramid.f6.shape[2]
        if tokens.shape[0] != h6 * w6:
            raise ShapeError(f"{tokens.shape[0]} tokens do not match the {h6}x{w6} deepest level")
        x = tokens_to_map(tokens, h6, w6)
        for lateral, refine, skip in (
            (self.lat5, self.ref5, pyramid.f5),
            (self.lat4, self.ref4, pyramid.f4),
            (self.lat3, self.ref3, pyramid.f3),
        ):
            x = ad.bilinear_upsample(x, 2)
            x = ad.relu(refine(x + lateral(skip)))
        x = ad.bilinear_upsample(x, 4)
        logits = self.out(x)
        return ad.reshape(ad.sigmoid(logits), (logits.shape[1], logits.shape[2]))


class EarlyHead(Module):
    """Coarse per-image map straight from the token stage: 3x3 conv + relu,
    1x1 conv, sigmoid, then bilinear upsampling to the input size."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.d
        self.conv3 = Conv(d, d, 3, rng, dtype=dtype)
        self.conv1 = Conv(d, 1, 1, rng, dtype=dtype)

    def __call__(self, tokens: Tensor, grid: tuple[int, int], out_size: tuple[int, int]) -> Tensor:
        h6, w6 = grid
        oh, ow = out_size
        if oh % h6 or ow % w6 or oh // h6 != ow // w6:
            raise ShapeError(f"cannot upsample {h6}x{w6} to {oh}x{ow} with one integer factor")
        x = tokens_to_map(tokens, h6, w6)
        x = ad.sigmoid(self.conv1(ad.relu(self.conv3(x))))
        x = ad.bilinear_upsample(x, oh // h6)
        return ad.reshape(x, (oh, ow))


class ConvTokenStage(Module):
    """Attention-free stand-in for the per-image token stage: 1x1 projection
    to d plus two 3x3 conv-relu blocks."""

    def __init__(self, c_in: int, d: int, rng: np.random.Generator, dtype=np.float32):
        self.proj = Conv(c_in, d, 1, rng, dtype=dtype)
        self.conv1 = Conv(d, d, 3, rng, dtype=dtype)
        self.conv2 = Conv(d, d, 3, rng, dtype=dtype)

    def __call__(self, f_top: Tensor, pe: Tensor) -> Tensor:
        x = self.proj(f_top)
        x = ad.relu(self.conv1(x))
        x = ad.relu(self.conv2(x))
        return map_to_tokens(x)


class ConvGroupStage(Module):
    """Attention-free group stage: concatenate the N token maps along
    channels and mix with a 1x1 conv. The channel order bakes in the image
    order, so this variant is order-sensitive by construction; the group
    sequence it returns is the consensus tiled N times."""

    def __init__(self, d: int, n_images: int, rng: np.random.Generator, dtype=np.float32):
        self.mix = Conv(n_images * d, d, 1, rng, dtype=dtype)
        self.n_images = n_images

    def __call__(self, stacked: Tensor, grid: tuple[int, int], debug_positions: bool = False) -> Tensor:
        n, q, d = stacked.shape
        if n != self.n_images:
            raise ShapeError(f"conv group stage built for {self.n_images} images, got {n}")
        h6, w6 = grid
        maps = [tokens_to_map(ad.reshape(ad.narrow(stacked, 0, i, 1), (q, d)), h6, w6) for i in range(n)]
        consensus = map_to_tokens(self.mix(ad.concat(maps, axis=0)))
        return ad.concat([consensus] * n, axis=0)


class ConvFusionStage(Module):
    """Attention-free fusion: average the group sequence over images, join
    it with the per-image tokens along channels, and mix with two 3x3
    convolutions on the token grid."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv(2 * d, d, 3, rng, dtype=dtype)
        self.conv2 = Conv(d, d, 3, rng, dtype=dtype)

    def __call__(self, s_n: Tensor, group_seq: Tensor, pe: Tensor, n_images: int, grid: tuple[int, int]) -> Tensor:
        q, d = s_n.shape
        if group_seq.shape != (n_images * q, d):
            raise ShapeError(f"group sequence {group_seq.shape} does not reshape to [{n_images},{q},{d}]")
        blocks = ad.reshape(group_seq, (n_images, q, d))
        consensus = ad.reduce(blocks, "mean", axis=0, order_canonical=True)
        joined = ad.concat([s_n, consensus], axis=1)
        h6, w6 = grid
        x = tokens_to_map(joined, h6, w6)
        x = ad.relu(self.conv1(x))
        x = self.conv2(x)
        return map_to_tokens(x)


class ProjectionHead(Module):
    """Two-layer map from pooled d-vectors to unit-length contrast vectors."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(cfg.d, cfg.d, rng, dtype)
        self.fc2 = Linear(cfg.d, cfg.proj_dim, rng, dtype)

    def __call__(self, v: Tensor) -> Tensor:
        z = self.fc2(ad.relu(self.fc1(v)))
        # the tiny constant keeps the gradient finite if z ever hits zero;
        # on the unit sphere itself it is far below float32 resolution
        sumsq = ad.reduce(z * z, "sum", axis=-1)
        den = ad.sqrt(sumsq + 1e-24)
        return z / ad.reshape(den, (den.shape[0], 1))


@dataclass
class ModelOutput:
    """Everything the losses consume, all still on the autodiff tape."""

    maps: list[Tensor]  # N final co-saliency maps [H,W]
    early_maps: list[Tensor]  # N coarse maps from the token stage
    aux_maps: list[Tensor]  # K single-image maps
    tokens: Tensor  # stacked per-image tokens [N,Q,d]
    group_seq: Tensor  # cross-image sequence [N*Q,d]
    fused: list[Tensor]  # N fused token sets [Q,d]


class CosalModel(Module):
    """Full group-inference network. Construction order is fixed, so a seed
    fully determines every initial weight."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.grid = cfg.token_grid
        h6, w6 = self.grid
        self.pe = Tensor(positional_encoding_2d(h6, w6, cfg.d, dtype))
        self.backbone = Backbone(cfg, rng, dtype)
        if cfg.use_refine:
            self.refine = ImageTokenRefiner(cfg.stage_channels[3], cfg.d, cfg.heads, cfg.ffn_multiplier, cfg.layers_refine, rng, dtype)
        else:
            self.refine = ConvTokenStage(cfg.stage_channels[3], cfg.d, rng, dtype)
        if cfg.use_group:
            self.group = GroupTokenEncoder(cfg.d, cfg.heads, cfg.ffn_multiplier, cfg.layers_group, rng, dtype)
        else:
            self.group = ConvGroupStage(cfg.d, cfg.group_size, rng, dtype)
        if cfg.use_fuse:
            self.fuse = ConsensusFusion(cfg.d, cfg.heads, cfg.ffn_multiplier, cfg.layers_fuse, rng, dtype)
        else:
            self.fuse = ConvFusionStage(cfg.d, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.early = EarlyHead(cfg, rng, dtype)
        self.project = ProjectionHead(cfg, rng, dtype)
        self._dtype = dtype

    # ---- per-image pieces -------------------------------------------------

    def _check_size(self, img: np.ndarray) -> None:
        if img.shape[1:] != self.cfg.input_size:
            raise ShapeError(f"image size {img.shape[1:]} != configured {self.cfg.input_size}")

    def _image_tokens(self, image: np.ndarray) -> tuple[Tensor, FeaturePyramid]:
        self._check_size(image)
        pyramid = self.backbone(Tensor(image.astype(self._dtype)))
        return self.refine(pyramid.f6, self.pe), pyramid

    def _group_sequence(self, stacked: Tensor, debug_positions: bool) -> Tensor:
        if isinstance(self.group, GroupTokenEncoder):
            return self.group(stacked, debug_positions=debug_positions)
        return self.group(stacked, self.grid, debug_positions=debug_positions)

    def _fused_tokens(self, s_n: Tensor, group_seq: Tensor, n_images: int) -> Tensor:
        if isinstance(self.fuse, ConsensusFusion):
            return self.fuse(s_n, group_seq, self.pe, n_images)
        return self.fuse(s_n, group_seq, self.pe, n_images, self.grid)

    # ---- public passes ----------------------------------------------------

    def forward_group(self, group: ImageGroup, aux: AuxBatch | None = None, debug_positions: bool = False) -> ModelOutput:
        n = group.size
        per_image = [self._image_tokens(img) for img in group.images]
        s_list = [s for s, _ in per_image]
        q, d = s_list[0].shape
        stacked = ad.concat([ad.reshape(s, (1, q, d)) for s in s_list], axis=0)
        group_seq = self._group_sequence(stacked, debug_positions)

        maps, early_maps, fused = [], [], []
        for s_n, (_, pyramid) in zip(s_list, per_image):
            s_g = self._fused_tokens(s_n, group_seq, n)
            fused.append(s_g)
            maps.append(self.decoder(s_g, pyramid))
            early_maps.append(self.early(s_n, self.grid, self.cfg.input_size))

        aux_maps = []
        if aux is not None:
            for img in aux.images:
                tokens, pyramid = self._image_tokens(img)
                aux_maps.append(self.decoder(tokens, pyramid))
        return ModelOutput(maps, early_maps, aux_maps, stacked, group_seq, fused)

    def forward_single(self, image: np.ndarray) -> Tensor:
        """Auxiliary path: backbone, token stage, decoder; no group context."""
        tokens, pyramid = self._image_tokens(image)
        return self.decoder(tokens, pyramid)

    # ---- weight IO ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}


_META_FLAGS = ("use_refine", "use_group", "use_fuse")


def config_to_meta(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Scalar entries that let a checkpoint rebuild its own architecture."""
    meta = {
        "meta.d": cfg.d,
        "meta.heads": cfg.heads,
        "meta.ffn_multiplier": cfg.ffn_multiplier,
        "meta.layers_refine": cfg.layers_refine,
        "meta.layers_group": cfg.layers_group,
        "meta.layers_fuse": cfg.layers_fuse,
        "meta.input_h": cfg.input_size[0],
        "meta.input_w": cfg.input_size[1],
        "meta.proj_dim": cfg.proj_dim,
        "meta.tau": cfg.tau,
        "meta.group_size": cfg.group_size,
        "meta.paper_exact": int(cfg.paper_exact_denominator),
    }
    for flag in _META_FLAGS:
        meta[f"meta.{flag}"] = int(getattr(cfg, flag))
    out = {k: np.asarray([v], dtype=np.float32) for k, v in meta.items()}
    out["meta.stage_channels"] = np.asarray(cfg.stage_channels, dtype=np.float32)
    return out


def meta_to_config(arrays: dict[str, np.ndarray]) -> ModelConfig:
    """Inverse of config_to_meta; complains about checkpoints without meta."""

    def scalar(key: str) -> float:
        if key not in arrays:
            raise IOParseError(f"checkpoint has no '{key}' entry; not a model checkpoint")
        return float(arrays[key].reshape(-1)[0])

    channels = arrays.get("meta.stage_channels")
    if channels is None or channels.size != 4:
        raise IOParseError("checkpoint has no 4-entry 'meta.stage_channels'")
    return ModelConfig(
        input_size=(int(scalar("meta.input_h")), int(scalar("meta.input_w"))),
        d=int(scalar("meta.d")),
        heads=int(scalar("meta.heads")),
        ffn_multiplier=int(scalar("meta.ffn_multiplier")),
        layers_refine=int(scalar("meta.layers_refine")),
        layers_group=int(scalar("meta.layers_group")),
        layers_fuse=int(scalar("meta.layers_fuse")),
        stage_channels=tuple(int(c) for c in channels),
        proj_dim=int(scalar("meta.proj_dim")),
        tau=scalar("meta.tau"),
        paper_exact_denominator=bool(scalar("meta.paper_exact")),
        use_refine=bool(scalar("meta.use_refine")),
        use_group=bool(scalar("meta.use_group")),
        use_fuse=bool(scalar("meta.use_fuse")),
        group_size=int(scalar("meta.group_size")),
    )


def model_from_arrays(arrays: dict[str, np.ndarray]) -> CosalModel:
    """Rebuild a model purely from checkpoint contents."""
    from .modules import load_state

    cfg = meta_to_config(arrays)
    model = CosalModel(cfg)
    params = {k: v for k, v in arrays.items() if not k.startswith("meta.") and not k.startswith("opt.")}
    try:
        load_state(model, params)
    except UsageError as exc:
        raise IOParseError(f"checkpoint parameters do not fit the declared architecture: {exc}") from exc
    return model
